// End-to-end against a live control service: a 50-step simulated scan's
// shift curve must arrive complete and in order across one forced stream
// reconnect, and the retrieval profile tool must show the phantom's
// transmission step edge.

import { ChildProcess, spawn } from "node:child_process";
import fs from "node:fs";
import net from "node:net";
import os from "node:os";
import path from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { ShiftCurveModel } from "../src/chart.js";
import { ResumableStream } from "../src/sse.js";

const STEPS = 50;

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const probe = net.createServer();
    probe.listen(0, "127.0.0.1", () => {
      const port = (probe.address() as net.AddressInfo).port;
      probe.close(() => resolve(port));
    });
    probe.on("error", reject);
  });
}

describe("operator console against a live service", () => {
  let child: ChildProcess;
  let workDir: string;
  let api: ApiClient;

  beforeAll(async () => {
    workDir = fs.mkdtempSync(path.join(os.tmpdir(), "gs-console-e2e-"));
    const port = await freePort();
    const configPath = path.join(workDir, "system.ini");
    fs.writeFileSync(configPath, `
[detector]
width = 32
height = 32
dark_sigma = 0
shot_noise = false
quantize = false

[phantom]
kind = slab
margin = 8

[service]
port = ${port}
data_dir = ${path.join(workDir, "data")}
scan_pacing_s = 0.01
`);
    child = spawn("python3", [
      "-m", "gratingscope.cli", "serve",
      "--config", configPath, "--no-motor-sockets",
    ], { stdio: ["ignore", "pipe", "pipe"], cwd: workDir });
    let stderr = "";
    child.stderr?.on("data", (chunk) => { stderr += chunk; });

    api = new ApiClient(`http://127.0.0.1:${port}`);
    const deadline = Date.now() + 60_000;
    for (;;) {
      try {
        await api.login("operator", "changeme");
        break;
      } catch {
        if (Date.now() > deadline) {
          throw new Error(`service did not come up; stderr:\n${stderr}`);
        }
        await new Promise((r) => setTimeout(r, 200));
      }
    }
  });

  afterAll(() => {
    child?.kill("SIGTERM");
  });

  it("streams 50 in-order curve points per arm across a forced reconnect, and "
     + "the profile tool shows the T=0.8 step", async () => {
    await api.tubeSet(true, 45, 22.5);

    const model = new ShiftCurveModel();
    const status = await api.status();
    // subscribe from the current stream position; the scan is started below
    const since = 0;
    const stream = new ResumableStream(
      (cursor) => api.streamUrl("shift_curve", cursor),
      (event) => model.addPoint(event.data),
      since,
    );
    const reading = stream.connect();

    const started = await api.scanStart({
      mode: "B", steps: STEPS, frames_to_average: 1, exposure_s: 0.02, seed: 5,
      name: "console-e2e",
    });
    model.reset(started.scan_id);

    // let part of the scan stream in, then force one reconnect
    const waitFor = async (count: number, timeoutMs: number) => {
      const deadline = Date.now() + timeoutMs;
      while (model.pointCount("reference") + model.pointCount("sample") < count) {
        if (Date.now() > deadline) {
          throw new Error(
            `timed out at ${model.pointCount("reference")}+${model.pointCount("sample")} points`,
          );
        }
        await new Promise((r) => setTimeout(r, 20));
      }
    };
    await waitFor(20, 60_000);
    stream.disconnect();
    await reading;
    const atReconnect = stream.lastSeq;
    expect(atReconnect).toBeGreaterThan(0);

    const resumed = stream.connect(); // resumes with ?since=lastSeq
    await waitFor(2 * STEPS, 120_000);
    stream.disconnect();
    await resumed;

    // exactly 50 points per arm, in step order, nothing lost or duplicated
    expect(model.pointCount("reference")).toBe(STEPS);
    expect(model.pointCount("sample")).toBe(STEPS);
    expect(model.steps("reference")).toEqual([...Array(STEPS).keys()]);
    expect(model.steps("sample")).toEqual([...Array(STEPS).keys()]);
    expect(model.anomalies).toEqual([]);
    expect(model.isComplete(STEPS)).toBe(true);

    // wait for the dataset to be finalized
    const deadline = Date.now() + 60_000;
    for (;;) {
      const scan = await api.scanStatus();
      if (scan.state === "completed") break;
      if (Date.now() > deadline) throw new Error(`scan stuck: ${JSON.stringify(scan)}`);
      await new Promise((r) => setTimeout(r, 50));
    }

    // retrieval job on the paired dataset (it carries both arms)
    const job = await api.retrievalSubmit(started.dataset, started.dataset);
    for (;;) {
      const state = await api.retrievalStatus(job.job_id);
      if (state.state === "done") break;
      if (state.state === "error") throw new Error(state.error);
      await new Promise((r) => setTimeout(r, 100));
    }

    // horizontal profile through the slab: background T=1, slab T=0.8,
    // edges at x=8 and x=24 (32x32 frame, margin 8)
    const profile = await api.profile(job.job_id, "transmission", 0, 16, 31, 16);
    expect(profile.values.length).toBeGreaterThanOrEqual(32);
    const inside = profile.values.slice(10, 22);
    const outside = [...profile.values.slice(0, 7), ...profile.values.slice(26)];
    const mean = (xs: number[]) => xs.reduce((a, b) => a + b, 0) / xs.length;
    expect(mean(inside)).toBeCloseTo(0.8, 2);
    expect(mean(outside)).toBeCloseTo(1.0, 2);
    const step = mean(outside) - mean(inside);
    expect(step).toBeGreaterThan(0.15);
    expect(step).toBeLessThan(0.25);

    // windowed previews are served as binary PGM
    const preview = new Uint8Array(await api.previewBytes(job.job_id, "transmission"));
    expect(preview[0]).toBe("P".charCodeAt(0));
    expect(preview[1]).toBe("5".charCodeAt(0));
  });
});
