// DOM panels of the three-page console. Pure logic lives in state.ts,
// chart.ts and pgm.ts; this file only wires elements to the API client.

import { ApiClient, ApiError, StageAddress } from "./api.js";
import { ShiftCurveModel, drawShiftCurve } from "./chart.js";
import { GrayImage, drawGray, parsePgm, windowU8 } from "./pgm.js";
import { ResumableStream } from "./sse.js";
import { StageConfigEntry, encoderEnabled, stageChoices, unitFor } from "./state.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function showError(target: HTMLElement, err: unknown): void {
  target.textContent = err instanceof ApiError
    ? `${err.kind}: ${err.message}`
    : String(err);
  target.classList.add("error");
}

function clearError(target: HTMLElement): void {
  target.textContent = "";
  target.classList.remove("error");
}

// -- stage jog panel ---------------------------------------------------------

export function initJogPanel(api: ApiClient, stages: StageConfigEntry[]): void {
  const deviceSel = el<HTMLSelectElement>("jog-device");
  const typeSel = el<HTMLSelectElement>("jog-type");
  const axisSel = el<HTMLSelectElement>("jog-axis");
  const modeSel = el<HTMLSelectElement>("jog-mode");
  const valueInput = el<HTMLInputElement>("jog-value");
  const unitLabel = el<HTMLSpanElement>("jog-unit");
  const position = el<HTMLInputElement>("jog-position");
  const encoder = el<HTMLInputElement>("jog-encoder");
  const status = el<HTMLSpanElement>("jog-status");

  const devices = [...new Set(stages.map((s) => s.device))].sort((a, b) => a - b);
  deviceSel.innerHTML = devices.map((d) => `<option>${d}</option>`).join("");

  const selection = (): StageAddress => ({
    device: parseInt(deviceSel.value, 10),
    motor_type: typeSel.value,
    axis: axisSel.value,
  });

  function refreshRings(): void {
    const device = parseInt(deviceSel.value, 10);
    const types = [...new Set(stageChoices(stages, device).map((s) => s.motor_type))];
    typeSel.innerHTML = types.map((t) => `<option>${t}</option>`).join("");
    const axes = stageChoices(stages, device, typeSel.value).map((s) => s.axis);
    axisSel.innerHTML = axes.map((a) => `<option>${a}</option>`).join("");
    const sel = selection();
    unitLabel.textContent = unitFor(stages, sel);
    encoder.disabled = !encoderEnabled(sel);
    if (encoder.disabled) encoder.value = "";
  }
  deviceSel.onchange = refreshRings;
  typeSel.onchange = refreshRings;
  axisSel.onchange = refreshRings;
  refreshRings();

  async function run(action: string, value?: number): Promise<void> {
    clearError(status);
    try {
      const reply = await api.stageCommand(selection(), action, value);
      if (reply.position !== undefined) position.value = reply.position.toFixed(4);
      if (reply.encoder !== undefined) encoder.value = reply.encoder.toFixed(4);
      status.textContent = reply.raw_reply ?? reply.status;
    } catch (err) {
      showError(status, err);
    }
  }

  el<HTMLButtonElement>("jog-go").onclick = () => {
    const value = parseFloat(valueInput.value || "0");
    run(modeSel.value === "relative" ? "move_rel" : "move_abs", value);
  };
  el<HTMLButtonElement>("jog-query").onclick = () => run("query");
  el<HTMLButtonElement>("jog-zero").onclick = () => run("zero");
  el<HTMLButtonElement>("jog-stop").onclick = () => run("stop");
}

// -- tube panel ----------------------------------------------------------------

export function initTubePanel(api: ApiClient): void {
  const kv = el<HTMLInputElement>("tube-kv");
  const ma = el<HTMLInputElement>("tube-ma");
  const state = el<HTMLSpanElement>("tube-state");

  async function set(on: boolean): Promise<void> {
    clearError(state);
    try {
      const reply = await api.tubeSet(on, parseFloat(kv.value), parseFloat(ma.value));
      state.textContent = reply.on ? `ON ${reply.kv} kV / ${reply.ma} mA` : "OFF";
    } catch (err) {
      showError(state, err);
    }
  }
  el<HTMLButtonElement>("tube-on").onclick = () => set(true);
  el<HTMLButtonElement>("tube-off").onclick = () => set(false);
}

// -- live detector view ---------------------------------------------------------

export function initDetectorPanel(api: ApiClient): () => void {
  const canvas = el<HTMLCanvasElement>("live-canvas");
  const status = el<HTMLSpanElement>("live-status");
  const toggle = el<HTMLButtonElement>("live-toggle");
  let live = false;
  let stream: ResumableStream | null = null;

  function start(): void {
    stream = new ResumableStream(
      (since) => api.streamUrl("live_frames", since),
      (event) => {
        const { width, height, data_b64 } = event.data ?? {};
        if (!width || !data_b64) return;
        const bytes = Uint8Array.from(atob(data_b64), (c) => c.charCodeAt(0));
        drawGray(canvas, { width, height, pixels: bytes },
          Math.max(1, Math.floor(384 / width)));
        status.textContent = event.data.arm
          ? `scan frame: ${event.data.arm} step ${event.data.step}`
          : "live";
      },
      0,
      (s) => { if (!live) status.textContent = s; },
    );
    void stream.connect();
  }
  start();

  toggle.onclick = async () => {
    live = !live;
    toggle.textContent = live ? "Stop live" : "Start live";
    try {
      await api.detectorLive(live);
    } catch (err) {
      showError(status, err);
    }
  };
  return () => stream?.disconnect();
}

// -- scan dialog + shift curve ----------------------------------------------------

export function initScanPanel(api: ApiClient): () => void {
  const steps = el<HTMLInputElement>("scan-steps");
  const averages = el<HTMLInputElement>("scan-avg");
  const exposure = el<HTMLInputElement>("scan-exposure");
  const mode = el<HTMLSelectElement>("scan-mode");
  const seed = el<HTMLInputElement>("scan-seed");
  const status = el<HTMLSpanElement>("scan-status");
  const canvas = el<HTMLCanvasElement>("curve-canvas");

  const model = new ShiftCurveModel();
  let expectedSteps = parseInt(steps.value, 10);

  const stream = new ResumableStream(
    (since) => api.streamUrl("shift_curve", since),
    (event) => {
      if (model.addPoint(event.data)) {
        drawShiftCurve(canvas, model, expectedSteps);
        status.textContent =
          `ref ${model.pointCount("reference")}/${expectedSteps}  ` +
          `sample ${model.pointCount("sample")}/${expectedSteps}` +
          (model.anomalies.length ? `  (${model.anomalies.length} anomalies!)` : "");
      }
    },
  );
  void stream.connect();

  el<HTMLButtonElement>("scan-start").onclick = async () => {
    clearError(status);
    try {
      expectedSteps = parseInt(steps.value, 10);
      const reply = await api.scanStart({
        mode: mode.value,
        steps: expectedSteps,
        frames_to_average: parseInt(averages.value, 10),
        exposure_s: parseFloat(exposure.value),
        seed: parseInt(seed.value, 10) || 0,
      });
      model.reset(reply.scan_id);
      status.textContent = `running: ${reply.scan_id}`;
    } catch (err) {
      showError(status, err);
    }
  };

  el<HTMLButtonElement>("scan-abort").onclick = async () => {
    try {
      const reply = await api.scanAbort();
      status.textContent = `scan ${reply.status}`;
    } catch (err) {
      showError(status, err);
    }
  };
  return () => stream.disconnect();
}

// -- retrieval viewer -------------------------------------------------------------

const CHANNELS = ["transmission", "dpc", "darkfield"] as const;

export function initRetrievalPanel(api: ApiClient): void {
  const sampleInput = el<HTMLInputElement>("ret-sample");
  const referenceInput = el<HTMLInputElement>("ret-reference");
  const status = el<HTMLSpanElement>("ret-status");
  const profileCanvas = el<HTMLCanvasElement>("profile-canvas");
  const images = new Map<string, GrayImage>();
  let jobId: string | null = null;

  async function refreshDatasets(): Promise<void> {
    const list = await api.datasets();
    const options = list
      .filter((d: any) => !d.error)
      .map((d: any) => `<option>${d.path}</option>`).join("");
    el<HTMLDataListElement>("dataset-options").innerHTML = options;
  }
  void refreshDatasets();

  async function renderChannel(channel: string): Promise<void> {
    if (!jobId) return;
    const raw = parsePgm(await api.previewBytes(jobId, channel));
    images.set(channel, raw);
    const lo = parseFloat(el<HTMLInputElement>(`win-lo-${channel}`).value);
    const hi = parseFloat(el<HTMLInputElement>(`win-hi-${channel}`).value);
    const canvas = el<HTMLCanvasElement>(`img-${channel}`);
    drawGray(canvas, windowU8(raw, lo, hi), Math.max(1, Math.floor(256 / raw.width)));
  }

  for (const channel of CHANNELS) {
    const rerender = () => {
      const raw = images.get(channel);
      if (!raw) return;
      const lo = parseFloat(el<HTMLInputElement>(`win-lo-${channel}`).value);
      const hi = parseFloat(el<HTMLInputElement>(`win-hi-${channel}`).value);
      drawGray(el<HTMLCanvasElement>(`img-${channel}`), windowU8(raw, lo, hi),
        Math.max(1, Math.floor(256 / raw.width)));
    };
    el<HTMLInputElement>(`win-lo-${channel}`).oninput = rerender;
    el<HTMLInputElement>(`win-hi-${channel}`).oninput = rerender;
  }

  el<HTMLButtonElement>("ret-run").onclick = async () => {
    clearError(status);
    try {
      const reply = await api.retrievalSubmit(sampleInput.value, referenceInput.value);
      jobId = reply.job_id;
      status.textContent = `job ${jobId} running`;
      const poll = async (): Promise<void> => {
        const state = await api.retrievalStatus(jobId!);
        if (state.state === "running") {
          setTimeout(poll, 300);
          return;
        }
        if (state.state !== "done") {
          status.textContent = `job failed: ${state.error}`;
          status.classList.add("error");
          return;
        }
        status.textContent = `job ${jobId} done`;
        for (const channel of CHANNELS) await renderChannel(channel);
      };
      void poll();
    } catch (err) {
      showError(status, err);
    }
  };

  el<HTMLButtonElement>("profile-run").onclick = async () => {
    if (!jobId) return;
    try {
      const coords = ["profile-x0", "profile-y0", "profile-x1", "profile-y1"]
        .map((id) => parseFloat(el<HTMLInputElement>(id).value));
      const channel = el<HTMLSelectElement>("profile-channel").value;
      const profile = await api.profile(jobId, channel, coords[0], coords[1],
        coords[2], coords[3]);
      drawProfile(profileCanvas, profile.positions, profile.values);
    } catch (err) {
      showError(status, err);
    }
  };
}

export function drawProfile(canvas: HTMLCanvasElement, positions: number[],
                            values: number[]): void {
  const ctx = canvas.getContext("2d");
  if (!ctx || values.length === 0) return;
  const { width, height } = canvas;
  ctx.fillStyle = "#10141a";
  ctx.fillRect(0, 0, width, height);
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  const span = hi - lo || 1;
  const maxPos = positions[positions.length - 1] || 1;
  ctx.strokeStyle = "#7ddf7d";
  ctx.beginPath();
  values.forEach((v, i) => {
    const x = 4 + (positions[i] / maxPos) * (width - 8);
    const y = height - 14 - ((v - lo) / span) * (height - 28);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.fillStyle = "#8fa3bb";
  ctx.font = "10px sans-serif";
  ctx.fillText(hi.toPrecision(4), 4, 10);
  ctx.fillText(lo.toPrecision(4), 4, height - 2);
}

// -- history / notes --------------------------------------------------------------

export function initHistoryPanel(api: ApiClient): void {
  const table = el<HTMLTableSectionElement>("history-body");
  const statsBox = el<HTMLPreElement>("history-stats");
  const noteInput = el<HTMLInputElement>("note-text");
  const status = el<HTMLSpanElement>("history-status");

  async function refresh(): Promise<void> {
    const entries = await api.history(60);
    table.innerHTML = entries.reverse().map((e: any) => `
      <tr>
        <td>${new Date(e.timestamp * 1000).toLocaleTimeString()}</td>
        <td>${e.user}</td><td>${e.action}</td><td>${e.target}</td>
        <td>${e.outcome}</td>
      </tr>`).join("");
    statsBox.textContent = JSON.stringify(await api.historyStats(), null, 2);
  }

  el<HTMLButtonElement>("history-refresh").onclick = () => void refresh();
  el<HTMLButtonElement>("note-add").onclick = async () => {
    clearError(status);
    try {
      await api.addNote(noteInput.value);
      noteInput.value = "";
      await refresh();
    } catch (err) {
      showError(status, err);
    }
  };
  void refresh();
}
