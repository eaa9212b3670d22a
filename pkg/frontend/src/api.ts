// Thin typed client for the control-service wire API. The console never
// computes physics: every displayed number comes from one of these replies
// or from a stream event.

export class ApiError extends Error {
  constructor(public status: number, public kind: string, detail: string) {
    super(detail);
  }
}

export interface StageAddress {
  device: number;
  motor_type: string;
  axis: string;
}

export interface StageReply {
  status: string;
  position?: number;
  encoder?: number;
  steps?: number;
  unit?: string;
  raw_reply?: string;
}

export interface ScanStartBody {
  mode: string;
  steps: number;
  frames_to_average: number;
  exposure_s: number;
  seed: number;
  name?: string;
}

export interface ProfileReply {
  channel: string;
  positions: number[];
  values: number[];
}

export class ApiClient {
  token = "";

  constructor(public base: string) {}

  private async request(method: string, path: string, body?: unknown): Promise<any> {
    const headers: Record<string, string> = { "content-type": "application/json" };
    if (this.token) headers["authorization"] = `Bearer ${this.token}`;
    const response = await fetch(this.base + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    const payload = text ? JSON.parse(text) : null;
    if (!response.ok) {
      throw new ApiError(response.status, payload?.error ?? "HTTPError",
        payload?.detail ?? response.statusText);
    }
    return payload;
  }

  async login(user: string, password: string): Promise<{ token: string; role: string }> {
    const reply = await this.request("POST", "/api/login", { user, password });
    this.token = reply.token;
    return reply;
  }

  logout() { return this.request("POST", "/api/logout"); }
  releaseControl() { return this.request("POST", "/api/control/release"); }
  status() { return this.request("GET", "/api/status"); }
  config() { return this.request("GET", "/api/config"); }

  stageCommand(addr: StageAddress, action: string, value?: number): Promise<StageReply> {
    return this.request("POST", "/api/stage/command", { ...addr, action, value });
  }

  tubeSet(on: boolean, kv?: number, ma?: number) {
    return this.request("POST", "/api/tube", { on, kv, ma });
  }

  detectorLive(on: boolean) {
    return this.request("POST", "/api/detector/live", { on });
  }

  scanStart(body: ScanStartBody) { return this.request("POST", "/api/scan/start", body); }
  scanAbort() { return this.request("POST", "/api/scan/abort"); }
  scanStatus() { return this.request("GET", "/api/scan/status"); }

  retrievalSubmit(samplePath: string, referencePath: string,
                  opts: { roi?: number[]; margin_rows?: number } = {}) {
    return this.request("POST", "/api/retrieval", {
      sample_path: samplePath, reference_path: referencePath, ...opts,
    });
  }

  retrievalStatus(jobId: string) { return this.request("GET", `/api/retrieval/${jobId}`); }

  previewUrl(jobId: string, channel: string): string {
    return `${this.base}/api/retrieval/${jobId}/preview/${channel}` +
      `?token=${encodeURIComponent(this.token)}`;
  }

  async previewBytes(jobId: string, channel: string): Promise<ArrayBuffer> {
    const response = await fetch(this.previewUrl(jobId, channel));
    if (!response.ok) throw new ApiError(response.status, "HTTPError", "preview failed");
    return response.arrayBuffer();
  }

  profile(jobId: string, channel: string, x0: number, y0: number,
          x1: number, y1: number): Promise<ProfileReply> {
    const q = new URLSearchParams({
      channel, x0: String(x0), y0: String(y0), x1: String(x1), y1: String(y1),
    });
    return this.request("GET", `/api/retrieval/${jobId}/profile?${q}`);
  }

  history(limit = 100) { return this.request("GET", `/api/history?limit=${limit}`); }
  historyStats() { return this.request("GET", "/api/history/stats"); }
  addNote(text: string) { return this.request("POST", "/api/notes", { text }); }
  datasets() { return this.request("GET", "/api/datasets"); }

  streamUrl(channel: string, since: number): string {
    return `${this.base}/api/stream/${channel}?since=${since}` +
      `&token=${encodeURIComponent(this.token)}`;
  }
}
