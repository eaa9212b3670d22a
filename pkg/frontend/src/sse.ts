// Server-Sent-Events consumer over fetch streaming (browser and node share
// the same code path). Resumes by sequence number: the last delivered SSE
// id is appended as ?since= on reconnect, and anything at or below it is
// dropped, so one reconnect never duplicates or skips chart points.

export interface SseEvent {
  seq: number;
  event: string;
  data: any;
}

export type EventHandler = (event: SseEvent) => void;

export function parseSseChunk(buffer: string): { events: SseEvent[]; rest: string } {
  const events: SseEvent[] = [];
  const blocks = buffer.split("\n\n");
  const rest = blocks.pop() ?? "";
  for (const block of blocks) {
    let id = 0;
    let eventName = "message";
    const dataLines: string[] = [];
    for (const line of block.split("\n")) {
      if (line.startsWith("id:")) id = parseInt(line.slice(3).trim(), 10) || 0;
      else if (line.startsWith("event:")) eventName = line.slice(6).trim();
      else if (line.startsWith("data:")) dataLines.push(line.slice(5).trim());
    }
    if (dataLines.length === 0 && eventName === "message") continue;
    let data: any = null;
    if (dataLines.length) {
      try {
        data = JSON.parse(dataLines.join("\n"));
      } catch {
        data = dataLines.join("\n");
      }
    }
    events.push({ seq: id, event: eventName, data });
  }
  return { events, rest };
}

export class ResumableStream {
  lastSeq: number;
  private controller: AbortController | null = null;
  private running = false;

  constructor(
    private urlFor: (since: number) => string,
    private onEvent: EventHandler,
    since = 0,
    private onStatus: (status: string) => void = () => {},
  ) {
    this.lastSeq = since;
  }

  /** Read the stream until disconnect() or the server closes it. */
  async connect(): Promise<void> {
    this.controller = new AbortController();
    this.running = true;
    this.onStatus("connecting");
    try {
      const response = await fetch(this.urlFor(this.lastSeq),
        { signal: this.controller.signal });
      if (!response.ok || !response.body) {
        this.onStatus(`error ${response.status}`);
        return;
      }
      this.onStatus("open");
      const reader = response.body.getReader();
      const decoder = new TextDecoder();
      let buffer = "";
      while (this.running) {
        const { done, value } = await reader.read();
        if (done) break;
        buffer += decoder.decode(value, { stream: true });
        const { events, rest } = parseSseChunk(buffer);
        buffer = rest;
        for (const event of events) {
          if (event.event === "heartbeat") continue;
          if (event.seq !== 0 && event.seq <= this.lastSeq) continue; // replay guard
          if (event.seq !== 0) this.lastSeq = event.seq;
          this.onEvent(event);
        }
      }
    } catch (err: any) {
      if (err?.name !== "AbortError") this.onStatus(`error ${err}`);
    } finally {
      this.running = false;
      this.onStatus("closed");
    }
  }

  /** Abort the transport; connect() again resumes from lastSeq. */
  disconnect(): void {
    this.running = false;
    this.controller?.abort();
  }
}
