import type { ObjectRead, PowerDoc, Snapshot, SyncDoc, TopologyDoc } from "./types.js";

/** A response the server produced: carries its error code and status. */
export class ApiError extends Error {
  constructor(
    readonly code: string,
    message: string,
    readonly status: number,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export interface ClientOptions {
  baseUrl: string;
  /** injectable for tests */
  fetchFn?: typeof fetch;
}

async function raise(res: Response): Promise<never> {
  let code = `HTTP_${res.status}`;
  let message = res.statusText;
  try {
    const doc = await res.json();
    if (doc && typeof doc.error === "string") {
      code = doc.error;
      message = String(doc.message ?? message);
    }
  } catch {
    // non-JSON error body; keep the status line
  }
  throw new ApiError(code, message, res.status);
}

/**
 * Minimal client for the cloudlet service. Network failures surface as
 * whatever fetch throws; server rejections surface as ApiError.
 */
export class PanelClient {
  private readonly base: string;
  private readonly fetchFn: typeof fetch;

  constructor(opts: ClientOptions) {
    this.base = opts.baseUrl.replace(/\/$/, "");
    // bind: browsers reject fetch invoked with a foreign receiver
    this.fetchFn = opts.fetchFn ?? ((input, init) => fetch(input, init));
  }

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchFn(this.base + path);
    if (!res.ok) await raise(res);
    return (await res.json()) as T;
  }

  private async post<T>(path: string, body?: unknown): Promise<T> {
    const res = await this.fetchFn(this.base + path, {
      method: "POST",
      headers: body === undefined ? {} : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!res.ok) await raise(res);
    return (await res.json()) as T;
  }

  topology(): Promise<TopologyDoc> {
    return this.getJson("/topology");
  }

  snapshot(): Promise<Snapshot> {
    return this.getJson("/snapshot");
  }

  power(): Promise<PowerDoc> {
    return this.getJson("/power");
  }

  sync(): Promise<SyncDoc> {
    return this.getJson("/sync");
  }

  setPort(portId: string, enable: boolean): Promise<unknown> {
    const verb = enable ? "enable" : "disable";
    return this.post(`/ports/${encodeURIComponent(portId)}/${verb}`);
  }

  injectFault(component: string, action: string, torn = false): Promise<unknown> {
    return this.post("/faults", { component, action, torn });
  }

  rebalance(): Promise<unknown> {
    return this.post("/rebalance");
  }

  async putObject(key: string, value: string): Promise<void> {
    const res = await this.fetchFn(`${this.base}/objects/${encodeURIComponent(key)}`, {
      method: "PUT",
      headers: { "Content-Type": "application/octet-stream" },
      body: value,
    });
    if (!res.ok) await raise(res);
  }

  async getObject(key: string): Promise<ObjectRead> {
    const res = await this.fetchFn(`${this.base}/objects/${encodeURIComponent(key)}`);
    if (!res.ok) await raise(res);
    return {
      key,
      value: await res.text(),
      counter: Number(res.headers.get("X-Version-Counter") ?? 0),
      origin: res.headers.get("X-Version-Origin") ?? "",
      checksum: res.headers.get("X-Checksum") ?? "",
    };
  }

  /**
   * Consume the NDJSON snapshot stream until it ends, the signal aborts,
   * or the connection drops. Each complete line is handed to onSnapshot.
   */
  async streamSnapshots(
    onSnapshot: (snap: Snapshot) => void,
    signal?: AbortSignal,
  ): Promise<void> {
    const res = await this.fetchFn(this.base + "/snapshot/stream", { signal });
    if (!res.ok) await raise(res);
    if (!res.body) throw new Error("stream has no body");
    const reader = res.body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) return;
      buffer += decoder.decode(value, { stream: true });
      let nl: number;
      while ((nl = buffer.indexOf("\n")) >= 0) {
        const line = buffer.slice(0, nl).trim();
        buffer = buffer.slice(nl + 1);
        if (line) onSnapshot(JSON.parse(line) as Snapshot);
      }
    }
  }
}
