import type { PanelClient } from "./api.js";
import type { PanelViewModel } from "./viewmodel.js";

export interface PollerOptions {
  /** polling cadence when the stream is unavailable */
  intervalMs?: number;
}

const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

/**
 * Feeds the view model: prefers the NDJSON snapshot stream, falls back to
 * plain polling when the stream is unavailable, and refetches the
 * topology whenever the epoch moves (membership changed, so the shape or
 * failed set may have too).
 */
export class Poller {
  private stopped = false;
  private abort = new AbortController();
  private lastEpoch: number | null = null;
  private running: Promise<void> | null = null;

  constructor(
    private readonly client: PanelClient,
    private readonly vm: PanelViewModel,
    private readonly opts: PollerOptions = {},
  ) {}

  start() {
    if (!this.running) this.running = this.loop();
    return this.running;
  }

  async stop() {
    this.stopped = true;
    this.abort.abort();
    await this.running?.catch(() => {});
  }

  private get intervalMs() {
    return this.opts.intervalMs ?? 2000;
  }

  private onSnapshot = (snap: Parameters<PanelViewModel["ingestSnapshot"]>[0]) => {
    const epochMoved = this.lastEpoch !== null && snap.epoch !== this.lastEpoch;
    this.lastEpoch = snap.epoch;
    this.vm.ingestSnapshot(snap);
    // the snapshot carries only a power summary; ports and thresholds
    // ride the full document (a missed fetch is retried next snapshot)
    this.client
      .power()
      .then((doc) => this.vm.ingestPower(doc))
      .catch(() => {});
    if (epochMoved) {
      this.client
        .topology()
        .then((doc) => this.vm.ingestTopology(doc))
        .catch(() => this.vm.connectionLost());
    }
  };

  private async loop() {
    while (!this.stopped) {
      try {
        if (!this.vm.topology) this.vm.ingestTopology(await this.client.topology());
        // stream until it ends or drops, then take a polling lap
        await this.client.streamSnapshots(this.onSnapshot, this.abort.signal);
      } catch {
        if (!this.stopped) this.vm.connectionLost();
      }
      if (this.stopped) return;
      try {
        this.onSnapshot(await this.client.snapshot());
      } catch {
        this.vm.connectionLost();
      }
      await sleep(this.intervalMs);
    }
  }
}
