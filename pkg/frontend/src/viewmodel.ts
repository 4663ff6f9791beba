import { ApiError } from "./api.js";
import type {
  MetricSample,
  NodeState,
  ObjectRead,
  PortDoc,
  PowerDoc,
  Snapshot,
  TopologyDoc,
} from "./types.js";

export type ActionState = "pending" | "ok" | "rejected" | "failed";

export interface ActionEntry {
  id: number;
  /** the UI control that issued it, e.g. "port:switch_1_p3" */
  control: string;
  label: string;
  state: ActionState;
  detail: string;
  at: number;
}

export interface PortView extends PortDoc {
  /** a toggle is in flight; enabled still shows the confirmed state */
  optimistic: boolean;
  optimisticEnabled: boolean | null;
}

export interface GaugeView {
  socPct: number;
  /** DoD floor: below this the bank is considered spent */
  floorPct: number;
  thresholds: { pct: number; priorities: string[] }[];
  drawW: number;
  chargeW: number;
  bankEmpty: boolean;
}

export type SubclusterHealth = "active" | "degraded" | "down";

export interface Mutator {
  setPort(portId: string, enable: boolean): Promise<unknown>;
  injectFault(component: string, action: string, torn?: boolean): Promise<unknown>;
  rebalance(): Promise<unknown>;
  putObject(key: string, value: string): Promise<void>;
  getObject(key: string): Promise<ObjectRead>;
}

export interface ViewModelOptions {
  /** badge the view stale once the last snapshot is older than this many intervals */
  staleAfterIntervals?: number;
  intervalMs?: number;
  historyLimit?: number;
  actionLogLimit?: number;
  now?: () => number;
  onChange?: () => void;
}

const DEFAULTS = {
  staleAfterIntervals: 3,
  intervalMs: 2000,
  historyLimit: 60,
  actionLogLimit: 50,
};

/**
 * All panel state lives here: the latest snapshot and topology, a small
 * in-memory metric window per node, the action log, and the optimistic
 * marks for in-flight toggles. The model is stateless with respect to the
 * cluster; a fresh instance fed the same documents renders the same view.
 */
export class PanelViewModel {
  snapshot: Snapshot | null = null;
  topology: TopologyDoc | null = null;
  /** the full power document; the snapshot only carries a summary */
  power: PowerDoc | null = null;
  degraded = false;
  lastSnapshotAt: number | null = null;
  actionLog: ActionEntry[] = [];

  private readonly opts: Required<Omit<ViewModelOptions, "now" | "onChange">>;
  private readonly now: () => number;
  private readonly onChange: () => void;
  private readonly inFlight = new Set<string>();
  private readonly optimisticPorts = new Map<string, boolean>();
  private readonly history = new Map<string, MetricSample[]>();
  private nextActionId = 1;

  constructor(private readonly api: Mutator, options: ViewModelOptions = {}) {
    this.opts = { ...DEFAULTS, ...options };
    this.now = options.now ?? (() => Date.now());
    this.onChange = options.onChange ?? (() => {});
  }

  // ---- ingest -----------------------------------------------------------

  ingestSnapshot(snap: Snapshot) {
    this.snapshot = snap;
    this.lastSnapshotAt = this.now();
    this.degraded = false;
    this.recordMetrics(snap);
    this.onChange();
  }

  ingestTopology(doc: TopologyDoc) {
    this.topology = doc;
    this.onChange();
  }

  ingestPower(doc: PowerDoc) {
    this.power = doc;
    // confirmed state caught up with an optimistic mark: drop the mark
    for (const port of doc.ports ?? []) {
      const want = this.optimisticPorts.get(port.port_id);
      if (want !== undefined && port.enabled === want && !this.inFlight.has(`port:${port.port_id}`)) {
        this.optimisticPorts.delete(port.port_id);
      }
    }
    this.onChange();
  }

  /** connection lost: flag it, keep the last data on screen */
  connectionLost() {
    this.degraded = true;
    this.onChange();
  }

  private recordMetrics(snap: Snapshot) {
    for (const [nodeId, entry] of Object.entries(snap.nodes ?? {})) {
      const m = entry.metrics;
      if (!m) continue;
      const window = this.history.get(nodeId) ?? [];
      if (window.length === 0 || window[window.length - 1].ts !== m.ts) {
        window.push(m);
        if (window.length > this.opts.historyLimit) window.shift();
        this.history.set(nodeId, window);
      }
    }
  }

  // ---- views ------------------------------------------------------------

  stale(): boolean {
    if (this.lastSnapshotAt === null) return true;
    const age = this.now() - this.lastSnapshotAt;
    return age > this.opts.staleAfterIntervals * this.opts.intervalMs;
  }

  nodeStates(): Record<string, NodeState> {
    const out: Record<string, NodeState> = {};
    for (const [nodeId, entry] of Object.entries(this.snapshot?.nodes ?? {})) {
      out[nodeId] = entry.state;
    }
    return out;
  }

  /** rollup per subcluster: down when every node is down */
  subclusterStates(): Record<string, SubclusterHealth> {
    const states = this.nodeStates();
    const out: Record<string, SubclusterHealth> = {};
    for (const sub of this.topology?.subclusters ?? []) {
      const nodeStates = sub.nodes.map((n) => states[n.node_id] ?? "down");
      if (nodeStates.every((s) => s === "down")) out[sub.subcluster_id] = "down";
      else if (nodeStates.every((s) => s === "active")) out[sub.subcluster_id] = "active";
      else out[sub.subcluster_id] = "degraded";
    }
    return out;
  }

  ports(): PortView[] {
    return (this.power?.ports ?? []).map((p) => {
      const want = this.optimisticPorts.get(p.port_id);
      return {
        ...p,
        optimistic: want !== undefined,
        optimisticEnabled: want === undefined ? null : want,
      };
    });
  }

  /** soc/draw come from the freshest snapshot summary; the floor and shed
   * thresholds only exist on the full power document */
  gauge(): GaugeView | null {
    const summary = this.snapshot?.power;
    const full = this.power;
    const live = summary ?? full;
    if (!live) return null;
    return {
      socPct: live.soc * 100,
      floorPct: full ? (1 - full.max_dod) * 100 : 0,
      thresholds: (full?.thresholds ?? []).map(([floor, priorities]) => ({
        pct: floor * 100,
        priorities,
      })),
      drawW: live.draw_w,
      chargeW: full?.charge_w ?? 0,
      bankEmpty: Boolean(live.flags?.bank_empty),
    };
  }

  syncCard(): { pending: number; oldestAgeS: number; linkState: string } | null {
    const sync = this.snapshot?.sync;
    if (!sync) return null;
    return {
      pending: sync.pending,
      oldestAgeS: sync.oldest_age_s,
      linkState: sync.link_state,
    };
  }

  metricsWindow(nodeId: string): MetricSample[] {
    return this.history.get(nodeId) ?? [];
  }

  // ---- actions ----------------------------------------------------------

  busy(control: string): boolean {
    return this.inFlight.has(control);
  }

  /**
   * Run one mutating command for a control. At most one request per
   * control is in flight; a second click while one is pending is ignored.
   * Every attempt lands in the action log with the server's verdict.
   */
  private async run(
    control: string,
    label: string,
    call: () => Promise<unknown>,
  ): Promise<ActionEntry | null> {
    if (this.inFlight.has(control)) return null;
    this.inFlight.add(control);
    const entry: ActionEntry = {
      id: this.nextActionId++,
      control,
      label,
      state: "pending",
      detail: "",
      at: this.now(),
    };
    this.actionLog.unshift(entry);
    if (this.actionLog.length > this.opts.actionLogLimit) this.actionLog.pop();
    this.onChange();
    try {
      const result = await call();
      entry.state = "ok";
      if (typeof result === "string") entry.detail = result;
    } catch (err) {
      if (err instanceof ApiError) {
        entry.state = "rejected";
        entry.detail = `${err.code}: ${err.message}`;
      } else {
        entry.state = "failed";
        entry.detail = err instanceof Error ? err.message : String(err);
      }
    } finally {
      this.inFlight.delete(control);
      this.onChange();
    }
    return entry;
  }

  async togglePort(portId: string, enable: boolean): Promise<ActionEntry | null> {
    const control = `port:${portId}`;
    if (this.inFlight.has(control)) return null;
    this.optimisticPorts.set(portId, enable);
    const entry = await this.run(
      control,
      `${enable ? "enable" : "disable"} ${portId}`,
      () => this.api.setPort(portId, enable),
    );
    if (entry && entry.state !== "ok") this.optimisticPorts.delete(portId);
    return entry;
  }

  injectFault(component: string, action: string, torn = false) {
    return this.run("fault", `${action} ${component}`, () =>
      this.api.injectFault(component, action, torn),
    );
  }

  rebalance() {
    return this.run("rebalance", "rebalance ring", () => this.api.rebalance());
  }

  putTestObject(key: string, value: string) {
    return this.run("object:put", `put ${key}`, () => this.api.putObject(key, value));
  }

  getTestObject(key: string) {
    return this.run("object:get", `get ${key}`, async () => {
      const got = await this.api.getObject(key);
      return `"${got.value}" @ ${got.counter} via ${got.origin}`;
    });
  }
}
