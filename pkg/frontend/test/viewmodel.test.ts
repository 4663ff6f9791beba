import { readFileSync } from "node:fs";
import { describe, expect, test } from "vitest";

import { ApiError } from "../src/api.js";
import { renderPanel } from "../src/render.js";
import type { ObjectRead, PowerDoc, Snapshot, TopologyDoc } from "../src/types.js";
import { PanelViewModel, type Mutator } from "../src/viewmodel.js";

const snapFixture = JSON.parse(
  readFileSync(new URL("./fixtures/snapshot_switch1_failed.json", import.meta.url), "utf8"),
) as Snapshot;
const topoFixture = JSON.parse(
  readFileSync(new URL("./fixtures/topology_switch1_failed.json", import.meta.url), "utf8"),
) as TopologyDoc;
const powerFixture = JSON.parse(
  readFileSync(new URL("./fixtures/power_switch1_failed.json", import.meta.url), "utf8"),
) as PowerDoc;

function clone<T>(doc: T): T {
  return JSON.parse(JSON.stringify(doc)) as T;
}

/** Mutator stub: resolves or rejects on demand, counts calls. */
class FakeApi implements Mutator {
  calls: string[] = [];
  failWith: Error | null = null;
  /** while true, calls hang until release() */
  gated = false;
  private waiters: (() => void)[] = [];

  release() {
    for (const resolve of this.waiters.splice(0)) resolve();
  }

  private gate(): Promise<void> {
    if (this.failWith) return Promise.reject(this.failWith);
    if (!this.gated) return Promise.resolve();
    return new Promise((resolve) => {
      this.waiters.push(resolve);
    });
  }

  setPort(portId: string, enable: boolean) {
    this.calls.push(`setPort ${portId} ${enable}`);
    return this.gate();
  }
  injectFault(component: string, action: string) {
    this.calls.push(`fault ${component} ${action}`);
    return this.gate();
  }
  rebalance() {
    this.calls.push("rebalance");
    return this.gate();
  }
  putObject(key: string, value: string) {
    this.calls.push(`put ${key}=${value}`);
    return this.gate();
  }
  async getObject(key: string): Promise<ObjectRead> {
    this.calls.push(`get ${key}`);
    await this.gate();
    return { key, value: "stored", counter: 3, origin: "sub_1_ctl_1", checksum: "ab" };
  }
}

function makeVm(options = {}) {
  const api = new FakeApi();
  const vm = new PanelViewModel(api, options);
  return { api, vm };
}

describe("snapshot ingestion", () => {
  test("switch_1-failed fixture renders seven nodes down", () => {
    const { vm } = makeVm();
    vm.ingestTopology(topoFixture);
    vm.ingestSnapshot(snapFixture);
    const states = Object.values(vm.nodeStates());
    expect(states.filter((s) => s === "down")).toHaveLength(7);
    expect(states.filter((s) => s === "active")).toHaveLength(7);
    expect(vm.subclusterStates()).toEqual({ sub_1: "down", sub_2: "active" });
  });

  test("unknown snapshot fields are ignored", () => {
    const { vm } = makeVm();
    const doc = clone(snapFixture) as Snapshot & Record<string, unknown>;
    doc.future_field = { nested: true };
    (doc.power as unknown as Record<string, unknown>).forecast = [1, 2, 3];
    for (const entry of Object.values(doc.nodes)) {
      (entry as unknown as Record<string, unknown>).rack = "r1";
    }
    vm.ingestTopology(topoFixture);
    vm.ingestSnapshot(doc);
    expect(vm.subclusterStates().sub_1).toBe("down");
    expect(vm.gauge()?.drawW).toBeCloseTo(snapFixture.power.draw_w, 6);
  });

  test("gauge: soc 0.5 on the 200 Ah default shows 50% with the DoD floor at 50%", () => {
    const { vm } = makeVm();
    const doc = clone(snapFixture);
    doc.power.soc = 0.5;
    vm.ingestSnapshot(doc);
    vm.ingestPower(powerFixture);
    const gauge = vm.gauge();
    expect(powerFixture.capacity_ah).toBe(200);
    expect(gauge?.socPct).toBeCloseTo(50, 6);
    expect(gauge?.floorPct).toBeCloseTo(50, 6);
    expect(gauge?.thresholds.map((t) => t.pct)).toEqual([40, 25]);
  });

  test("empty sync queue shows zero and link up", () => {
    const { vm } = makeVm();
    vm.ingestSnapshot(snapFixture);
    expect(vm.syncCard()).toEqual({ pending: 0, oldestAgeS: 0, linkState: "up" });
  });

  test("metric window appends new samples, dedupes repeats, stays capped", () => {
    const { vm } = makeVm({ historyLimit: 5 });
    for (let i = 0; i < 9; i++) {
      const doc = clone(snapFixture);
      doc.nodes.sub_2_ctl_1.metrics!.ts = Math.floor(i / 2); // every ts twice
      doc.nodes.sub_2_ctl_1.metrics!.cpu_pct = i;
      vm.ingestSnapshot(doc);
    }
    const window = vm.metricsWindow("sub_2_ctl_1");
    expect(window.map((m) => m.ts)).toEqual([0, 1, 2, 3, 4]);
  });
});

describe("staleness and degradation", () => {
  test("stale badge appears once the last snapshot is older than 3 intervals", () => {
    let clock = 0;
    const { vm } = makeVm({ intervalMs: 2000, staleAfterIntervals: 3, now: () => clock });
    expect(vm.stale()).toBe(true); // nothing ingested yet
    vm.ingestSnapshot(snapFixture);
    clock = 6000;
    expect(vm.stale()).toBe(false); // exactly 3 intervals is still fresh
    clock = 6001;
    expect(vm.stale()).toBe(true);
  });

  test("connection loss keeps the last data and flags degraded", () => {
    const { vm } = makeVm();
    vm.ingestTopology(topoFixture);
    vm.ingestSnapshot(snapFixture);
    vm.connectionLost();
    expect(vm.degraded).toBe(true);
    expect(Object.keys(vm.nodeStates())).toHaveLength(14);
    vm.ingestSnapshot(snapFixture); // reconnect clears the flag
    expect(vm.degraded).toBe(false);
  });

  test("a fresh model fed the same documents renders the same view", () => {
    const a = makeVm({ now: () => 0 });
    const b = makeVm({ now: () => 0 });
    for (const { vm } of [a, b]) {
      vm.ingestTopology(topoFixture);
      vm.ingestSnapshot(snapFixture);
      vm.ingestPower(powerFixture);
    }
    expect(renderPanel(a.vm)).toBe(renderPanel(b.vm));
  });
});

describe("actions", () => {
  test("port toggle is optimistic but never shown as applied before confirmation", async () => {
    const { api, vm } = makeVm();
    vm.ingestSnapshot(snapFixture);
    vm.ingestPower(powerFixture);
    api.gated = true;
    const done = vm.togglePort("switch_2_p4", false);

    const port = vm.ports().find((p) => p.port_id === "switch_2_p4")!;
    expect(port.enabled).toBe(true); // confirmed state unchanged
    expect(port.optimistic).toBe(true);
    expect(port.optimisticEnabled).toBe(false);
    expect(vm.actionLog[0]).toMatchObject({ state: "pending", label: "disable switch_2_p4" });

    api.release();
    const entry = await done;
    expect(entry?.state).toBe("ok");

    // the next power document confirms, which clears the optimistic mark
    const confirmed = clone(powerFixture);
    confirmed.ports.find((p) => p.port_id === "switch_2_p4")!.enabled = false;
    vm.ingestPower(confirmed);
    const after = vm.ports().find((p) => p.port_id === "switch_2_p4")!;
    expect(after.enabled).toBe(false);
    expect(after.optimistic).toBe(false);
  });

  test("server rejection lands in the log with the error code", async () => {
    const { api, vm } = makeVm();
    vm.ingestSnapshot(snapFixture);
    vm.ingestPower(powerFixture);
    api.failWith = new ApiError("PORT_POLICY", "port switch_2_p1 is critical", 409);
    const entry = await vm.togglePort("switch_2_p1", false);
    expect(entry?.state).toBe("rejected");
    expect(entry?.detail).toContain("PORT_POLICY");
    const port = vm.ports().find((p) => p.port_id === "switch_2_p1")!;
    expect(port.enabled).toBe(true);
    expect(port.optimistic).toBe(false); // rejected mark dropped
  });

  test("network failure is logged as failed, not rejected", async () => {
    const { api, vm } = makeVm();
    api.failWith = new TypeError("fetch failed");
    const entry = await vm.rebalance();
    expect(entry?.state).toBe("failed");
    expect(entry?.detail).toContain("fetch failed");
  });

  test("at most one in-flight request per control", async () => {
    const { api, vm } = makeVm();
    vm.ingestSnapshot(snapFixture);
    vm.ingestPower(powerFixture);
    api.gated = true;
    const first = vm.togglePort("switch_2_p4", false);
    const second = await vm.togglePort("switch_2_p4", false); // same control: ignored
    expect(second).toBeNull();
    const other = vm.togglePort("switch_2_p5", false); // different control: fine
    expect(api.calls.filter((c) => c.startsWith("setPort switch_2_p4"))).toHaveLength(1);
    expect(api.calls.filter((c) => c.startsWith("setPort switch_2_p5"))).toHaveLength(1);
    api.release();
    await Promise.all([first, other]);
  });

  test("get test object records the value in the log", async () => {
    const { vm } = makeVm();
    const entry = await vm.getTestObject("greeting");
    expect(entry?.state).toBe("ok");
    expect(entry?.detail).toBe('"stored" @ 3 via sub_1_ctl_1');
  });

  test("action log keeps newest first and stays capped", async () => {
    const { vm } = makeVm({ actionLogLimit: 3 });
    for (let i = 0; i < 5; i++) await vm.injectFault(`switch_${i}`, "fail");
    expect(vm.actionLog).toHaveLength(3);
    expect(vm.actionLog[0].label).toBe("fail switch_4");
  });
});
