import { readFileSync } from "node:fs";
import { describe, expect, test } from "vitest";

import {
  escapeHtml,
  renderActionLog,
  renderBanner,
  renderGauge,
  renderPorts,
  renderSparkline,
  renderSyncCard,
  renderTopology,
} from "../src/render.js";
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

const noopApi: Mutator = {
  setPort: () => new Promise(() => {}), // never settles: stays pending
  injectFault: () => Promise.resolve({}),
  rebalance: () => Promise.resolve({}),
  putObject: () => Promise.resolve(),
  getObject: () =>
    Promise.resolve<ObjectRead>({ key: "", value: "", counter: 0, origin: "", checksum: "" }),
};

function loadedVm(now: () => number = () => 0): PanelViewModel {
  const vm = new PanelViewModel(noopApi, { now });
  vm.ingestTopology(topoFixture);
  vm.ingestSnapshot(JSON.parse(JSON.stringify(snapFixture)) as Snapshot);
  vm.ingestPower(JSON.parse(JSON.stringify(powerFixture)) as PowerDoc);
  return vm;
}

const count = (haystack: string, needle: string) => haystack.split(needle).length - 1;

describe("topology map", () => {
  test("nodes are colored by lifecycle state", () => {
    const html = renderTopology(loadedVm());
    expect(count(html, 'class="node down"')).toBe(7);
    expect(count(html, 'class="node active"')).toBe(7);
    expect(html).toContain('class="subcluster down" data-subcluster="sub_1"');
    expect(html).toContain('class="subcluster active" data-subcluster="sub_2"');
  });

  test("failed switch is called out", () => {
    const html = renderTopology(loadedVm());
    expect(html).toContain('<span class="switch failed">switch_1</span>');
    expect(html).toContain("failed: switch_1");
  });
});

describe("battery gauge", () => {
  test("fill tracks soc, floor and shed thresholds are marked", () => {
    const vm = loadedVm();
    vm.snapshot!.power.soc = 0.5;
    const html = renderGauge(vm);
    expect(html).toContain('style="width:50.0%"');
    expect(html).toContain('class="marker floor" style="left:50.0%"');
    expect(html).toContain('class="marker threshold" style="left:40.0%"');
    expect(html).toContain('class="marker threshold" style="left:25.0%"');
    expect(html).toContain("draw 48.0 W");
  });

  test("empty bank gets the badge", () => {
    const vm = loadedVm();
    vm.snapshot!.power.flags.bank_empty = true;
    expect(renderGauge(vm)).toContain("BANK EMPTY");
  });
});

describe("sync card", () => {
  test("empty queue on a healthy link", () => {
    const html = renderSyncCard(loadedVm());
    expect(html).toContain("0 pending");
    expect(html).toContain("link up");
    expect(html).toContain("link-up");
  });

  test("downed link changes the card class", () => {
    const vm = loadedVm();
    vm.snapshot!.sync.link_state = "down";
    vm.snapshot!.sync.pending = 12;
    const html = renderSyncCard(vm);
    expect(html).toContain("link-down");
    expect(html).toContain("12 pending");
  });
});

describe("ports and actions", () => {
  test("an in-flight toggle renders as pending, visually distinct", () => {
    const vm = loadedVm();
    void vm.togglePort("switch_2_p4", false); // never settles
    const html = renderPorts(vm);
    expect(html).toContain("optimistic");
    expect(html).toContain("&rarr; off&hellip;");
    // the button for that port is disabled while the request is out
    expect(html).toMatch(/data-port="switch_2_p4"[^>]* disabled/);
    // confirmed state still shows on
    expect(html).toMatch(/switch_2_p4[\s\S]*?<td>on /);
  });

  test("rejections render with the server's code", async () => {
    const vm = loadedVm();
    vm.actionLog.unshift({
      id: 1,
      control: "port:switch_2_p1",
      label: "disable switch_2_p1",
      state: "rejected",
      detail: "PORT_POLICY: port switch_2_p1 is critical and cannot be disabled",
      at: 0,
    });
    const html = renderActionLog(vm);
    expect(html).toContain('class="action rejected"');
    expect(html).toContain("PORT_POLICY");
  });
});

describe("banner", () => {
  test("degraded wins, stale follows, healthy shows nothing", () => {
    let clock = 0;
    const vm = loadedVm(() => clock);
    expect(renderBanner(vm)).toBe("");
    clock = 7000; // past 3 x 2000 ms
    expect(renderBanner(vm)).toContain("stale");
    vm.connectionLost();
    expect(renderBanner(vm)).toContain("connection lost");
    expect(renderTopology(vm)).toContain("sub_1"); // data retained
  });
});

describe("sparklines", () => {
  test("window of samples becomes a polyline", () => {
    const vm = loadedVm();
    for (let i = 1; i <= 4; i++) {
      const doc = JSON.parse(JSON.stringify(snapFixture)) as Snapshot;
      doc.nodes.sub_2_ctl_1.metrics!.ts = 20 + i * 2;
      doc.nodes.sub_2_ctl_1.metrics!.cpu_pct = 100 * i;
      vm.ingestSnapshot(doc);
    }
    const svg = renderSparkline(vm, "sub_2_ctl_1");
    expect(svg).toContain("<polyline");
    expect(count(svg, ",")).toBeGreaterThanOrEqual(4);
  });
});

test("escapeHtml neutralizes markup", () => {
  expect(escapeHtml('<img src=x onerror="pwn()">&')).toBe(
    "&lt;img src=x onerror=&quot;pwn()&quot;&gt;&amp;",
  );
});
