import type { PanelViewModel } from "./viewmodel.js";

export function escapeHtml(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

const fmt = (n: number, digits = 1) => n.toFixed(digits);

/** One box per subcluster, nodes colored by lifecycle state. */
export function renderTopology(vm: PanelViewModel): string {
  if (!vm.topology) return `<section class="topology empty">no topology yet</section>`;
  const states = vm.nodeStates();
  const rollup = vm.subclusterStates();
  const failed = new Set(vm.topology.failed ?? []);
  const boxes = vm.topology.subclusters
    .map((sub) => {
      const health = rollup[sub.subcluster_id] ?? "down";
      const switchId = sub.switch.switch_id;
      const switchClass = failed.has(switchId) ? "switch failed" : "switch";
      const chips = sub.nodes
        .map((n) => {
          const state = states[n.node_id] ?? "down";
          return `<span class="node ${state}" title="${escapeHtml(n.role)}">${escapeHtml(n.node_id)}</span>`;
        })
        .join("");
      return (
        `<div class="subcluster ${health}" data-subcluster="${escapeHtml(sub.subcluster_id)}">` +
        `<h3>${escapeHtml(sub.subcluster_id)} <span class="${switchClass}">${escapeHtml(switchId)}</span>` +
        ` <span class="health">${health}</span></h3>` +
        `<div class="nodes">${chips}</div></div>`
      );
    })
    .join("");
  const failedList = failed.size
    ? `<p class="failed-components">failed: ${[...failed].map(escapeHtml).join(", ")}</p>`
    : "";
  return `<section class="topology">${boxes}${failedList}</section>`;
}

/** Battery bar with the DoD floor and every shed threshold marked. */
export function renderGauge(vm: PanelViewModel): string {
  const g = vm.gauge();
  if (!g) return `<section class="gauge empty">no power data yet</section>`;
  const markers = [
    `<span class="marker floor" style="left:${fmt(g.floorPct)}%" title="DoD floor ${fmt(g.floorPct, 0)}%"></span>`,
    ...g.thresholds.map(
      (t) =>
        `<span class="marker threshold" style="left:${fmt(t.pct)}%" ` +
        `title="shed ${t.priorities.join("+")} at ${fmt(t.pct, 0)}%"></span>`,
    ),
  ].join("");
  const emptyBadge = g.bankEmpty ? `<span class="bank-empty">BANK EMPTY</span>` : "";
  return (
    `<section class="gauge">` +
    `<div class="bar"><div class="fill" style="width:${fmt(g.socPct)}%"></div>${markers}</div>` +
    `<p>soc ${fmt(g.socPct)}% &middot; draw ${fmt(g.drawW)} W &middot; charge ${fmt(g.chargeW)} W ${emptyBadge}</p>` +
    `</section>`
  );
}

/** Inline SVG polyline of the cpu window for one node. */
export function renderSparkline(vm: PanelViewModel, nodeId: string): string {
  const window = vm.metricsWindow(nodeId);
  if (window.length < 2) return `<svg class="spark" viewBox="0 0 60 16"></svg>`;
  const max = Math.max(...window.map((m) => m.cpu_pct), 1);
  const step = 60 / (window.length - 1);
  const points = window
    .map((m, i) => `${fmt(i * step)},${fmt(16 - (m.cpu_pct / max) * 14)}`)
    .join(" ");
  return `<svg class="spark" viewBox="0 0 60 16"><polyline points="${points}" /></svg>`;
}

export function renderSparklines(vm: PanelViewModel): string {
  const rows = Object.keys(vm.nodeStates())
    .sort()
    .map((nodeId) => {
      const last = vm.metricsWindow(nodeId).at(-1);
      const cpu = last ? `${fmt(last.cpu_pct, 0)}%` : "-";
      return (
        `<tr><td>${escapeHtml(nodeId)}</td>` +
        `<td>${renderSparkline(vm, nodeId)}</td><td>${cpu}</td></tr>`
      );
    })
    .join("");
  return `<section class="metrics"><table>${rows}</table></section>`;
}

export function renderSyncCard(vm: PanelViewModel): string {
  const card = vm.syncCard();
  if (!card) return `<section class="sync empty">no sync data yet</section>`;
  return (
    `<section class="sync link-${escapeHtml(card.linkState)}">` +
    `<h3>upstream sync</h3>` +
    `<p>${card.pending} pending &middot; oldest ${fmt(card.oldestAgeS)} s &middot; ` +
    `link ${escapeHtml(card.linkState)}</p></section>`
  );
}

/** Port toggles; an in-flight toggle renders as pending, not applied. */
export function renderPorts(vm: PanelViewModel): string {
  const rows = vm
    .ports()
    .map((p) => {
      const pending = p.optimistic
        ? `<span class="pending" title="awaiting confirmation">&rarr; ${p.optimisticEnabled ? "on" : "off"}&hellip;</span>`
        : "";
      const busy = vm.busy(`port:${p.port_id}`) ? " disabled" : "";
      const next = p.enabled ? "disable" : "enable";
      return (
        `<tr class="port ${p.enabled ? "on" : "off"}${p.optimistic ? " optimistic" : ""}">` +
        `<td>${escapeHtml(p.port_id)}</td><td>${escapeHtml(p.attached_node ?? "-")}</td>` +
        `<td>${escapeHtml(p.priority)}</td><td>${fmt(p.draw_w)} W</td>` +
        `<td>${p.enabled ? "on" : "off"} ${pending}</td>` +
        `<td><button data-port="${escapeHtml(p.port_id)}" data-enable="${!p.enabled}"${busy}>${next}</button></td></tr>`
      );
    })
    .join("");
  return `<section class="ports"><table>${rows}</table></section>`;
}

export function renderActionLog(vm: PanelViewModel): string {
  const rows = vm.actionLog
    .map(
      (a) =>
        `<li class="action ${a.state}"><span class="label">${escapeHtml(a.label)}</span> ` +
        `<span class="state">${a.state}</span>` +
        (a.detail ? ` <span class="detail">${escapeHtml(a.detail)}</span>` : "") +
        `</li>`,
    )
    .join("");
  return `<section class="action-log"><h3>actions</h3><ul>${rows}</ul></section>`;
}

export function renderBanner(vm: PanelViewModel): string {
  if (vm.degraded) {
    return `<div class="banner degraded">connection lost &mdash; showing last known state</div>`;
  }
  if (vm.stale()) {
    return `<div class="banner stale">stale &mdash; last snapshot is overdue</div>`;
  }
  return "";
}

export function renderPanel(vm: PanelViewModel): string {
  const epoch = vm.snapshot ? `epoch ${vm.snapshot.epoch}` : "";
  return (
    renderBanner(vm) +
    `<header><h1>cloudlet panel</h1><span class="epoch">${epoch}</span></header>` +
    renderTopology(vm) +
    renderGauge(vm) +
    renderSyncCard(vm) +
    renderPorts(vm) +
    renderSparklines(vm) +
    renderActionLog(vm)
  );
}
