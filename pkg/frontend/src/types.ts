/**
 * Wire documents served by the cloudlet HTTP API.
 *
 * Only the fields the panel reads are declared; anything else the server
 * adds rides along in the parsed JSON and is ignored, so the API can grow
 * fields without breaking deployed panels.
 */

export type NodeState = "joining" | "active" | "suspect" | "down";

export interface MetricSample {
  ts: number;
  cpu_pct: number;
  ram_mb_used: number;
  io_ops: number;
  draw_w: number;
}

export interface NodeEntry {
  state: NodeState;
  incarnation: number;
  metrics?: MetricSample | null;
}

export interface PortDoc {
  port_id: string;
  attached_node: string | null;
  priority: string;
  enabled: boolean;
  draw_w: number;
}

export interface PowerDoc {
  soc: number;
  capacity_ah: number;
  voltage_v: number;
  chemistry: string;
  max_dod: number;
  draw_w: number;
  charge_w: number;
  ambient_c: number;
  flags: { bank_empty: boolean; charge_inhibited: boolean };
  /** [soc floor, priorities shed at it], deepest last */
  thresholds: [number, string[]][];
  ports: PortDoc[];
}

export interface SyncDoc {
  pending: number;
  oldest_age_s: number;
  link_state: string;
  in_flight: number;
  acked_total: number;
  backoff_s: number;
}

/** the slim power block embedded in each snapshot */
export interface PowerSummary {
  soc: number;
  draw_w: number;
  flags: { bank_empty: boolean; charge_inhibited: boolean };
}

export interface Snapshot {
  ts: number;
  epoch: number;
  nodes: Record<string, NodeEntry>;
  power: PowerSummary;
  sync: SyncDoc;
}

export interface NodeSpecDoc {
  node_id: string;
  role: string;
  subcluster_id: string;
  port_id: string;
}

export interface SubclusterDoc {
  subcluster_id: string;
  switch: { switch_id: string };
  nodes: NodeSpecDoc[];
}

export interface TopologyDoc {
  subclusters: SubclusterDoc[];
  interconnects: [string, string][];
  upstream_links: string[];
  failed: string[];
  live_nodes: string[];
}

export interface ObjectRead {
  key: string;
  value: string;
  counter: number;
  origin: string;
  checksum: string;
}
