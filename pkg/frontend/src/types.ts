/** JSON shapes of the coordinator HTTP API the console consumes. */

export interface ScanInfo {
  bytes_total: number;
  bytes_pending: number;
  bytes_claimed: number;
  progress: number;
  rows_scanned: number;
}

export type StageKind =
  | "scan"
  | "exchange"
  | "partitioned-join"
  | "broadcast-join";

export interface StageStatus {
  kind: StageKind;
  dop: number;
  building: number;
  task_dop: number;
  tasks: string[];
  elasticity: string;
  rows_total: number;
  throughput: number;
  t_build: number | null;
  scan: ScanInfo | null;
  r_consume: number | null;
  states: Record<string, string>;
  t_remain?: number | null;
  /** [seconds-since-start, rows/s] pairs; present with ?series=1 */
  series?: [number, number][];
}

export interface TuningEvent {
  ts: number; // wall-clock seconds (same epoch as submitted_at)
  kind: string;
  stage?: number;
  [key: string]: unknown;
}

export interface QueryStatus {
  query: string;
  sql: string;
  state: "running" | "finished" | "failed" | "canceled";
  error: string | null;
  submitted_at: number;
  elapsed: number;
  latency_constraint: number | null;
  progress: number | null;
  schema: [string, string][];
  result_rows: number | null;
  bottleneck: [number, string][];
  stages: Record<string, StageStatus>;
  events: TuningEvent[];
}

export interface QuerySummary {
  query: string;
  state: string;
  sql: string;
  elapsed: number;
}

export interface PlanNode {
  node: string;
  table?: string;
  source_stage?: number;
  partitioning?: string;
  broadcast?: boolean;
  children?: PlanNode[];
}

export interface PlanStage {
  id: number;
  inputs: number[];
  output_partitioning: string | null;
  elasticity: string;
  cache_pages: boolean;
  plan: PlanNode;
}

export interface PlanDoc {
  root: number;
  stages: PlanStage[];
  schema: [string, string][];
}

export interface WhatIfResult {
  stage: number;
  n1: number;
  n2: number;
  t_build: number;
  t_remain: number;
  n_f: number;
  n_f_max: number;
  t_predicted: number;
  dop_time_list: Record<string, number>;
}

export interface TuneCommand {
  op: string;
  stage?: number;
  target?: number;
  seconds?: number;
  enable?: boolean;
  constraint?: number | null;
}
