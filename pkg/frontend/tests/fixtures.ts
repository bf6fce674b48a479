/** Shared API-JSON fixtures mirroring real coordinator responses. */

import type {
  PlanDoc,
  QueryStatus,
  StageStatus,
  WhatIfResult,
} from "../src/types.js";

export function scanStage(over: Partial<StageStatus> = {}): StageStatus {
  return {
    kind: "scan",
    dop: 1,
    building: 0,
    task_dop: 2,
    tasks: ["q1.1.0"],
    elasticity: "elastic",
    rows_total: 12000,
    throughput: 4000,
    t_build: null,
    scan: {
      bytes_total: 100000,
      bytes_pending: 58000,
      bytes_claimed: 42000,
      progress: 0.42,
      rows_scanned: 12000,
    },
    r_consume: 8000,
    states: { "q1.1.0": "running" },
    t_remain: 7.25,
    series: [
      [0.5, 0],
      [1.5, 3800],
      [2.5, 4100],
    ],
    ...over,
  };
}

export function queryStatus(over: Partial<QueryStatus> = {}): QueryStatus {
  return {
    query: "q1",
    sql: "SELECT sum(l_quantity) FROM lineitem",
    state: "running",
    error: null,
    submitted_at: 1000.0,
    elapsed: 2.5,
    latency_constraint: null,
    progress: 0.42,
    schema: [["sum", "DOUBLE"]],
    result_rows: null,
    bottleneck: [],
    stages: {
      "0": scanStage({
        kind: "exchange",
        elasticity: "fixed-one",
        scan: null,
        tasks: ["q1.0.0"],
        states: { "q1.0.0": "running" },
      }),
      "1": scanStage(),
    },
    events: [],
    ...over,
  };
}

export const whatIfResult: WhatIfResult = {
  stage: 1,
  n1: 2,
  n2: 8,
  t_build: 2.4,
  t_remain: 49.68,
  n_f: 4.0,
  n_f_max: 4.0,
  t_predicted: 14.22,
  dop_time_list: { "1": 99.36, "2": 49.68, "4": 26.04, "8": 14.22 },
};

export const planDoc: PlanDoc = {
  root: 0,
  stages: [
    {
      id: 0,
      inputs: [1],
      output_partitioning: null,
      elasticity: "fixed-one",
      cache_pages: false,
      plan: {
        node: "PartialAgg",
        children: [{ node: "ExchangeSource", source_stage: 1 }],
      },
    },
    {
      id: 1,
      inputs: [],
      output_partitioning: "gather",
      elasticity: "elastic",
      cache_pages: false,
      plan: { node: "TableScan", table: "lineitem" },
    },
  ],
  schema: [["sum", "DOUBLE"]],
};

export function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}
