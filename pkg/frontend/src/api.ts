/** Thin typed client over the coordinator HTTP API.
 *
 * The fetch function is injectable so tests can count and fake requests;
 * every tuning knob in the UI funnels through `tune`, which performs
 * exactly one POST per call.
 */

import type {
  PlanDoc,
  QueryStatus,
  QuerySummary,
  TuneCommand,
  WhatIfResult,
} from "./types.js";

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly kind: string,
    message: string,
  ) {
    super(message);
  }
}

export class Api {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async check<T>(resp: Response): Promise<T> {
    const body = await resp.json();
    if (resp.status >= 400) {
      throw new ApiError(
        resp.status,
        body.error ?? "Error",
        body.message ?? resp.statusText,
      );
    }
    return body as T;
  }

  private get<T>(path: string): Promise<T> {
    return this.fetchFn(this.base + path).then((r) => this.check<T>(r));
  }

  private post<T>(path: string, body: unknown): Promise<T> {
    return this.fetchFn(this.base + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    }).then((r) => this.check<T>(r));
  }

  listQueries(): Promise<{ queries: QuerySummary[] }> {
    return this.get("/v1/query");
  }

  status(qid: string, series = false): Promise<QueryStatus> {
    return this.get(`/v1/query/${qid}${series ? "?series=1" : ""}`);
  }

  plan(qid: string): Promise<PlanDoc> {
    return this.get(`/v1/query/${qid}/plan`);
  }

  submit(
    sql: string,
    options: Record<string, unknown> = {},
  ): Promise<{ query: string }> {
    return this.post("/v1/query", { sql, options });
  }

  tune(qid: string, command: TuneCommand): Promise<unknown> {
    return this.post(`/v1/query/${qid}/tune`, command);
  }

  whatif(qid: string, stage: number, target: number): Promise<WhatIfResult> {
    return this.post(`/v1/query/${qid}/whatif`, { stage, target });
  }

  cancel(qid: string): Promise<unknown> {
    return this.fetchFn(`${this.base}/v1/query/${qid}`, {
      method: "DELETE",
    }).then((r) => this.check(r));
  }
}
