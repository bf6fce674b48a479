/** View components: query cards (main interface) and the per-stage
 * controller panels with DOP knobs, what-if table and auto-tuner box.
 *
 * All components are pure render functions over API JSON; the page is
 * reconstructed from coordinator endpoints alone on every poll, so a
 * reload loses nothing.
 */

import type { Api } from "./api.js";
import { ApiError } from "./api.js";
import { fmtRate, fmtSeconds, h, progressPercent } from "./format.js";
import { stageMarkers } from "./markers.js";
import { sparkline } from "./sparkline.js";
import type { QueryStatus, StageStatus, WhatIfResult } from "./types.js";

export interface Actions {
  api: Api;
  onChanged(): void; // request an immediate re-poll after a mutation
  notify(text: string, isError?: boolean): void;
}

// -- main interface: query card ---------------------------------------------

export function renderQueryCard(
  status: QueryStatus,
  onOpen: (qid: string) => void,
): HTMLElement {
  const scans = Object.entries(status.stages).filter(
    ([, st]) => st.kind === "scan",
  );
  const card = h(
    "div",
    { class: `query-card state-${status.state}`, "data-query": status.query },
    h(
      "div",
      { class: "card-head" },
      h("span", { class: "qid" }, status.query),
      h("span", { class: `badge badge-${status.state}` }, status.state),
      h("span", { class: "elapsed" }, fmtSeconds(status.elapsed)),
    ),
    h("pre", { class: "sql" }, status.sql.trim()),
  );
  for (const [sid, st] of scans) {
    const pct = progressPercent(st.scan?.progress);
    card.append(
      h(
        "div",
        { class: "scan-progress", "data-stage": sid },
        h("span", { class: "scan-label" }, `S${sid}`),
        h(
          "div",
          { class: "bar" },
          h("div", {
            class: "bar-fill",
            style: `width:${pct.toFixed(1)}%`,
          }),
        ),
        h("span", { class: "pct" }, `${pct.toFixed(0)}%`),
      ),
    );
  }
  card.append(
    h(
      "button",
      { class: "open-controller", onclick: () => onOpen(status.query) },
      "controller",
    ),
  );
  return card;
}

// -- controller interface: stage panels --------------------------------------

function tuneButton(
  label: string,
  title: string,
  disabled: boolean,
  run: () => Promise<unknown>,
  actions: Actions,
): HTMLElement {
  return h(
    "button",
    {
      class: "knob",
      title,
      disabled,
      onclick: async () => {
        try {
          await run();
          actions.onChanged();
        } catch (err) {
          // filter rejections surface their reason inline
          const msg =
            err instanceof ApiError ? `${err.kind}: ${err.message}` : `${err}`;
          actions.notify(msg, true);
        }
      },
    },
    label,
  );
}

export function renderStagePanel(
  status: QueryStatus,
  sid: number,
  st: StageStatus,
  actions: Actions,
): HTMLElement {
  const running = status.state === "running";
  const fixed = st.elasticity === "fixed-one";
  const frozen = !running || fixed;
  const qid = status.query;
  const bottleneck = status.bottleneck.some(([s]) => s === sid);

  const stageOp = st.kind === "partitioned-join" ? "dop_switch" : "stage_dop";
  const stageTune = (target: number) =>
    actions.api.tune(qid, { op: stageOp, stage: sid, target });
  const taskTune = (target: number) =>
    actions.api.tune(qid, { op: "task_dop", stage: sid, target });

  const markers = stageMarkers(status.events, status.submitted_at, sid);
  const panel = h(
    "div",
    { class: "stage-panel", "data-stage": String(sid) },
    h(
      "div",
      { class: "stage-head" },
      h("span", { class: "stage-name" }, `S${sid} · ${st.kind}`),
      fixed ? h("span", { class: "badge badge-fixed" }, "fixed") : null,
      bottleneck
        ? h("span", { class: "badge badge-bottleneck" }, "bottleneck")
        : null,
    ),
    sparkline(st.series ?? [], markers),
    h(
      "div",
      { class: "stage-stats" },
      h("span", {}, fmtRate(st.throughput)),
      h("span", { class: "t-remain" }, `remain ${fmtSeconds(st.t_remain)}`),
      st.t_build != null
        ? h("span", {}, `build ${fmtSeconds(st.t_build)}`)
        : null,
    ),
    h(
      "div",
      { class: "knobs" },
      h("span", { class: "knob-label" }, `stage DOP ${st.dop}`),
      tuneButton("−", "remove one task", frozen || st.dop <= 1,
        () => stageTune(st.dop - 1), actions),
      tuneButton("+", "add one task", frozen,
        () => stageTune(st.dop + 1), actions),
      h("span", { class: "knob-label" }, `task DOP ${st.task_dop}`),
      tuneButton("−", "fewer drivers per task", frozen || st.task_dop <= 1,
        () => taskTune(st.task_dop - 1), actions),
      tuneButton("+", "more drivers per task", frozen,
        () => taskTune(st.task_dop + 1), actions),
    ),
  );
  return panel;
}

// -- what-if table -----------------------------------------------------------

export function renderWhatIfTable(result: WhatIfResult): HTMLElement {
  // exact values from the /whatif JSON, not humanized durations
  const secs = (s: number) => `${s.toFixed(2)}s`;
  const rows = Object.entries(result.dop_time_list).sort(
    (a, b) => Number(a[0]) - Number(b[0]),
  );
  const table = h(
    "table",
    { class: "whatif-table" },
    h(
      "thead",
      {},
      h("tr", {}, h("th", {}, "DOP"), h("th", {}, "predicted time")),
    ),
  );
  const body = h("tbody", {});
  for (const [dop, seconds] of rows) {
    body.append(
      h(
        "tr",
        Number(dop) === result.n2 ? { class: "selected" } : {},
        h("td", {}, dop),
        h("td", {}, secs(seconds)),
      ),
    );
  }
  table.append(body);
  const summary = h(
    "div",
    { class: "whatif-summary" },
    `S${result.stage}: ${result.n1}→${result.n2} ways, ` +
      `T_remain ${secs(result.t_remain)}, ` +
      `T_build ${secs(result.t_build)}, ` +
      `predicted ${secs(result.t_predicted)}`,
  );
  return h("div", { class: "whatif" }, summary, table);
}

// -- auto-tuner box ----------------------------------------------------------

export function renderTunerBox(
  status: QueryStatus,
  actions: Actions,
  showWhatIf: (result: WhatIfResult) => void,
): HTMLElement {
  const qid = status.query;
  const running = status.state === "running";
  const constraintInput = h("input", {
    class: "constraint-input",
    type: "number",
    step: "0.1",
    placeholder: "seconds",
  }) as HTMLInputElement;
  if (status.latency_constraint != null) {
    constraintInput.value = String(status.latency_constraint);
  }

  const stageInput = h("input", {
    class: "whatif-stage",
    type: "number",
    placeholder: "stage",
  }) as HTMLInputElement;
  const dopInput = h("input", {
    class: "whatif-dop",
    type: "number",
    placeholder: "dop",
  }) as HTMLInputElement;

  const monitorOn = status.events.some(
    (ev) => ev.kind === "monitor" && ev.enable !== false,
  );

  return h(
    "div",
    { class: "tuner-box" },
    h("h3", {}, "auto-tuner"),
    h(
      "div",
      { class: "tuner-row" },
      h("label", {}, "constraint"),
      constraintInput,
      tuneButton("set", "set latency constraint", !running, () =>
        actions.api.tune(qid, {
          op: "constraint",
          seconds: Number(constraintInput.value),
        }), actions),
      tuneButton("one-time", "plan once against the constraint", !running,
        () => actions.api.tune(qid, {
          op: "one_time",
          constraint: Number(constraintInput.value),
        }), actions),
      tuneButton(monitorOn ? "monitor off" : "monitor on",
        "toggle the monitor loop", !running,
        () => actions.api.tune(qid, {
          op: "monitor",
          enable: !monitorOn,
          constraint: constraintInput.value
            ? Number(constraintInput.value)
            : null,
        }), actions),
    ),
    h(
      "div",
      { class: "tuner-row" },
      h("label", {}, "what-if"),
      stageInput,
      dopInput,
      h(
        "button",
        {
          class: "whatif-go",
          disabled: !running,
          onclick: async () => {
            try {
              showWhatIf(
                await actions.api.whatif(
                  qid,
                  Number(stageInput.value),
                  Number(dopInput.value),
                ),
              );
            } catch (err) {
              const msg =
                err instanceof ApiError
                  ? `${err.kind}: ${err.message}`
                  : `${err}`;
              actions.notify(msg, true);
            }
          },
        },
        "predict",
      ),
    ),
  );
}
