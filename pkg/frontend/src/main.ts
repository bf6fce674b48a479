/** Application wiring: SQL submit form, query-card list, and one
 * controller view for the currently opened query. */

import { Api } from "./api.js";
import type { Actions } from "./components.js";
import {
  renderQueryCard,
  renderStagePanel,
  renderTunerBox,
  renderWhatIfTable,
} from "./components.js";
import { h } from "./format.js";
import { renderPlanGraph } from "./plangraph.js";
import { PollLoop } from "./poll.js";
import type { PlanDoc, WhatIfResult } from "./types.js";

export function startApp(root: HTMLElement, api = new Api("")): PollLoop {
  const banner = h("div", { class: "stale-banner hidden" },
    "coordinator unreachable — showing stale data");
  const toast = h("div", { class: "toast hidden" });
  const sqlInput = h("textarea", {
    class: "sql-input",
    placeholder: "SELECT …",
    rows: "3",
  }) as HTMLTextAreaElement;
  const cards = h("div", { class: "query-list" });
  const controller = h("div", { class: "controller hidden" });

  let openQuery: string | null = null;
  let plan: PlanDoc | null = null;
  let lastWhatIf: WhatIfResult | null = null;

  const notify = (text: string, isError = false) => {
    toast.textContent = text;
    toast.className = `toast ${isError ? "toast-error" : ""}`;
    setTimeout(() => toast.classList.add("hidden"), 4000);
  };

  const actions: Actions = {
    api,
    onChanged: () => void loop.step(),
    notify,
  };

  const openController = async (qid: string) => {
    openQuery = qid;
    plan = null;
    lastWhatIf = null;
    try {
      plan = await api.plan(qid);
    } catch {
      // plan is static; retried on the next open
    }
    await loop.step();
  };

  const refresh = async () => {
    const { queries } = await api.listQueries();
    const statuses = await Promise.all(
      queries.map((q) => api.status(q.query, true)),
    );
    cards.replaceChildren(
      ...statuses.map((s) => renderQueryCard(s, openController)),
    );
    controller.classList.toggle("hidden", openQuery == null);
    if (openQuery != null) {
      const status = statuses.find((s) => s.query === openQuery);
      if (!status) return;
      const panels = Object.entries(status.stages).map(([sid, st]) =>
        renderStagePanel(status, Number(sid), st, actions),
      );
      controller.replaceChildren(
        h("h2", {}, `controller · ${openQuery}`),
        plan ? renderPlanGraph(plan) : h("div", {}, "loading plan…"),
        h("div", { class: "stage-panels" }, ...panels),
        renderTunerBox(status, actions, (result) => {
          lastWhatIf = result;
          void loop.step();
        }),
        ...(lastWhatIf ? [renderWhatIfTable(lastWhatIf)] : []),
      );
    }
  };

  const loop = new PollLoop(refresh, (stale) =>
    banner.classList.toggle("hidden", !stale),
  );

  const submit = h(
    "button",
    {
      class: "submit-btn",
      onclick: async () => {
        const sql = sqlInput.value.trim();
        if (!sql) return;
        try {
          const { query } = await api.submit(sql);
          notify(`submitted ${query}`);
          sqlInput.value = "";
          await loop.step();
        } catch (err) {
          notify(`${err}`, true);
        }
      },
    },
    "run",
  );

  root.replaceChildren(
    banner,
    toast,
    h("h1", {}, "elastiq console"),
    h("div", { class: "submit-row" }, sqlInput, submit),
    cards,
    controller,
  );
  loop.start();
  return loop;
}

declare global {
  interface Window {
    __elastiqStarted?: boolean;
  }
}

if (typeof document !== "undefined" && document.getElementById("app") &&
    !window.__elastiqStarted) {
  window.__elastiqStarted = true;
  startApp(document.getElementById("app") as HTMLElement);
}
