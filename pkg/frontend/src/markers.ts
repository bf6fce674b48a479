/** Derive sparkline markers from the coordinator's per-query event log.
 *
 * Tuning requests become "request" markers; a DOP switch additionally
 * produces a "build-complete" marker at the moment its hash-table build
 * finished (the switch event is logged at completion, so the request
 * marker is backdated by the switch's total duration).
 */

import type { TuningEvent } from "./types.js";

export interface Marker {
  t: number; // seconds since query start
  kind: "request" | "build-complete";
  label: string;
}

const REQUEST_KINDS = new Set([
  "task_dop",
  "add_task",
  "remove_task",
  "auto_tune",
]);

export function stageMarkers(
  events: TuningEvent[],
  submittedAt: number,
  stageId: number,
): Marker[] {
  const markers: Marker[] = [];
  for (const ev of events) {
    if (ev.stage !== stageId) continue;
    const at = ev.ts - submittedAt;
    if (ev.kind === "dop_switch") {
      const total = Number(ev.total_seconds ?? 0);
      const build = Number(ev.build_seconds ?? 0);
      markers.push({
        t: at - total,
        kind: "request",
        label: `switch ${ev.from_dop}→${ev.to_dop}`,
      });
      markers.push({
        t: at - total + build,
        kind: "build-complete",
        label: `build ${build.toFixed(2)}s`,
      });
    } else if (REQUEST_KINDS.has(ev.kind)) {
      markers.push({ t: at, kind: "request", label: ev.kind });
    }
  }
  return markers.sort((a, b) => a.t - b.t);
}
