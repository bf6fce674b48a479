/** Layered stage-graph rendering.
 *
 * Stages are laid out by depth in the stage tree (root on top); an edge
 * from a stage to its input is the exchange that connects them, labeled
 * with the input's output partitioning.
 */

import type { PlanDoc, PlanStage } from "./types.js";

export interface GraphLayout {
  layers: PlanStage[][]; // layers[0] = root
  edges: { from: number; to: number; label: string }[];
}

export function layoutPlan(doc: PlanDoc): GraphLayout {
  const byId = new Map(doc.stages.map((s) => [s.id, s]));
  const depth = new Map<number, number>();
  const walk = (id: number, d: number) => {
    depth.set(id, Math.max(d, depth.get(id) ?? 0));
    for (const input of byId.get(id)?.inputs ?? []) walk(input, d + 1);
  };
  walk(doc.root, 0);

  const maxDepth = Math.max(0, ...depth.values());
  const layers: PlanStage[][] = Array.from(
    { length: maxDepth + 1 },
    () => [],
  );
  for (const stage of doc.stages) {
    layers[depth.get(stage.id) ?? 0].push(stage);
  }
  for (const layer of layers) layer.sort((a, b) => a.id - b.id);

  const edges = doc.stages.flatMap((stage) =>
    stage.inputs.map((input) => ({
      from: input,
      to: stage.id,
      label: byId.get(input)?.output_partitioning ?? "gather",
    })),
  );
  return { layers, edges };
}

export function renderPlanGraph(doc: PlanDoc): HTMLElement {
  const { layers, edges } = layoutPlan(doc);
  const box = document.createElement("div");
  box.className = "plan-graph";
  for (const layer of layers) {
    const row = document.createElement("div");
    row.className = "plan-layer";
    for (const stage of layer) {
      const node = document.createElement("div");
      node.className = "plan-node";
      node.dataset.stage = String(stage.id);
      node.textContent = `S${stage.id} ${describe(stage)}`;
      if (stage.elasticity === "fixed-one") node.classList.add("fixed-one");
      row.append(node);
    }
    box.append(row);
  }
  const legend = document.createElement("div");
  legend.className = "plan-edges";
  legend.textContent = edges
    .map((e) => `S${e.from} ─${e.label}→ S${e.to}`)
    .join("   ");
  box.append(legend);
  return box;
}

function describe(stage: PlanStage): string {
  const ops: string[] = [];
  const walk = (node: PlanDoc["stages"][0]["plan"]) => {
    if (node.node === "TableScan") ops.push(`scan ${node.table}`);
    else if (node.node === "HashJoin")
      ops.push(node.broadcast ? "bcast-join" : "join");
    else if (node.node === "PartialAgg") ops.push("agg");
    else if (node.node === "PSort") ops.push("sort");
    for (const child of node.children ?? []) walk(child);
  };
  walk(stage.plan);
  return ops.join(" · ") || stage.plan.node;
}
