/** SVG throughput sparkline with event markers.
 *
 * Red dashed lines mark tuning requests, yellow dashed lines mark
 * hash-table build completion, so the gap between the two reads as the
 * state-transfer interval.
 */

import type { Marker } from "./markers.js";

const SVG_NS = "http://www.w3.org/2000/svg";

export function sparkline(
  series: [number, number][],
  markers: Marker[],
  width = 220,
  height = 48,
): SVGSVGElement {
  const svg = document.createElementNS(SVG_NS, "svg");
  svg.setAttribute("viewBox", `0 0 ${width} ${height}`);
  svg.setAttribute("width", String(width));
  svg.setAttribute("height", String(height));
  svg.setAttribute("class", "sparkline");

  const tMax = Math.max(
    1e-9,
    ...series.map(([t]) => t),
    ...markers.map((m) => m.t),
  );
  const vMax = Math.max(1e-9, ...series.map(([, v]) => v));
  const x = (t: number) => (t / tMax) * (width - 2) + 1;
  const y = (v: number) => height - 2 - (v / vMax) * (height - 4);

  if (series.length > 1) {
    const poly = document.createElementNS(SVG_NS, "polyline");
    poly.setAttribute(
      "points",
      series.map(([t, v]) => `${x(t).toFixed(1)},${y(v).toFixed(1)}`).join(" "),
    );
    poly.setAttribute("class", "spark-line");
    svg.append(poly);
  }

  for (const marker of markers) {
    if (marker.t < 0 || marker.t > tMax) continue;
    const line = document.createElementNS(SVG_NS, "line");
    const mx = x(marker.t).toFixed(1);
    line.setAttribute("x1", mx);
    line.setAttribute("x2", mx);
    line.setAttribute("y1", "0");
    line.setAttribute("y2", String(height));
    line.setAttribute("class", `marker marker-${marker.kind}`);
    const title = document.createElementNS(SVG_NS, "title");
    title.textContent = `${marker.label} @ ${marker.t.toFixed(1)}s`;
    line.append(title);
    svg.append(line);
  }
  return svg;
}
