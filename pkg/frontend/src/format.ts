/** Small DOM and formatting helpers (no framework). */

export function h(
  tag: string,
  attrs: Record<string, string | boolean | ((ev: Event) => void)> = {},
  ...children: (Node | string | null)[]
): HTMLElement {
  const el = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (typeof value === "function") {
      el.addEventListener(key.replace(/^on/, ""), value);
    } else if (typeof value === "boolean") {
      if (value) el.setAttribute(key, "");
      // reflect as property too: `disabled` via setAttribute is enough
      if (key === "disabled") (el as HTMLButtonElement).disabled = value;
    } else {
      el.setAttribute(key, value);
    }
  }
  for (const child of children) {
    if (child == null) continue;
    el.append(child);
  }
  return el;
}

export function fmtSeconds(s: number | null | undefined): string {
  if (s == null || !isFinite(s)) return "–";
  if (s >= 60) return `${Math.floor(s / 60)}m${Math.round(s % 60)}s`;
  return `${s.toFixed(s < 10 ? 2 : 1)}s`;
}

export function fmtRate(rowsPerSec: number | null | undefined): string {
  if (rowsPerSec == null || !isFinite(rowsPerSec)) return "–";
  if (rowsPerSec >= 1e6) return `${(rowsPerSec / 1e6).toFixed(2)}M rows/s`;
  if (rowsPerSec >= 1e3) return `${(rowsPerSec / 1e3).toFixed(1)}k rows/s`;
  return `${rowsPerSec.toFixed(0)} rows/s`;
}

export function progressPercent(fraction: number | null | undefined): number {
  if (fraction == null || !isFinite(fraction)) return 0;
  return Math.max(0, Math.min(100, fraction * 100));
}
