/** 1 s poll loop with exponential backoff on connection loss.
 *
 * While the coordinator is unreachable the last rendered state stays on
 * screen behind a "stale" banner; polling retries with backoff capped
 * at 10 s and snaps back to the base period on the first success.
 */

export const POLL_PERIOD_MS = 1000;
export const MAX_BACKOFF_MS = 10_000;

export class PollLoop {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private delay = POLL_PERIOD_MS;
  stale = false;

  constructor(
    private readonly tick: () => Promise<void>,
    private readonly onStaleChange: (stale: boolean) => void = () => {},
    private readonly basePeriod = POLL_PERIOD_MS,
  ) {
    this.delay = basePeriod;
  }

  start(): void {
    if (this.timer == null) void this.step();
  }

  stop(): void {
    if (this.timer != null) clearTimeout(this.timer);
    this.timer = null;
  }

  /** Run one poll immediately (after a knob press, say). */
  async step(): Promise<void> {
    if (this.timer != null) clearTimeout(this.timer);
    try {
      await this.tick();
      this.delay = this.basePeriod;
      this.setStale(false);
    } catch {
      this.delay = Math.min(this.delay * 2, MAX_BACKOFF_MS);
      this.setStale(true);
    }
    this.timer = setTimeout(() => void this.step(), this.delay);
  }

  private setStale(stale: boolean): void {
    if (stale !== this.stale) {
      this.stale = stale;
      this.onStaleChange(stale);
    }
  }
}
