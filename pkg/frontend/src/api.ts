/** Typed client for the mission runner API with offline command queueing.
 *
 * Commands are optimistic: a network failure parks the command in a
 * retry queue (surfaced to the UI as a warning) and flushes it when the
 * link returns. An HTTP 409 is a real rejection (illegal transition)
 * and is never retried.
 */

import type {
  ArtifactEntry,
  Command,
  MapView,
  MissionState,
  ScoringLine,
} from "./types.js";

export class IllegalTransitionError extends Error {}

export interface QueuedCommand extends Command {
  queuedAt: number;
}

export class BasestationClient {
  readonly base: string;
  /** Commands waiting for the link to come back. */
  readonly pending: QueuedCommand[] = [];
  onQueueChange: (pending: QueuedCommand[]) => void = () => {};

  constructor(base: string) {
    this.base = base.replace(/\/$/, "");
  }

  private async getJson<T>(path: string): Promise<T> {
    const res = await fetch(this.base + path);
    if (!res.ok) throw new Error(`${path}: HTTP ${res.status}`);
    return (await res.json()) as T;
  }

  state(): Promise<MissionState> {
    return this.getJson("/api/state");
  }

  artifacts(): Promise<ArtifactEntry[]> {
    return this.getJson("/api/artifacts");
  }

  scoring(): Promise<ScoringLine[]> {
    return this.getJson("/api/scoring");
  }

  map(): Promise<MapView> {
    return this.getJson("/api/map");
  }

  /** Send one command; on network failure queue it for later delivery. */
  async command(cmd: Command): Promise<"ok" | "queued"> {
    try {
      await this.post("/api/command", cmd);
      return "ok";
    } catch (err) {
      if (err instanceof IllegalTransitionError) throw err;
      this.pending.push({ ...cmd, queuedAt: Date.now() });
      this.onQueueChange(this.pending);
      return "queued";
    }
  }

  /** Try to deliver queued commands in order; stop at the first network
   * failure so ordering is preserved. Illegal transitions are dropped
   * (the mission moved on while we were offline). */
  async flush(): Promise<number> {
    let delivered = 0;
    while (this.pending.length > 0) {
      const cmd = this.pending[0];
      try {
        await this.post("/api/command", cmd);
        delivered += 1;
      } catch (err) {
        if (!(err instanceof IllegalTransitionError)) break;
      }
      this.pending.shift();
    }
    if (delivered > 0) this.onQueueChange(this.pending);
    return delivered;
  }

  async review(hash: string, verdict: "approved" | "rejected"): Promise<void> {
    await this.post("/api/review", { hash, verdict });
  }

  private async post(path: string, body: unknown): Promise<unknown> {
    const res = await fetch(this.base + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (res.status === 409) {
      throw new IllegalTransitionError(await res.text());
    }
    if (!res.ok) throw new Error(`${path}: HTTP ${res.status}`);
    return res.json();
  }
}
