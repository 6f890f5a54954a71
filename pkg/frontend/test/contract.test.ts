/** Headless operator-loop contract test against the live mission API.
 *
 * Drives the full loop end to end: wait for EXPLORE, change the time
 * limit mid-mission, approve one real artifact, reject one false
 * positive, then ESTOP. Verifies the scoring export contains exactly
 * the approved report and that every command landed in the mission log.
 */

import { spawn, type ChildProcess } from "node:child_process";
import { readFileSync, mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, dirname } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { BasestationClient, IllegalTransitionError } from "../src/api.js";
import type { ArtifactEntry } from "../src/types.js";

const here = dirname(fileURLToPath(import.meta.url));
const PORT = 8931;
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess;
let runDir: string;
const client = new BasestationClient(BASE);

async function waitFor<T>(
  fn: () => Promise<T | undefined>,
  what: string,
  timeoutMs = 120_000,
  pollMs = 500,
): Promise<T> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      const out = await fn();
      if (out !== undefined) return out;
    } catch {
      /* not up yet */
    }
    if (Date.now() > deadline) throw new Error(`timed out waiting for ${what}`);
    await new Promise((r) => setTimeout(r, pollMs));
  }
}

beforeAll(async () => {
  runDir = mkdtempSync(join(tmpdir(), "contract-run-"));
  server = spawn(
    "python3",
    [join(here, "serve.py"), join(here, "scenario.yaml"), runDir, String(PORT)],
    { stdio: ["ignore", "inherit", "inherit"] },
  );
  await waitFor(async () => {
    const s = await client.state();
    return s.robots.length > 0 ? s : undefined;
  }, "server startup");
}, 150_000);

afterAll(() => {
  server?.kill("SIGKILL");
  rmSync(runDir, { recursive: true, force: true });
});

describe("operator loop", () => {
  let approved: ArtifactEntry;
  let rejected: ArtifactEntry;

  it("robot enters EXPLORE on its own", async () => {
    const s = await waitFor(async () => {
      const st = await client.state();
      return st.robots[0].mode === "EXPLORE" ? st : undefined;
    }, "EXPLORE mode");
    expect(s.robots[0].mode).toBe("EXPLORE");
  });

  it("changes the time limit mid-EXPLORE", async () => {
    const out = await client.command({
      robot: 0,
      command: "set_time_limit",
      value: 150,
    });
    expect(out).toBe("ok");
    const s = await client.state();
    expect(s.robots[0].time_limit).toBe(150);
  });

  it("rejects an illegal transition inline", async () => {
    // set_turns is only legal before the mission starts
    await expect(
      client.command({ robot: 0, command: "set_turns", value: ["LEFT"] }),
    ).rejects.toBeInstanceOf(IllegalTransitionError);
  });

  it("review queue fills with a real artifact and a false positive", async () => {
    const entries = await waitFor(async () => {
      const all = await client.artifacts();
      const real = all.find((e) => e.class === "backpack" && !e.outlier);
      const fp = all.find((e) => e.class !== "backpack" || e.outlier);
      return real && fp ? { real, fp } : undefined;
    }, "review queue entries");
    approved = entries.real;
    rejected = entries.fp;
    expect(approved.hash).not.toBe(rejected.hash);
  });

  it("approve and reject are idempotent and persist", async () => {
    await client.review(approved.hash, "approved");
    await client.review(approved.hash, "approved"); // idempotent
    await client.review(rejected.hash, "rejected");
    const all = await client.artifacts();
    expect(all.find((e) => e.hash === approved.hash)?.verdict).toBe("approved");
    expect(all.find((e) => e.hash === rejected.hash)?.verdict).toBe("rejected");
  });

  it("scoring export contains exactly the approved artifact", async () => {
    const lines = await client.scoring();
    const approvedNow = (await client.artifacts()).filter(
      (e) => e.verdict === "approved",
    );
    expect(lines.length).toBe(approvedNow.length);
    expect(lines.some((l) => l.class === "backpack")).toBe(true);
    expect(lines.every((l) => l.class === "backpack")).toBe(true);
  });

  it("ESTOP halts the mission and the run finishes", async () => {
    await client.command({ robot: 0, command: "estop" });
    const s = await waitFor(async () => {
      const st = await client.state();
      return st.robots[0].mode === "ESTOP" ? st : undefined;
    }, "ESTOP mode", 20_000);
    expect(s.robots[0].mode).toBe("ESTOP");
    const done = await waitFor(async () => {
      const st = await client.state();
      return st.finished ? st : undefined;
    }, "run finish", 30_000);
    expect(done.exit_code).toBe(3); // ended in emergency stop
  });

  it("all commands are reflected in the mission log", async () => {
    const log = readFileSync(join(runDir, "robot_0", "mission.log"), "utf8");
    expect(log).toMatch(/time_limit=150\.0/);
    expect(log).toMatch(/-> ESTOP/);
    expect(log).toMatch(/REJECTED set_turns/);
  });
});

describe("offline command queueing", () => {
  it("queues on network failure and flushes on reconnect", async () => {
    const offline = new BasestationClient("http://127.0.0.1:1"); // nothing there
    const out = await offline.command({ robot: 0, command: "stop" });
    expect(out).toBe("queued");
    expect(offline.pending.length).toBe(1);
    // "reconnect": point the same queue at the live server; the stop is
    // illegal post-ESTOP so the flush must drop it, not retry forever
    (offline as unknown as { base: string }).base = BASE;
    await offline.flush();
    expect(offline.pending.length).toBe(0);
  });
});
