/** Operator console: status board, map silhouette, artifact review,
 * and mission commands. Renders into #app; polls the API on timers.
 */

import { BasestationClient } from "./api.js";
import type { ArtifactEntry, MapView, MissionState } from "./types.js";

const client = new BasestationClient("");

const app = document.getElementById("app")!;
app.innerHTML = `
  <header><h1>basestation</h1><span id="clock"></span>
    <span id="queue-warning" class="warn" hidden></span></header>
  <main>
    <section id="left">
      <canvas id="map" width="640" height="640"></canvas>
    </section>
    <section id="right">
      <div id="robots"></div>
      <div id="commands">
        <label>robot <input id="cmd-robot" type="number" value="0" min="0"></label>
        <button data-cmd="estop">ESTOP</button>
        <button data-cmd="release">release</button>
        <button data-cmd="stop">stop</button>
        <button data-cmd="return_now">return</button>
        <label>time limit <input id="time-limit" type="number" value="300"></label>
        <button id="set-time">set</button>
        <label>turns <input id="turns" placeholder="LEFT,RIGHT"></label>
        <button id="set-turns">set turns</button>
        <button id="start">start</button>
        <div id="cmd-error" class="warn"></div>
      </div>
      <h2>artifact review</h2>
      <div id="artifacts"></div>
      <h2>scoring export</h2>
      <pre id="scoring"></pre>
    </section>
  </main>`;

const $ = <T extends HTMLElement>(id: string) =>
  document.getElementById(id) as T;

function robotIndex(): number {
  return parseInt($<HTMLInputElement>("cmd-robot").value || "0", 10);
}

async function send(command: string, value?: unknown): Promise<void> {
  $("cmd-error").textContent = "";
  try {
    const out = await client.command({ robot: robotIndex(), command, value });
    if (out === "queued") showQueueWarning();
  } catch (err) {
    $("cmd-error").textContent = String(err); // illegal transition, inline
  }
}

function showQueueWarning(): void {
  const el = $("queue-warning");
  el.hidden = client.pending.length === 0;
  el.textContent = client.pending.length
    ? `${client.pending.length} command(s) queued — robot out of comms`
    : "";
}
client.onQueueChange = showQueueWarning;

for (const btn of app.querySelectorAll<HTMLButtonElement>("[data-cmd]")) {
  btn.addEventListener("click", () => void send(btn.dataset.cmd!));
}
$("set-time").addEventListener("click", () =>
  void send("set_time_limit", parseFloat($<HTMLInputElement>("time-limit").value)));
$("set-turns").addEventListener("click", () =>
  void send("set_turns",
    $<HTMLInputElement>("turns").value.split(",").map((s) => s.trim()).filter(Boolean)));
$("start").addEventListener("click", () => void send("start_explore"));

function renderState(s: MissionState): void {
  $("clock").textContent = `t=${s.t.toFixed(1)}s  msgs=${s.base_messages}` +
    (s.finished ? `  finished (exit ${s.exit_code})` : "");
  $("robots").innerHTML = s.robots.map((r) => `
    <div class="robot mode-${r.mode}">
      <b>robot ${r.index}</b> ${r.mode}
      pose (${r.pose[0].toFixed(1)}, ${r.pose[1].toFixed(1)})
      path ${r.path_length.toFixed(1)} m
      limit ${r.elapsed.toFixed(0)}/${r.time_limit.toFixed(0)} s
      turns [${r.turn_queue.join(", ")}]
    </div>`).join("");
}

function renderArtifacts(entries: ArtifactEntry[]): void {
  $("artifacts").innerHTML = entries.map((e) => `
    <div class="artifact v-${e.verdict}" data-hash="${e.hash}">
      <b>${e.class}</b> conf ${e.confidence.toFixed(2)}
      ${e.outlier ? "(outlier)" : ""} robot ${e.robot}
      at ${e.position ? `(${e.position[0]}, ${e.position[1]})` : "?"}
      — ${e.verdict}
      <button data-v="approved">approve</button>
      <button data-v="rejected">reject</button>
    </div>`).join("");
  for (const btn of $("artifacts").querySelectorAll<HTMLButtonElement>("button")) {
    btn.addEventListener("click", async () => {
      const hash = (btn.parentElement as HTMLElement).dataset.hash!;
      await client.review(hash, btn.dataset.v as "approved" | "rejected");
      await refreshArtifacts();
    });
  }
}

function renderMap(view: MapView): void {
  const canvas = $<HTMLCanvasElement>("map");
  const ctx = canvas.getContext("2d")!;
  ctx.fillStyle = "#14141a";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  const pts = view.points;
  if (pts.length === 0) return;
  let minX = Infinity, minY = Infinity, maxX = -Infinity, maxY = -Infinity;
  for (const [x, y] of pts) {
    minX = Math.min(minX, x); maxX = Math.max(maxX, x);
    minY = Math.min(minY, y); maxY = Math.max(maxY, y);
  }
  const pad = 5;
  const sc = Math.min(canvas.width / (maxX - minX + 2 * pad),
                      canvas.height / (maxY - minY + 2 * pad));
  const px = (x: number, y: number): [number, number] =>
    [(x - minX + pad) * sc, canvas.height - (y - minY + pad) * sc];
  ctx.fillStyle = "#7890a8";
  for (const [x, y] of pts) {
    const [cx, cy] = px(x, y);
    ctx.fillRect(cx, cy, 1.5, 1.5);
  }
  ctx.fillStyle = "#ffb050";
  for (const g of Object.values(view.graphs)) {
    for (const [x, y] of Object.values(g.nodes)) {
      const [cx, cy] = px(x, y);
      ctx.beginPath();
      ctx.arc(cx, cy, 3, 0, 2 * Math.PI);
      ctx.fill();
    }
  }
}

async function refreshArtifacts(): Promise<void> {
  renderArtifacts(await client.artifacts());
  $("scoring").textContent = JSON.stringify(await client.scoring(), null, 1);
}

async function tick(): Promise<void> {
  try {
    renderState(await client.state());
    if (client.pending.length > 0) await client.flush();
    showQueueWarning();
  } catch {
    showQueueWarning(); // offline; state poll will recover
  }
}

setInterval(() => void tick(), 1000);
setInterval(() => void refreshArtifacts().catch(() => {}), 3000);
setInterval(async () => {
  try { renderMap(await client.map()); } catch { /* offline */ }
}, 5000);
void tick();
void refreshArtifacts().catch(() => {});
