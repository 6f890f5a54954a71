"""HTTP operator interface for a live mission.

The simulation advances on a background thread; every endpoint takes the
same lock, so operator commands are applied between control steps and
state reads are consistent. The basestation only sees what has reached
its replica store over the simulated radio links.
"""

from __future__ import annotations

import json
import math
import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import RedirectResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .artifacts import ArtifactReport
from .mapper import decode_keyframe
from .mission import IllegalTransition, handle_command
from .runner import MissionRunner, ScenarioConfig, _latest_graph


class CommandBody(BaseModel):
    robot: int = 0
    command: str
    value: object | None = None


class ReviewBody(BaseModel):
    hash: str
    verdict: str            # "approved" | "rejected"


class LiveMission:
    """Owns the runner, its worker thread, and the review ledger."""

    def __init__(self, scenario: ScenarioConfig, run_dir: str | Path):
        self.runner = MissionRunner(scenario, run_dir)
        self.lock = threading.Lock()
        self.reviews: dict[str, str] = {}        # message hash -> verdict
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    def start(self):
        self.runner._setup_loop()
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self):
        while not self._stop.is_set():
            with self.lock:
                if self.runner.step_once():
                    break

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=30.0)

    def join(self, timeout: float | None = None):
        if self._thread is not None:
            self._thread.join(timeout)

    # -- views over the basestation replica -------------------------------

    def review_queue(self) -> list:
        base = self.runner.base_store
        out = []
        for owner in sorted({m.owner for m in base.messages.values()}):
            latest: dict = {}
            for m in base.read(owner, "artifacts"):
                r = ArtifactReport.from_payload(m.payload)
                latest[r.key()] = (m, r)
            kf_poses = _latest_graph(base, owner)
            for m, r in latest.values():
                pos = None
                if r.keyframe_id in kf_poses:
                    p = r.world_position(kf_poses)
                    pos = [round(float(p[0]), 3), round(float(p[1]), 3)]
                out.append({
                    "hash": m.hash.hex(),
                    "robot": owner,
                    "class": r.cls,
                    "confidence": round(r.confidence, 4),
                    "position": pos,
                    "detections": r.supporting_count,
                    "outlier": r.outlier,
                    "timestamp": round(m.created_at, 3),
                    "verdict": self.reviews.get(m.hash.hex(), "pending"),
                })
        out.sort(key=lambda e: (e["timestamp"], e["hash"]))
        return out

    def scoring(self) -> list:
        approved = [e for e in self.review_queue()
                    if e["verdict"] == "approved"]
        lines = [{"class": e["class"], "position": e["position"],
                  "robot": e["robot"], "confidence": e["confidence"]}
                 for e in approved]
        out = self.runner.run_dir / "scoring.json"
        with open(out, "w") as f:
            json.dump(lines, f, sort_keys=True, indent=1)
        return lines

    def map_view(self, stride: int = 9) -> dict:
        base = self.runner.base_store
        robots = {}
        points = []
        for owner in sorted({m.owner for m in base.messages.values()}):
            graph_msgs = base.read(owner, "graph")
            if graph_msgs:
                robots[str(owner)] = json.loads(graph_msgs[-1].payload.decode())
            for m in base.read(owner, "keyframes"):
                kf = decode_keyframe(m.payload)
                pts, _ = kf.panorama.points()
                c, s = math.cos(kf.origin.theta), math.sin(kf.origin.theta)
                for p in pts[::stride]:
                    points.append([round(kf.origin.x + c * p[0] - s * p[1], 2),
                                   round(kf.origin.y + s * p[0] + c * p[1], 2)])
        return {"graphs": robots, "points": points}


def create_app(scenario: ScenarioConfig, run_dir: str | Path) -> FastAPI:
    live = LiveMission(scenario, run_dir)
    app = FastAPI(title="subterra basestation")
    app.state.live = live

    @app.on_event("startup")
    def _start():
        live.start()

    @app.on_event("shutdown")
    def _shutdown():
        live.stop()

    @app.get("/api/state")
    def state():
        with live.lock:
            r = live.runner
            robots = []
            for a in r.robots:
                est = a.mapper.pose
                robots.append({
                    "index": a.index,
                    "mode": a.mission.mode.value,
                    "pose": [round(est.x, 3), round(est.y, 3),
                             round(est.theta, 4)],
                    "path_length": round(a.state.path_length, 2),
                    "turn_queue": [t.value for t in a.mission.turn_queue],
                    "time_limit": a.mission.time_limit,
                    "elapsed": round(a.mission.elapsed, 2),
                })
            return {"t": round(r.t, 3), "finished": getattr(r, "finished", False),
                    "exit_code": r.exit_code,
                    "base_messages": len(r.base_store.messages),
                    "robots": robots}

    @app.post("/api/command")
    def command(body: CommandBody):
        with live.lock:
            r = live.runner
            if body.robot < 0 or body.robot >= len(r.robots):
                raise HTTPException(404, f"no robot {body.robot}")
            mission = r.robots[body.robot].mission
            try:
                handle_command(mission, body.command, body.value, now=r.t)
            except IllegalTransition as e:
                mission.log.append(f"{r.t:.3f} REJECTED {body.command}: {e}")
                raise HTTPException(409, str(e))
            return {"ok": True, "mode": mission.mode.value, "t": round(r.t, 3)}

    @app.get("/api/artifacts")
    def artifacts():
        with live.lock:
            return live.review_queue()

    @app.post("/api/review")
    def review(body: ReviewBody):
        if body.verdict not in ("approved", "rejected"):
            raise HTTPException(422, "verdict must be approved or rejected")
        with live.lock:
            known = {e["hash"] for e in live.review_queue()}
            if body.hash not in known:
                raise HTTPException(404, "unknown report hash")
            live.reviews[body.hash] = body.verdict
            return {"ok": True, "hash": body.hash, "verdict": body.verdict}

    @app.get("/api/scoring")
    def scoring():
        with live.lock:
            return live.scoring()

    @app.get("/api/map")
    def map_view():
        with live.lock:
            return live.map_view()

    ui_dir = Path(__file__).resolve().parents[2] / "frontend"
    if (ui_dir / "dist").exists():
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

        @app.get("/")
        def index():
            return RedirectResponse("/ui/")
    else:
        @app.get("/")
        def index():
            return {"see": "/api/state"}

    return app
