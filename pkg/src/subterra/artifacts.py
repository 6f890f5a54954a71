"""Artifact sensing, clustering, and report publication.

The vision stage is a proxy sensor: artifacts inside the camera frustum
with line of sight are detected stochastically with configurable noise,
misclassification, and false-positive rates. Detections are stored
relative to the nearest keyframe so later pose-graph optimization
retroactively improves report positions; world coordinates are resolved
at read time from the current keyframe poses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2, angle_diff
from .world import ARTIFACT_CLASSES, MineWorld


@dataclass
class ArtifactParams:
    r_det: float = 8.0                      # detection range, meters
    fov: float = math.radians(90.0)         # full horizontal field of view
    p_det: float = 1.0                      # per-frame detection probability
    sigma_det: float = 0.0                  # position noise, meters
    p_mis: float = 0.0                      # misclassification probability
    lambda_fp: float = 0.0                  # false positives per frame
    d_cluster: float = 1.5                  # same-instance distance, meters
    window: float = 30.0                    # clustering time window, seconds


@dataclass
class Detection:
    cls: str
    offset: np.ndarray                      # (3,) meters in keyframe frame
    keyframe_id: int
    timestamp: float
    score: float


@dataclass
class ArtifactReport:
    cls: str
    keyframe_id: int
    offset: np.ndarray                      # (3,) keyframe-relative mean
    confidence: float
    supporting_count: int
    outlier: bool
    timestamp: float
    context_image: str = ""                 # descriptor for operator review

    def world_position(self, keyframe_poses: dict) -> np.ndarray:
        kf = keyframe_poses[self.keyframe_id]
        xy = kf.transform_point(self.offset[:2])
        return np.array([xy[0], xy[1], self.offset[2]])

    def key(self) -> tuple:
        """Stable cluster identity for deduplicated publication."""
        q = tuple(np.round(self.offset / 1.0).astype(int))
        return (self.cls, self.keyframe_id, q)

    def to_payload(self) -> bytes:
        return json.dumps({
            "class": self.cls,
            "keyframe_id": self.keyframe_id,
            "offset": [float(v) for v in self.offset],
            "confidence": self.confidence,
            "supporting_count": self.supporting_count,
            "outlier": self.outlier,
            "timestamp": self.timestamp,
            "context_image": self.context_image,
        }).encode()

    @staticmethod
    def from_payload(payload: bytes) -> "ArtifactReport":
        d = json.loads(payload.decode())
        return ArtifactReport(d["class"], d["keyframe_id"],
                              np.array(d["offset"]), d["confidence"],
                              d["supporting_count"], d["outlier"],
                              d["timestamp"], d.get("context_image", ""))


def _to_keyframe(kf_pose: Pose2, world_xyz: np.ndarray) -> np.ndarray:
    xy = kf_pose.inverse_transform_point(world_xyz[:2])
    return np.array([xy[0], xy[1], world_xyz[2]])


def sense_artifacts(world: MineWorld, pose: Pose2, keyframe_id: int,
                    keyframe_pose: Pose2, t: float, params: ArtifactParams,
                    rng: np.random.Generator) -> list:
    """One detector frame: visible artifacts plus modeled failure modes."""
    out = []
    for art in world.artifacts:
        if art.cls == "cellphone":
            continue                        # phones are heard, not seen
        dx = art.position[0] - pose.x
        dy = art.position[1] - pose.y
        dist = math.hypot(dx, dy)
        if dist > params.r_det:
            continue
        if abs(angle_diff(math.atan2(dy, dx), pose.theta)) > params.fov / 2:
            continue
        if not world.segment_in_free((pose.x, pose.y), art.position[:2]):
            continue
        if rng.random() > params.p_det:
            continue
        measured = art.position + rng.normal(0.0, params.sigma_det, 3)
        cls = art.cls
        if params.p_mis > 0 and rng.random() < params.p_mis:
            others = [c for c in ARTIFACT_CLASSES
                      if c not in (cls, "cellphone")]
            cls = others[int(rng.integers(len(others)))]
        score = max(0.1, 1.0 - dist / params.r_det)
        out.append(Detection(cls, _to_keyframe(keyframe_pose, measured),
                             keyframe_id, t, score))
    n_fp = int(rng.poisson(params.lambda_fp))
    for _ in range(n_fp):
        r = rng.uniform(1.0, params.r_det)
        b = pose.theta + rng.uniform(-params.fov / 2, params.fov / 2)
        ghost = np.array([pose.x + r * math.cos(b), pose.y + r * math.sin(b),
                          rng.uniform(0.0, 1.0)])
        cls = ARTIFACT_CLASSES[int(rng.integers(len(ARTIFACT_CLASSES)))]
        out.append(Detection(cls, _to_keyframe(keyframe_pose, ghost),
                             keyframe_id, t, 0.3))
    return out


def cluster_detections(detections: list, keyframe_poses: dict, now: float,
                       params: ArtifactParams) -> list:
    """Greedy same-class clustering over the recent time window.

    Confidence is the agreeing/total ratio among same-class detections
    inside the window; singleton clusters are flagged as outliers but
    still reported.
    """
    recent = [d for d in detections if now - d.timestamp <= params.window
              and d.keyframe_id in keyframe_poses]
    recent.sort(key=lambda d: (d.timestamp, d.cls))
    clusters = []                           # [ [detections], world mean ]
    for d in recent:
        kf = keyframe_poses[d.keyframe_id]
        xy = kf.transform_point(d.offset[:2])
        w = np.array([xy[0], xy[1], d.offset[2]])
        placed = False
        for c in clusters:
            if c["cls"] != d.cls:
                continue
            if np.linalg.norm(c["mean"][:2] - w[:2]) <= params.d_cluster:
                c["members"].append((d, w))
                c["mean"] = np.mean([p for _, p in c["members"]], axis=0)
                placed = True
                break
        if not placed:
            clusters.append({"cls": d.cls, "members": [(d, w)], "mean": w})

    totals = {}
    for d in recent:
        totals[d.cls] = totals.get(d.cls, 0) + 1

    reports = []
    for c in clusters:
        members = c["members"]
        anchor = members[0][0]
        kf = keyframe_poses[anchor.keyframe_id]
        offset = _to_keyframe(kf, c["mean"])
        conf = len(members) / totals[c["cls"]]
        reports.append(ArtifactReport(
            cls=c["cls"], keyframe_id=anchor.keyframe_id, offset=offset,
            confidence=conf, supporting_count=len(members),
            outlier=len(members) == 1,
            timestamp=max(d.timestamp for d, _ in members),
            context_image=f"crop-{c['cls']}-{anchor.keyframe_id}"
                          f"-{anchor.timestamp:.1f}"))
    return reports


@dataclass
class BluetoothLog:
    """Per-MAC best-RSSI tracking; pushes only on improvement."""

    best: dict = field(default_factory=dict)

    def sense(self, world: MineWorld, pose: Pose2, t: float,
              rng: np.random.Generator) -> list:
        """Returns [(mac, rssi, pose, t)] records that beat the previous best."""
        cfg = world.config
        pushes = []
        for art in world.artifacts:
            if art.cls != "cellphone" or art.mac is None:
                continue
            d, _ = world.corridor_distance((pose.x, pose.y), art.position[:2])
            if not math.isfinite(d) or d > cfg.bt_range:
                continue
            rssi = world.bluetooth_rssi(pose, art)
            if cfg.bt_sigma > 0:
                rssi += float(rng.normal(0.0, cfg.bt_sigma))
            if rssi > self.best.get(art.mac, -math.inf):
                self.best[art.mac] = rssi
                pushes.append((art.mac, rssi, pose, t))
        return pushes


class ReportPublisher:
    """Deduplicating bridge from cluster reports into the database."""

    def __init__(self, store):
        self.store = store
        self._published: dict = {}          # key -> best confidence

    def publish(self, reports: list, now: float) -> int:
        wrote = 0
        for r in sorted(reports, key=lambda r: (r.timestamp, r.cls)):
            k = r.key()
            prev = self._published.get(k)
            if prev is not None and r.confidence <= prev:
                continue
            self._published[k] = r.confidence
            self.store.put("artifacts", r.to_payload(), now)
            wrote += 1
        return wrote


def scoring_lines(reports: list, keyframe_poses: dict) -> list:
    """Scoring export: one "class x y z" line per report."""
    out = []
    for r in reports:
        p = r.world_position(keyframe_poses)
        out.append(f"{r.cls} {p[0]:.3f} {p[1]:.3f} {p[2]:.3f}")
    return out
