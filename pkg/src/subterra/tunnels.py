"""Tunnel detection and bearing tracking.

Candidate tunnel axes are centroids of large far-range connected
components in the instantaneous depth panorama. Each candidate bearing
is tracked in the LiDAR frame by a scalar EKF whose prediction step
compensates robot yaw; a track is confirmed once its variance drops
below the confirmation threshold. Recently traversed directions are
masked out to prevent backtracking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Pose2, angle_diff, wrap_angle
from .panorama import DepthPanorama


@dataclass
class TrackerConfig:
    d_far: float = 10.0                     # binarization distance, meters
    a_min: int = 40                         # component area, pixels (at 360x64)
    k_gate: float = 3.0
    sigma0: float = math.radians(10.0)      # new-track std dev
    sigma_confirm: float = math.radians(3.0)
    r_meas: float = math.radians(2.0) ** 2
    q_drift: float = math.radians(5.0) ** 2  # process noise per second
    t_stale: float = 3.0
    mask_floor: float = math.radians(10.0)


@dataclass
class TunnelTrack:
    id: int
    bearing: float                          # radians, LiDAR frame
    variance: float
    last_seen: float
    confirmed: bool = False
    untraversable_until: float = -1.0

    def is_untraversable(self, now: float) -> bool:
        return now < self.untraversable_until


@dataclass
class DetectionMask:
    """Bearing intervals to ignore, from recent pose history."""

    intervals: list = field(default_factory=list)   # [(bearing, half_width)]

    def covers(self, bearing: float) -> bool:
        return any(abs(angle_diff(bearing, b)) <= hw for b, hw in self.intervals)

    @classmethod
    def from_history(cls, history: list, current: Pose2, corridor_width: float,
                     floor: float = math.radians(10.0)) -> "DetectionMask":
        """Project past poses onto the panorama as masked bearings."""
        intervals = []
        for p in history:
            dx, dy = p.x - current.x, p.y - current.y
            dist = math.hypot(dx, dy)
            if dist < 0.3:
                continue
            bearing = wrap_angle(math.atan2(dy, dx) - current.theta)
            hw = max(floor, math.atan(corridor_width / dist))
            intervals.append((bearing, hw))
        return cls(intervals)


def detect_tunnel_candidates(pano: DepthPanorama, mask: DetectionMask,
                             config: TrackerConfig | None = None) -> list[float]:
    """Azimuth centroids of far-range connected components, mask applied."""
    cfg = config or TrackerConfig()
    far = np.isfinite(pano.ranges) & (pano.ranges > cfg.d_far)
    if not far.any():
        return []
    # 4-connected labeling; wrap the azimuth seam by stitching labels
    labels, n = ndimage.label(far)
    if n == 0:
        return []
    seam_l = labels[:, 0]
    seam_r = labels[:, -1]
    parent = list(range(n + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in zip(seam_l, seam_r):
        if a > 0 and b > 0:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[rb] = ra
    merged = np.array([find(i) for i in range(n + 1)])
    labels = merged[labels]

    az = pano.azimuths()
    out = []
    for lab in np.unique(labels):
        if lab == 0:
            continue
        comp = labels == lab
        if comp.sum() < cfg.a_min:
            continue
        cols = np.nonzero(comp)[1]
        a = az[cols]
        centroid = math.atan2(np.mean(np.sin(a)), np.mean(np.cos(a)))
        if not mask.covers(centroid):
            out.append(centroid)
    return sorted(out)


def update_tracks(tracks: list[TunnelTrack], candidates: list[float],
                  robot_yaw_delta: float, dt: float, now: float,
                  config: TrackerConfig | None = None,
                  next_id: int = 0) -> tuple[list[TunnelTrack], int]:
    """EKF predict + gated association + update; returns (tracks, next_id)."""
    cfg = config or TrackerConfig()
    for t in tracks:
        t.bearing = wrap_angle(t.bearing - robot_yaw_delta)
        t.variance += cfg.q_drift * dt

    for z in candidates:
        best = None
        best_d = math.inf
        for t in tracks:
            d = abs(angle_diff(z, t.bearing))
            if d < best_d:
                best, best_d = t, d
        if best is not None and best_d <= cfg.k_gate * math.sqrt(best.variance):
            k = best.variance / (best.variance + cfg.r_meas)
            best.bearing = wrap_angle(best.bearing + k * angle_diff(z, best.bearing))
            best.variance *= (1.0 - k)
            best.last_seen = now
            if best.variance < cfg.sigma_confirm ** 2:
                best.confirmed = True
        else:
            tracks.append(TunnelTrack(next_id, z, cfg.sigma0 ** 2, now))
            next_id += 1

    tracks = [t for t in tracks if now - t.last_seen <= cfg.t_stale]
    return tracks, next_id


class TunnelTracker:
    """Single-owner tracker state; one update per sensor frame."""

    def __init__(self, config: TrackerConfig | None = None,
                 corridor_width: float = 4.0, history_spacing: float = 1.0,
                 history_length: int = 12):
        self.config = config or TrackerConfig()
        self.tracks: list[TunnelTrack] = []
        self._next_id = 0
        self._history: list[Pose2] = []
        self._corridor_width = corridor_width
        self._spacing = history_spacing
        self._hist_len = history_length

    def update(self, pano: DepthPanorama, pose: Pose2, yaw_delta: float,
               dt: float, now: float) -> list[TunnelTrack]:
        if not self._history or self._history[-1].distance_to(pose) > self._spacing:
            self._history.append(pose)
            self._history = self._history[-self._hist_len:]
        mask = DetectionMask.from_history(self._history, pose, self._corridor_width,
                                          self.config.mask_floor)
        cands = detect_tunnel_candidates(pano, mask, self.config)
        self.tracks, self._next_id = update_tracks(
            self.tracks, cands, yaw_delta, dt, now, self.config, self._next_id)
        return self.tracks

    def confirmed(self, now: float, traversable_only: bool = False) -> list[TunnelTrack]:
        out = [t for t in self.tracks if t.confirmed]
        if traversable_only:
            out = [t for t in out if not t.is_untraversable(now)]
        return out

    def mark_untraversable(self, track_id: int, now: float, duration: float = 30.0):
        for t in self.tracks:
            if t.id == track_id:
                t.untraversable_until = now + duration
