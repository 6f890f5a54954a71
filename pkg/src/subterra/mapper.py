"""Atlas-style panorama keyframe mapper.

Each sweep is de-rotated with the IMU yaw, registered to the active
keyframe with projective point-to-plane ICP over SE(2), and fused into
the keyframe panorama. Keyframes are chained in a pose graph; proximity
loop closures are registered and the graph re-optimized when they are
accepted. Registration that diverges falls back to the odometry-
initialized pose so local autonomy keeps running.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2, wrap_angle
from .panorama import DepthPanorama
from .posegraph import PoseGraph, optimize_graph
from .world import SensorFrame


@dataclass
class MapperConfig:
    tau_fuse: float = 0.15              # agreement threshold, meters (3x range sigma)
    d_key: float = 4.0                  # keyframe spacing, meters
    f_min: float = 0.6                  # minimum representable sweep fraction
    icp_max_iterations: int = 30
    icp_tol: float = 1e-4
    icp_outlier: float = 0.6            # point-to-plane residual gate, meters
    icp_damping: float = 1e-3
    diverged_residual: float = 0.25     # mean |point-to-plane| residual, meters
    info_floor: float = 1e-2
    loop_radius_factor: float = 2.0     # attempt closures within factor * d_key
    loop_accept_residual: float = 0.08
    pixel_stride: int = 1               # subsample sweeps for ICP speed
    # per-frame trust region around the odometry prior; corrections are
    # incremental, so anything larger is a misregistration
    max_correction_xy: float = 0.15
    max_correction_theta: float = math.radians(6.0)


@dataclass
class Keyframe:
    id: int
    origin: Pose2
    panorama: DepthPanorama
    created_at: float


@dataclass
class RegistrationResult:
    pose: Pose2                        # world pose of the sweep
    rel: Pose2                         # pose relative to keyframe origin
    mean_residual: float
    information: np.ndarray
    diverged: bool
    matched_fraction: float


# ------------------------------------------------------------- projection


def _project(pano: DepthPanorama, pts: np.ndarray):
    """Project sensor-frame points into panorama pixels.

    Returns (rows, cols, dists, in_fov mask) for all points.
    """
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    horiz = np.hypot(x, y)
    az = np.arctan2(y, x)
    el = np.arctan2(z, horiz)
    w, h = pano.width, pano.height
    col = np.mod(np.floor((az + np.pi) / (2.0 * np.pi / w)).astype(int), w)
    row = np.floor((pano.vfov - el) / (2.0 * pano.vfov / h)).astype(int)
    ok = (row >= 0) & (row < h)
    row = np.clip(row, 0, h - 1)
    dist = np.linalg.norm(pts, axis=1)
    return row, col, dist, ok


def _rel_transform(rel: Pose2, pts: np.ndarray) -> np.ndarray:
    """Apply an SE(2) pose to 3-D sensor points (z passes through)."""
    c, s = math.cos(rel.theta), math.sin(rel.theta)
    out = np.empty_like(pts)
    out[:, 0] = rel.x + c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = rel.y + s * pts[:, 0] + c * pts[:, 1]
    out[:, 2] = pts[:, 2]
    return out


def derotate_sweep(frame: SensorFrame) -> DepthPanorama:
    """Shift each column by the IMU yaw accrued at its acquisition time."""
    pano = frame.panorama
    w = pano.width
    cols = np.arange(w)
    yaw = (cols / w) * frame.imu_yaw_delta
    az = pano.azimuths()
    dest = pano.azimuth_to_column(az + yaw)
    out = pano.copy()
    out.ranges = np.full_like(pano.ranges, np.nan)
    out.confidence = np.zeros_like(pano.confidence)
    out.ranges[:, dest] = pano.ranges[:, cols]
    out.confidence[:, dest] = pano.confidence[:, cols]
    out.normals = None
    return out


# ------------------------------------------------------------- registration


def _keyframe_arrays(keyframe: Keyframe):
    pano = keyframe.panorama
    if pano.normals is None:
        pano.compute_normals()
    dirs = pano.ray_directions()
    return pano, pano.normals, dirs


def _residuals(keyframe: Keyframe, pts: np.ndarray, rel: Pose2):
    """Point-to-plane residuals of sweep points under a candidate relative pose."""
    pano, normals, dirs = _keyframe_arrays(keyframe)
    q = _rel_transform(rel, pts)
    row, col, _dist, ok = _project(pano, q)
    rk = pano.ranges[row, col]
    nk = normals[row, col]
    valid = ok & np.isfinite(rk) & (rk < pano.max_range - 1e-9) & np.isfinite(nk[:, 0])
    pk = dirs[row, col] * rk[:, None]
    e = np.einsum("ij,ij->i", nk, q - pk)
    e = np.where(valid, e, np.nan)
    return e, q, nk, valid


def register_sweep(sweep: DepthPanorama, init: Pose2, keyframe: Keyframe,
                   config: MapperConfig | None = None) -> RegistrationResult:
    """Register a sweep to a keyframe; returns the optimized world pose.

    `init` is the world-frame initial guess (odometry-propagated).
    """
    cfg = config or MapperConfig()
    pts, _ = sweep.points()
    if cfg.pixel_stride > 1:
        pts = pts[:: cfg.pixel_stride]
    rel = init.relative_to(keyframe.origin)
    if len(pts) < 30:
        return RegistrationResult(init, rel, math.inf, np.eye(3) * cfg.info_floor,
                                  True, 0.0)

    def score(r: Pose2):
        e, *_ = _residuals(keyframe, pts, r)
        inl = np.abs(e) < cfg.icp_outlier
        if inl.sum() < 10:
            return math.inf, 0.0
        frac = inl.sum() / len(pts)
        return float(np.sqrt(np.nanmean(e[inl] ** 2))), float(frac)

    init_score, _ = score(rel)
    best_rel, best_score = rel, init_score
    H = np.eye(3) * cfg.info_floor

    cur = rel
    for _ in range(cfg.icp_max_iterations):
        e, q, nk, valid = _residuals(keyframe, pts, cur)
        inliers = valid & (np.abs(e) < cfg.icp_outlier)
        if inliers.sum() < 10:
            break
        ei = e[inliers]
        ni = nk[inliers]
        pi = pts[inliers]
        c, s = math.cos(cur.theta), math.sin(cur.theta)
        drot_x = -pi[:, 0] * s - pi[:, 1] * c
        drot_y = pi[:, 0] * c - pi[:, 1] * s
        J = np.stack([ni[:, 0], ni[:, 1], ni[:, 0] * drot_x + ni[:, 1] * drot_y], axis=1)
        H = J.T @ J
        g = J.T @ ei
        try:
            delta = np.linalg.solve(H + cfg.icp_damping * np.trace(H) / 3.0 * np.eye(3), -g)
        except np.linalg.LinAlgError:
            break
        cur = Pose2(cur.x + delta[0], cur.y + delta[1], cur.theta + delta[2])
        sc, _ = score(cur)
        if sc < best_score:
            best_score, best_rel = sc, cur
        if np.linalg.norm(delta) < cfg.icp_tol:
            break

    final_score, frac = score(best_rel)
    if not math.isfinite(final_score) or final_score > init_score + 1e-12:
        best_rel, final_score = rel, init_score
        _, frac = score(rel)
    # information from residual curvature, eigenvalue floor for featureless cases
    w, v = np.linalg.eigh((H + H.T) / 2.0)
    w = np.maximum(w, cfg.info_floor)
    info = v @ np.diag(w) @ v.T
    diverged = not math.isfinite(final_score) or final_score > cfg.diverged_residual
    return RegistrationResult(keyframe.origin.compose(best_rel), best_rel,
                              final_score, info, diverged, frac)


# ------------------------------------------------------------- fusion


def fuse_sweep(keyframe: Keyframe, sweep: DepthPanorama, pose: Pose2,
               tau_fuse: float = 0.15) -> Keyframe:
    """Fuse a registered sweep into the keyframe panorama (in place).

    Agreeing ranges are confidence-weighted averaged; disagreeing ones
    decrement confidence, and once confidence is exhausted the next
    disagreement replaces the pixel.
    """
    cfg_tau = tau_fuse
    pano = keyframe.panorama
    pts, _ = sweep.points()
    if len(pts) == 0:
        return keyframe
    rel = pose.relative_to(keyframe.origin)
    q = _rel_transform(rel, pts)
    row, col, dist, ok = _project(pano, q)
    row, col, dist = row[ok], col[ok], dist[ok]
    pix = row * pano.width + col
    # nearest observation wins when several points land in one pixel
    order = np.lexsort((dist, pix))
    pix, dist = pix[order], dist[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, dist = pix[first], dist[first]
    r, c = pix // pano.width, pix % pano.width

    old = pano.ranges[r, c]
    conf = pano.confidence[r, c]
    known = np.isfinite(old) & (old < pano.max_range - 1e-9) & (conf > 0)
    agree = known & (np.abs(dist - old) < cfg_tau)
    disagree = known & ~agree
    fresh = ~known

    new_r = old.copy()
    new_c = conf.copy()
    new_r[agree] = (conf[agree] * old[agree] + dist[agree]) / (conf[agree] + 1.0)
    new_c[agree] = conf[agree] + 1.0
    replace = disagree & (conf <= 0.0)
    lower = disagree & ~replace
    new_c[lower] = conf[lower] - 1.0
    new_r[replace] = dist[replace]
    new_c[replace] = 1.0
    new_r[fresh] = dist[fresh]
    new_c[fresh] = 1.0

    pano.ranges[r, c] = new_r
    pano.confidence[r, c] = new_c
    pano.normals = None
    return keyframe


def reproject_panorama(pano: DepthPanorama, rel: Pose2) -> DepthPanorama:
    """View a panorama from a new origin (`rel` = new origin in old frame)."""
    out = DepthPanorama(np.full_like(pano.ranges, np.nan), pano.max_range, pano.vfov)
    pts, mask = pano.points()
    if len(pts) == 0:
        return out
    conf = pano.confidence[mask]
    q = _rel_transform(rel.inverse(), pts)
    row, col, dist, ok = _project(out, q)
    row, col, dist, conf = row[ok], col[ok], dist[ok], conf[ok]
    pix = row * out.width + col
    order = np.lexsort((dist, pix))
    pix, dist, conf = pix[order], dist[order], conf[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, dist, conf = pix[first], dist[first], conf[first]
    out.ranges[pix // out.width, pix % out.width] = dist
    out.confidence[pix // out.width, pix % out.width] = conf
    return out


# ------------------------------------------------------------- export


KEYFRAME_HEADER = struct.Struct("<IffffHH")  # id, origin xyz(theta), scale, dims


def export_keyframe(keyframe: Keyframe, downsample: int = 2) -> bytes:
    """Quantize to 16 bits, downsample, losslessly compress.

    Pixel 0 encodes unknown; 1..65535 span (0, max_range]. Round-trip
    error is bounded by the quantization step max_range/65534.
    """
    pano = keyframe.panorama
    r = pano.ranges[::downsample, ::downsample]
    scale = pano.max_range / 65534.0
    q = np.zeros(r.shape, dtype=np.uint16)
    fin = np.isfinite(r)
    q[fin] = np.clip(np.round(r[fin] / scale), 0, 65534).astype(np.uint16) + 1
    payload = zlib.compress(q.tobytes(), 6)
    header = KEYFRAME_HEADER.pack(keyframe.id, keyframe.origin.x, keyframe.origin.y,
                                  keyframe.origin.theta, scale,
                                  q.shape[1], q.shape[0])
    return header + payload


def decode_keyframe(packet: bytes, max_range: float = None,
                    vfov: float = math.radians(22.5)) -> Keyframe:
    kid, x, y, th, scale, w, h = KEYFRAME_HEADER.unpack(packet[:KEYFRAME_HEADER.size])
    q = np.frombuffer(zlib.decompress(packet[KEYFRAME_HEADER.size:]),
                      dtype=np.uint16).reshape(h, w)
    ranges = np.full((h, w), np.nan)
    known = q > 0
    ranges[known] = (q[known].astype(float) - 1.0) * scale
    mr = max_range if max_range is not None else scale * 65534.0
    pano = DepthPanorama(ranges, mr, vfov)
    return Keyframe(kid, Pose2(x, y, th), pano, 0.0)


# ------------------------------------------------------------- mapper driver


@dataclass
class MapperUpdate:
    pose: Pose2
    keyframe_id: int
    new_keyframe: bool
    diverged: bool
    loop_closed: bool


class Mapper:
    """Owns keyframes and the pose graph; one update per sensor frame."""

    def __init__(self, config: MapperConfig | None = None,
                 start_pose: Pose2 | None = None):
        self.config = config or MapperConfig()
        self.graph = PoseGraph()
        self.keyframes: dict[int, Keyframe] = {}
        self.active_id: int | None = None
        self.rel = Pose2()
        self._prev_odom: Pose2 | None = None
        self._start = start_pose
        self._next_id = 0

    # -- queries

    @property
    def pose(self) -> Pose2:
        if self.active_id is None:
            return self._start or Pose2()
        return self.keyframes[self.active_id].origin.compose(self.rel)

    def keyframe_origin(self, kid: int) -> Pose2:
        return self.graph.nodes[kid]

    def nearest_keyframe(self, pose: Pose2) -> int:
        return min(self.graph.nodes, key=lambda k: self.graph.nodes[k].distance_to(pose))

    # -- update

    def update(self, frame: SensorFrame) -> MapperUpdate:
        cfg = self.config
        sweep = derotate_sweep(frame)
        if self.active_id is None:
            origin = self._start if self._start is not None else frame.odom_pose
            kf = Keyframe(self._allocate_id(), origin, sweep.copy(), frame.timestamp)
            kf.panorama.confidence = np.where(np.isfinite(kf.panorama.ranges), 1.0, 0.0)
            self.keyframes[kf.id] = kf
            self.graph.add_node(kf.id, origin)
            self.active_id = kf.id
            self.rel = Pose2()
            self._prev_odom = frame.odom_pose
            return MapperUpdate(origin, kf.id, True, False, False)

        active = self.keyframes[self.active_id]
        odom_delta = frame.odom_pose.relative_to(self._prev_odom)
        self._prev_odom = frame.odom_pose
        init = self.pose.compose(odom_delta)

        reg = register_sweep(sweep, init, active, cfg)
        diverged = reg.diverged
        corr = reg.pose.relative_to(init)
        if (math.hypot(corr.x, corr.y) > cfg.max_correction_xy
                or abs(wrap_angle(corr.theta)) > cfg.max_correction_theta):
            diverged = True
        if diverged:
            est = init
            self.rel = est.relative_to(active.origin)
        else:
            est = reg.pose
            self.rel = reg.rel
            fuse_sweep(active, sweep, est, cfg.tau_fuse)

        new_kf = False
        loop_closed = False
        dist = est.distance_to(active.origin)
        if dist > cfg.d_key or (not diverged and reg.matched_fraction < cfg.f_min):
            loop_closed = self._create_keyframe(sweep, est, frame.timestamp, reg)
            new_kf = True
        return MapperUpdate(self.pose, self.active_id, new_kf, diverged, loop_closed)

    def _allocate_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _create_keyframe(self, sweep: DepthPanorama, est: Pose2, timestamp: float,
                         reg: RegistrationResult) -> bool:
        cfg = self.config
        prev = self.keyframes[self.active_id]
        pano = reproject_panorama(prev.panorama, self.rel)
        kf = Keyframe(self._allocate_id(), est, pano, timestamp)
        fuse_sweep(kf, sweep, est, cfg.tau_fuse)
        self.keyframes[kf.id] = kf
        self.graph.add_node(kf.id, est)
        self.graph.add_edge(prev.id, kf.id, self.rel, reg.information)
        self.active_id = kf.id
        self.rel = Pose2()

        closed = self._attempt_loop_closures(kf, sweep)
        if closed:
            self.graph = optimize_graph(self.graph)
            for kid, pose in self.graph.nodes.items():
                self.keyframes[kid].origin = pose
        return closed

    def _attempt_loop_closures(self, kf: Keyframe, sweep: DepthPanorama) -> bool:
        cfg = self.config
        radius = cfg.loop_radius_factor * cfg.d_key
        closed = False
        for other_id, other in self.keyframes.items():
            if other_id >= kf.id - 1:
                continue
            if other.origin.distance_to(kf.origin) > radius:
                continue
            reg = register_sweep(sweep, kf.origin, other, cfg)
            if reg.diverged or reg.mean_residual > cfg.loop_accept_residual:
                continue
            self.graph.add_edge(other_id, kf.id, reg.rel, reg.information)
            closed = True
        return closed
