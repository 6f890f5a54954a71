"""Deterministic 2.5-D synthetic mine.

The world is a tunnel graph whose corridors carve free space out of
solid rock. Free space is the union of oriented rectangles (one per
corridor segment, extended by half a width at each end so junctions are
covered). Terrain is a heightfield over the plane; walls are vertical
and run floor to ceiling, which lets panorama raycasting split into a
cheap per-column horizontal wall cast plus per-pixel floor/ceiling
intersections.

Everything is seeded: the same (config, seed, command trace) reproduces
the identical world and sensor stream byte for byte.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import networkx as nx
import numpy as np
import yaml

from .geometry import Grid2, Pose2, Twist2, wrap_angle, wrap_angles
from .panorama import DepthPanorama

ARTIFACT_CLASSES = ("fire-extinguisher", "backpack", "drill", "cellphone", "survivor")


# ---------------------------------------------------------------- config


@dataclass
class WorldConfig:
    """Parameters of the synthetic mine and its sensor models."""

    # geometry
    template: str = "straight"              # straight | t_junction | y_junction |
                                            # x_junction | custom
    corridor_length: float = 50.0
    corridor_width: float = 4.0
    corridor_height: float = 3.0
    nodes: list = field(default_factory=list)       # custom template: [[x, y], ...]
    edges: list = field(default_factory=list)       # custom: [[i, j, width?, rough?], ...]
    roughness: float = 0.0                  # default height-noise amplitude (m)
    heightfield_resolution: float = 0.25

    # robot
    footprint_length: float = 0.8
    footprint_width: float = 0.5
    sensor_height: float = 0.5
    slip_threshold: float = 0.4
    slip_rate: float = 0.2                  # fall probability per second above threshold

    # lidar
    panorama_width: int = 360
    panorama_height: int = 64
    vfov_deg: float = 22.5
    max_range: float = 40.0
    range_sigma: float = 0.0
    scan_interval: float = 0.1

    # odometry / imu
    odom_sigma_xy: float = 0.0              # m per sqrt(s), per axis
    odom_sigma_theta: float = 0.0           # rad per sqrt(s)
    imu_yaw_bias: float = 0.0               # rad/s
    imu_yaw_sigma: float = 0.0

    # radio
    rf_max_range: float = 120.0
    rf_exponent: float = 1.0
    rf_corner_penalty: float = 10.0         # extra meters per path corner
    bt_tx_dbm: float = -40.0
    bt_path_loss_exp: float = 2.0
    bt_wall_db: float = 6.0
    bt_sigma: float = 0.0
    bt_range: float = 25.0

    # artifacts: list of {class, position: [x, y] | edge+offset, mac?}
    artifacts: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "WorldConfig":
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f) or {})


class RangeNoiseModel:
    """Additive Gaussian range noise, seeded per (world seed, frame index)."""

    def __init__(self, sigma: float = 0.0):
        self.sigma = sigma

    def apply(self, ranges: np.ndarray, max_range: float, seed: int, frame_index: int) -> np.ndarray:
        if self.sigma <= 0:
            return ranges
        rng = np.random.default_rng([seed & 0x7FFFFFFF, frame_index])
        hit = ranges < max_range - 1e-9
        noisy = ranges.copy()
        noisy[hit] = np.clip(ranges[hit] + rng.normal(0.0, self.sigma, hit.sum()), 0.05, max_range)
        return noisy


# ---------------------------------------------------------------- world model


@dataclass(frozen=True)
class Rect:
    """Oriented free-space rectangle (corridor segment)."""

    cx: float
    cy: float
    angle: float
    half_len: float
    half_width: float


@dataclass
class Artifact:
    cls: str
    position: np.ndarray            # (3,) world meters
    mac: str | None = None


@dataclass
class MineWorld:
    config: WorldConfig
    seed: int
    nodes: np.ndarray               # (N, 2) junction positions
    edges: list                     # [(i, j, width, roughness)]
    rects: list                     # list[Rect]
    heightfield: Grid2
    gradmag: Grid2                  # |grad h|, same layout as heightfield
    artifacts: list                 # list[Artifact]

    # cached rect arrays for vectorized queries
    _rc: np.ndarray = field(default=None, repr=False)
    _rcs: np.ndarray = field(default=None, repr=False)
    _rhl: np.ndarray = field(default=None, repr=False)
    _rhw: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self._rc = np.array([[r.cx, r.cy] for r in self.rects])
        self._rcs = np.array([[math.cos(r.angle), math.sin(r.angle)] for r in self.rects])
        self._rhl = np.array([r.half_len for r in self.rects])
        self._rhw = np.array([r.half_width for r in self.rects])

    # -- free space queries -------------------------------------------------

    def _local_coords(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Rect-frame coordinates of points: returns (|u|, |v|) arrays (P, M)."""
        d = pts[:, None, :] - self._rc[None, :, :]           # (P, M, 2)
        c = self._rcs[None, :, 0]
        s = self._rcs[None, :, 1]
        u = d[..., 0] * c + d[..., 1] * s
        v = -d[..., 0] * s + d[..., 1] * c
        return np.abs(u), np.abs(v)

    def inside_free(self, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """True where points lie inside free space shrunk by `margin`."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        au, av = self._local_coords(pts)
        ok = (au <= self._rhl[None, :] - margin) & (av <= self._rhw[None, :] - margin)
        return ok.any(axis=1)

    def free_sdf(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance to the free-space boundary (negative inside)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        au, av = self._local_coords(pts)
        dx = au - self._rhl[None, :]
        dy = av - self._rhw[None, :]
        outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
        inside = np.minimum(np.maximum(dx, dy), 0.0)
        sdf = outside + inside
        return sdf.min(axis=1)

    def segment_in_free(self, a, b, step: float = 0.25, margin: float = 0.0) -> bool:
        a = np.asarray(a, dtype=float)[:2]
        b = np.asarray(b, dtype=float)[:2]
        n = max(2, int(np.linalg.norm(b - a) / step) + 1)
        t = np.linspace(0.0, 1.0, n)
        pts = a[None, :] + t[:, None] * (b - a)[None, :]
        return bool(self.inside_free(pts, margin).all())

    # -- raycasting ----------------------------------------------------------

    def horizontal_exit(self, origins: np.ndarray, dirs: np.ndarray,
                        t_cap: float | None = None) -> np.ndarray:
        """Distance along each horizontal ray to the free-space boundary.

        origins (N, 2), dirs (N, 2) unit. Returns (N,) exit distances
        (np.inf when the union extends past `t_cap`).
        """
        if t_cap is None:
            t_cap = self.config.max_range * 2.0
        o = origins[:, None, :] - self._rc[None, :, :]
        c = self._rcs[None, :, 0]
        s = self._rcs[None, :, 1]
        ou = o[..., 0] * c + o[..., 1] * s
        ov = -o[..., 0] * s + o[..., 1] * c
        du = dirs[:, None, 0] * c + dirs[:, None, 1] * s
        dv = -dirs[:, None, 0] * s + dirs[:, None, 1] * c
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-self._rhl[None, :] - ou) / du
            t2 = (self._rhl[None, :] - ou) / du
            t3 = (-self._rhw[None, :] - ov) / dv
            t4 = (self._rhw[None, :] - ov) / dv
        tin_u = np.minimum(t1, t2)
        tout_u = np.maximum(t1, t2)
        tin_v = np.minimum(t3, t4)
        tout_v = np.maximum(t3, t4)
        # parallel rays: inside slab forever or never
        par_u = np.abs(du) < 1e-12
        in_u = np.abs(ou) <= self._rhl[None, :]
        tin_u = np.where(par_u, np.where(in_u, -np.inf, np.inf), tin_u)
        tout_u = np.where(par_u, np.where(in_u, np.inf, -np.inf), tout_u)
        par_v = np.abs(dv) < 1e-12
        in_v = np.abs(ov) <= self._rhw[None, :]
        tin_v = np.where(par_v, np.where(in_v, -np.inf, np.inf), tin_v)
        tout_v = np.where(par_v, np.where(in_v, np.inf, -np.inf), tout_v)
        tin = np.maximum(tin_u, tin_v)
        tout = np.minimum(tout_u, tout_v)
        hit = tout > tin
        tin = np.where(hit, tin, np.inf)
        tout = np.where(hit, tout, -np.inf)
        # grow the exit point through overlapping rect intervals
        exit_t = np.zeros(origins.shape[0])
        eps = 1e-9
        for _ in range(len(self.rects)):
            covered = (tin <= exit_t[:, None] + eps) & (tout > exit_t[:, None])
            new_exit = np.where(covered, tout, -np.inf).max(axis=1)
            new_exit = np.maximum(exit_t, np.where(np.isfinite(new_exit), new_exit, exit_t))
            new_exit = np.minimum(new_exit, t_cap * 1.0001)
            if np.allclose(new_exit, exit_t):
                exit_t = new_exit
                break
            exit_t = new_exit
        return np.where(exit_t >= t_cap, np.inf, exit_t)

    def raycast_panorama(self, pose: Pose2, noise: RangeNoiseModel | None = None,
                         frame_index: int = 0,
                         column_poses: np.ndarray | None = None) -> DepthPanorama:
        """Panorama from `pose` (or per-column poses (W, 3) for sub-scan motion)."""
        cfg = self.config
        W, H = cfg.panorama_width, cfg.panorama_height
        vfov = math.radians(cfg.vfov_deg)
        pano = DepthPanorama(np.full((H, W), cfg.max_range), cfg.max_range, vfov)
        if column_poses is None:
            column_poses = np.tile(pose.as_array(), (W, 1))
        if not self.inside_free(column_poses[:1, :2]).all():
            raise ValueError("raycast pose outside free space (simulation bug)")

        az = pano.azimuths()
        world_az = column_poses[:, 2] + az
        dirs = np.stack([np.cos(world_az), np.sin(world_az)], axis=1)
        u_exit = self.horizontal_exit(column_poses[:, :2], dirs, t_cap=cfg.max_range)

        el = pano.elevations()
        ce = np.cos(el)[:, None]
        se = np.sin(el)[:, None]
        ground = self.heightfield.sample_world(column_poses[:, :2])
        ground = np.nan_to_num(ground, nan=0.0)
        z0 = (ground + cfg.sensor_height)[None, :]           # (1, W)

        # wall hits
        with np.errstate(divide="ignore", invalid="ignore"):
            t_wall = u_exit[None, :] / np.maximum(ce, 1e-9)
        ranges = np.where(np.isfinite(t_wall), t_wall, np.inf)

        # ceiling hits (upward rays)
        up = se > 1e-9
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ceil = (cfg.corridor_height - z0) / np.where(up, se, np.nan)
        u_ceil = t_ceil * ce
        ceil_ok = up & (u_ceil < np.minimum(u_exit[None, :], np.inf))
        ranges = np.where(ceil_ok & (t_ceil < ranges), t_ceil, ranges)

        # floor hits (downward rays); fixed-point on the heightfield
        down = se < -1e-9
        if np.any(down):
            se_d = np.where(down, se, -1.0)
            t = np.where(down, -z0 / se_d, np.inf)           # flat-floor guess
            for _ in range(3):
                t_safe = np.where(np.isfinite(t), t, 0.0)
                ux = column_poses[None, :, 0] + t_safe * ce * dirs[None, :, 0].reshape(1, -1)
                uy = column_poses[None, :, 1] + t_safe * ce * dirs[None, :, 1].reshape(1, -1)
                hxy = self.heightfield.sample_world(np.stack([ux, uy], axis=-1))
                hxy = np.nan_to_num(hxy, nan=0.0)
                t_new = (hxy - z0) / se_d
                t = np.where(down & np.isfinite(t_new) & (t_new > 0), t_new, t)
            u_floor = t * ce
            floor_ok = down & (u_floor < u_exit[None, :] + 0.5)
            ranges = np.where(floor_ok & (t < ranges), t, ranges)

        ranges = np.minimum(ranges, cfg.max_range)
        if noise is not None:
            ranges = noise.apply(ranges, cfg.max_range, self.seed, frame_index)
        pano.ranges = ranges
        return pano

    # -- radio ----------------------------------------------------------------

    def corridor_distance(self, a, b) -> tuple[float, int]:
        """(path distance through corridors, number of path corners)."""
        a = np.asarray(a, dtype=float)[:2]
        b = np.asarray(b, dtype=float)[:2]
        if self.segment_in_free(a, b, step=0.5):
            return float(np.linalg.norm(b - a)), 0
        g = self._graph()
        best = math.inf
        best_corners = 0
        vis_a = [i for i in range(len(self.nodes)) if self.segment_in_free(a, self.nodes[i], step=0.5)]
        vis_b = [i for i in range(len(self.nodes)) if self.segment_in_free(b, self.nodes[i], step=0.5)]
        if not vis_a:
            vis_a = [int(np.argmin(np.linalg.norm(self.nodes - a, axis=1)))]
        if not vis_b:
            vis_b = [int(np.argmin(np.linalg.norm(self.nodes - b, axis=1)))]
        for na in vis_a:
            for nb in vis_b:
                try:
                    d = nx.shortest_path_length(g, na, nb, weight="length")
                    path = nx.shortest_path(g, na, nb, weight="length")
                except nx.NetworkXNoPath:
                    continue
                total = float(np.linalg.norm(a - self.nodes[na]) + d + np.linalg.norm(b - self.nodes[nb]))
                if total < best:
                    best = total
                    best_corners = max(0, len(path) - 1)
        return best, best_corners

    def link_quality(self, pose_a: Pose2, pose_b: Pose2) -> float:
        """Link quality in [0, 1]; the configured curve of corridor distance."""
        cfg = self.config
        d, corners = self.corridor_distance((pose_a.x, pose_a.y), (pose_b.x, pose_b.y))
        d_eff = d + cfg.rf_corner_penalty * corners
        if not math.isfinite(d_eff) or d_eff >= cfg.rf_max_range:
            return 0.0
        return float(max(0.0, 1.0 - d_eff / cfg.rf_max_range) ** cfg.rf_exponent)

    def bluetooth_rssi(self, pose: Pose2, phone: Artifact) -> float:
        """Noise-free RSSI (dBm) of a cellphone from the path-loss model."""
        cfg = self.config
        d, corners = self.corridor_distance((pose.x, pose.y), phone.position[:2])
        d = max(d, 1.0)
        return cfg.bt_tx_dbm - 10.0 * cfg.bt_path_loss_exp * math.log10(d) - cfg.bt_wall_db * corners

    def _graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(len(self.nodes)))
        for (i, j, _w, _r) in self.edges:
            g.add_edge(i, j, length=float(np.linalg.norm(self.nodes[i] - self.nodes[j])))
        return g

    def terrain_gradient(self, x: float, y: float) -> float:
        v = self.gradmag.sample_world(np.array([[x, y]]))[0]
        return 0.0 if not np.isfinite(v) else float(v)

    # -- snapshot export -------------------------------------------------------

    def export_snapshot(self, directory) -> None:
        """World snapshot: structured text + 16-bit heightfield image."""
        from pathlib import Path
        from PIL import Image

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "seed": int(self.seed),
            "nodes": [[float(x), float(y)] for x, y in self.nodes],
            "edges": [[int(i), int(j), float(w), float(r)] for i, j, w, r in self.edges],
            "artifacts": [
                {"class": a.cls, "position": [float(v) for v in a.position], "mac": a.mac}
                for a in self.artifacts
            ],
            "heightfield": {
                "origin": [self.heightfield.origin.x, self.heightfield.origin.y],
                "resolution": self.heightfield.resolution,
                "scale": "height_m = (pixel/65535)*4.0 - 2.0",
            },
        }
        (directory / "world.yaml").write_text(yaml.safe_dump(meta, sort_keys=True))
        h = np.nan_to_num(self.heightfield.values, nan=0.0)
        px = np.clip((h + 2.0) / 4.0 * 65535.0, 0, 65535).astype(np.uint16)
        Image.fromarray(px).save(directory / "heightfield.png")


# ---------------------------------------------------------------- generation


def _template_graph(config: WorldConfig, rng: np.random.Generator):
    L = config.corridor_length
    t = config.template
    if t == "straight":
        nodes = [[0.0, 0.0], [L, 0.0]]
        edges = [[0, 1]]
    elif t == "t_junction":
        nodes = [[0.0, 0.0], [L, 0.0], [L, L * 0.75], [L, -L * 0.75]]
        edges = [[0, 1], [1, 2], [1, 3]]
    elif t == "y_junction":
        a = math.radians(35)
        nodes = [[0.0, 0.0], [L, 0.0],
                 [L + L * 0.75 * math.cos(a), L * 0.75 * math.sin(a)],
                 [L + L * 0.75 * math.cos(a), -L * 0.75 * math.sin(a)]]
        edges = [[0, 1], [1, 2], [1, 3]]
    elif t == "x_junction":
        nodes = [[0.0, 0.0], [L, 0.0], [2 * L, 0.0], [L, L * 0.75], [L, -L * 0.75]]
        edges = [[0, 1], [1, 2], [1, 3], [1, 4]]
    elif t == "custom":
        nodes = [list(map(float, n)) for n in config.nodes]
        edges = [list(e) for e in config.edges]
    else:
        raise ValueError(f"unknown world template {t!r}")
    if not edges:
        raise ValueError("world must contain at least one corridor")
    return np.array(nodes, dtype=float), edges


def generate_world(config: WorldConfig, seed: int) -> MineWorld:
    """Build a deterministic mine from a config and seed."""
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    nodes, raw_edges = _template_graph(config, rng)

    edges = []
    for e in raw_edges:
        i, j = int(e[0]), int(e[1])
        w = float(e[2]) if len(e) > 2 and e[2] is not None else config.corridor_width
        r = float(e[3]) if len(e) > 3 and e[3] is not None else config.roughness
        if w < 2.0 * config.footprint_width:
            raise ValueError(
                f"corridor width {w} < 2x footprint width {config.footprint_width}")
        edges.append((i, j, w, r))

    rects = []
    for (i, j, w, _r) in edges:
        a, b = nodes[i], nodes[j]
        d = b - a
        length = float(np.linalg.norm(d))
        ang = math.atan2(d[1], d[0])
        c = (a + b) / 2.0
        rects.append(Rect(float(c[0]), float(c[1]), ang, length / 2.0 + w / 2.0, w / 2.0))

    # heightfield over the bounding box
    res = config.heightfield_resolution
    margin = config.corridor_width + 2.0
    lo = nodes.min(axis=0) - margin
    hi = nodes.max(axis=0) + margin
    nx_ = int((hi[0] - lo[0]) / res) + 1
    ny_ = int((hi[1] - lo[1]) / res) + 1
    xs = lo[0] + np.arange(nx_) * res
    ys = lo[1] + np.arange(ny_) * res
    X, Y = np.meshgrid(xs, ys)

    # per-cell roughness amplitude: max over nearby corridors
    amp = np.zeros_like(X)
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    for rect, (_i, _j, _w, r) in zip(rects, edges):
        if r <= 0:
            continue
        d = pts - np.array([rect.cx, rect.cy])
        c, s = math.cos(rect.angle), math.sin(rect.angle)
        u = np.abs(d[:, 0] * c + d[:, 1] * s)
        v = np.abs(-d[:, 0] * s + d[:, 1] * c)
        near = (u <= rect.half_len + 1.0) & (v <= rect.half_width + 1.0)
        a_flat = amp.ravel()
        a_flat[near] = np.maximum(a_flat[near], r)
        amp = a_flat.reshape(amp.shape)

    h = np.zeros_like(X)
    if np.any(amp > 0):
        for _ in range(6):
            wl = rng.uniform(2.0, 8.0)                        # wavelength, meters
            th = rng.uniform(0, 2 * np.pi)
            ph = rng.uniform(0, 2 * np.pi)
            k = 2 * np.pi / wl
            h += np.sin(k * (X * math.cos(th) + Y * math.sin(th)) + ph)
        h = amp * h / 6.0
    heightfield = Grid2(Pose2(float(lo[0]), float(lo[1]), 0.0), res, h)

    gy, gx = np.gradient(h, res)
    gradmag = Grid2(heightfield.origin, res, np.hypot(gx, gy))

    artifacts = []
    for spec in config.artifacts:
        cls = spec["class"]
        if cls not in ARTIFACT_CLASSES:
            raise ValueError(f"unknown artifact class {cls!r}")
        if "position" in spec:
            p = np.array([spec["position"][0], spec["position"][1],
                          spec["position"][2] if len(spec["position"]) > 2 else 0.3])
        else:
            ei = int(spec.get("edge", rng.integers(len(edges))))
            i, j, w, _r = edges[ei]
            frac = float(spec.get("offset", rng.uniform(0.15, 0.85)))
            p2 = nodes[i] + frac * (nodes[j] - nodes[i])
            lat = (w / 2.0 - 0.4) * (1 if rng.random() > 0.5 else -1)
            d = nodes[j] - nodes[i]
            n = np.array([-d[1], d[0]]) / np.linalg.norm(d)
            p = np.array([p2[0] + lat * n[0], p2[1] + lat * n[1], 0.3])
        mac = spec.get("mac")
        if cls == "cellphone" and mac is None:
            mac = "PH:%02X:%02X" % (rng.integers(256), rng.integers(256))
        artifacts.append(Artifact(cls, p, mac))

    return MineWorld(config=config, seed=seed, nodes=nodes, edges=edges, rects=rects,
                     heightfield=heightfield, gradmag=gradmag, artifacts=artifacts)


# ---------------------------------------------------------------- robot motion


@dataclass
class RobotState:
    pose: Pose2
    time: float = 0.0
    path_length: float = 0.0
    fallen: bool = False
    rng: np.random.Generator = None

    @classmethod
    def create(cls, pose: Pose2, seed: int) -> "RobotState":
        return cls(pose=pose, rng=np.random.default_rng([seed & 0x7FFFFFFF, 0xB0B]))


def step_robot(world: MineWorld, state: RobotState, twist: Twist2, dt: float) -> RobotState:
    """Integrate one kinematic step with wall clamping and slip risk."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.fallen:
        return replace(state, time=state.time + dt)
    pose = state.pose
    margin = world.config.footprint_width / 2.0
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    move = np.array([twist.vx * dt * c - twist.vy * dt * s,
                     twist.vx * dt * s + twist.vy * dt * c])
    new_theta = wrap_angle(pose.theta + twist.omega * dt)
    target = np.array([pose.x, pose.y]) + move
    pos = np.array([pose.x, pose.y])

    if world.inside_free(target[None, :], margin)[0]:
        pos = target
    elif np.linalg.norm(move) > 1e-12:
        # advance as far as possible, then slide along the wall tangent
        lo, hi = 0.0, 1.0
        for _ in range(12):
            mid = (lo + hi) / 2.0
            if world.inside_free((pos + mid * move)[None, :], margin)[0]:
                lo = mid
            else:
                hi = mid
        pos = pos + lo * move
        rem = (1.0 - lo) * move
        eps = 0.05
        g = np.array([
            world.free_sdf(np.array([[pos[0] + eps, pos[1]]]))[0]
            - world.free_sdf(np.array([[pos[0] - eps, pos[1]]]))[0],
            world.free_sdf(np.array([[pos[0], pos[1] + eps]]))[0]
            - world.free_sdf(np.array([[pos[0], pos[1] - eps]]))[0],
        ])
        gn = np.linalg.norm(g)
        if gn > 1e-9:
            n = g / gn
            tangential = rem - np.dot(rem, n) * n
            cand = pos + tangential
            if world.inside_free(cand[None, :], margin)[0]:
                pos = cand

    travelled = float(np.linalg.norm(pos - np.array([pose.x, pose.y])))
    fallen = state.fallen
    grad = world.terrain_gradient(pos[0], pos[1])
    if grad > world.config.slip_threshold and state.rng is not None:
        if state.rng.random() < world.config.slip_rate * dt:
            fallen = True
    return RobotState(pose=Pose2(pos[0], pos[1], new_theta), time=state.time + dt,
                      path_length=state.path_length + travelled, fallen=fallen,
                      rng=state.rng)


# ---------------------------------------------------------------- sensors


@dataclass
class SensorFrame:
    timestamp: float
    panorama: DepthPanorama
    odom_pose: Pose2
    imu_yaw_delta: float
    true_pose: Pose2                # withheld from autonomy; evaluators only
    scan_interval: float = 0.1


class OdometrySim:
    """Drifting odometry: true body-frame deltas plus integrated Gaussian noise."""

    def __init__(self, start: Pose2, config: WorldConfig, seed: int):
        self.pose = start
        self._cfg = config
        self._rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x0D0])

    def update(self, prev_true: Pose2, new_true: Pose2, dt: float) -> Pose2:
        delta = new_true.relative_to(prev_true)
        cfg = self._cfg
        sq = math.sqrt(max(dt, 1e-9))
        noisy = Pose2(
            delta.x + self._rng.normal(0.0, cfg.odom_sigma_xy * sq),
            delta.y + self._rng.normal(0.0, cfg.odom_sigma_xy * sq),
            delta.theta + self._rng.normal(0.0, cfg.odom_sigma_theta * sq),
        )
        self.pose = self.pose.compose(noisy)
        return self.pose


def capture_frame(world: MineWorld, pose_start: Pose2, pose_end: Pose2,
                  timestamp: float, frame_index: int, odom_pose: Pose2,
                  noise: RangeNoiseModel | None = None,
                  imu_rng: np.random.Generator | None = None) -> SensorFrame:
    """Simulate one LiDAR sweep; columns are acquired sequentially as the robot moves."""
    cfg = world.config
    W = cfg.panorama_width
    frac = (np.arange(W) + 0.5) / W
    dyaw = wrap_angle(pose_end.theta - pose_start.theta)
    col_poses = np.empty((W, 3))
    col_poses[:, 0] = pose_start.x + frac * (pose_end.x - pose_start.x)
    col_poses[:, 1] = pose_start.y + frac * (pose_end.y - pose_start.y)
    col_poses[:, 2] = wrap_angles(pose_start.theta + frac * dyaw)
    pano = world.raycast_panorama(pose_start, noise=noise, frame_index=frame_index,
                                  column_poses=col_poses)
    imu = dyaw + cfg.imu_yaw_bias * cfg.scan_interval
    if imu_rng is not None and cfg.imu_yaw_sigma > 0:
        imu += imu_rng.normal(0.0, cfg.imu_yaw_sigma)
    return SensorFrame(timestamp=timestamp, panorama=pano, odom_pose=odom_pose,
                       imu_yaw_delta=imu, true_pose=pose_start,
                       scan_interval=cfg.scan_interval)
