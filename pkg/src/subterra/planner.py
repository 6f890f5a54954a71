"""Terrain planning pipeline: heightmap -> gradient map -> configuration
space -> lattice Dijkstra -> recursive pruning -> twist tracking.

Traversability is the magnitude of the terrain gradient; unknown cells
are untraversable. The configuration-space cost of a lattice pose is
the worst gradient under the robot footprint, blurred laterally to bias
paths toward the tunnel center. Planning minimizes a sum of rotation,
distance, traversability, sidestep, reversal, and direction penalties,
with a hard admissibility threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import dijkstra as cs_dijkstra

from .geometry import Grid2, Pose2, Twist2, angle_diff, wrap_angle
from .panorama import DepthPanorama


class NoPathError(Exception):
    """Dijkstra exhausted its frontier without reaching the horizon."""


@dataclass
class PlannerWeights:
    L_theta: float = 0.5
    L_xy: float = 1.0
    L_G: float = 2.0
    L_s: float = 0.5
    L_b: float = 4.0
    L_D: float = 3.0
    c_max: float = 0.5                  # admissibility threshold on C
    epsilon_log: float = 1e-6           # floor inside the traversability log


@dataclass
class PlannerConfig:
    resolution: float = 0.1
    window: float = 10.0                # costmap side length, meters
    n_theta: int = 16
    horizon: float = 4.0                # projection along d_des that ends search
    footprint_length: float = 0.8
    footprint_width: float = 0.5
    z_ceiling: float = 1.5              # points above this height are ceiling
    sensor_height: float = 0.5          # lidar height above the base plane
    blur_sigma: float = 1.5             # cells
    blur_halfwidth: int = 3
    v_lin: float = 0.7
    v_ang: float = 1.5
    weights: PlannerWeights = field(default_factory=PlannerWeights)


@dataclass
class GradientMap:
    grid: Grid2                         # |grad h| per cell; NaN unknown

    @property
    def resolution(self) -> float:
        return self.grid.resolution


@dataclass
class ConfigSpace:
    origin_x: float                     # world x of cell (0, 0) center
    origin_y: float
    resolution: float
    n_theta: int
    costs: np.ndarray                   # (ny, nx, n_theta); np.inf = untraversable

    def thetas(self) -> np.ndarray:
        step = 2.0 * np.pi / self.n_theta
        return -np.pi + (np.arange(self.n_theta) + 1) * step

    def theta_index(self, theta: float) -> int:
        step = 2.0 * np.pi / self.n_theta
        k = int(round((wrap_angle(theta) + np.pi) / step)) - 1
        return k % self.n_theta

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        ix = int(round((x - self.origin_x) / self.resolution))
        iy = int(round((y - self.origin_y) / self.resolution))
        return ix, iy

    def cost_at(self, pose: Pose2) -> float:
        ix, iy = self.cell_index(pose.x, pose.y)
        if not (0 <= ix < self.costs.shape[1] and 0 <= iy < self.costs.shape[0]):
            return math.inf
        return float(self.costs[iy, ix, self.theta_index(pose.theta)])


@dataclass
class Trajectory:
    waypoints: list                     # [(Pose2, time_s)]
    commanded_direction: np.ndarray     # unit 2-vector

    def poses(self) -> list:
        return [p for p, _t in self.waypoints]

    def end_time(self) -> float:
        return self.waypoints[-1][1]


# ------------------------------------------------------------ heightmap


def scan_to_heightmap(pano: DepthPanorama, pose: Pose2,
                      config: PlannerConfig | None = None,
                      fill_under_robot: bool = True) -> Grid2:
    """Per-cell mean height (relative to robot base) from one sweep.

    Ceiling points are filtered; cells without points stay UNKNOWN.
    The sensor's vertical field of view cannot see the floor directly
    under the robot, so by default that blind disk is filled with the
    mean of the surrounding observed floor — the robot is standing
    there, so the ground is known traversable.
    """
    cfg = config or PlannerConfig()
    half = cfg.window / 2.0
    n = int(round(cfg.window / cfg.resolution)) + 1
    origin = Pose2(pose.x - half, pose.y - half, 0.0)
    grid = Grid2.filled(origin, cfg.resolution, n, n)

    pts, _ = pano.points()
    if len(pts) == 0:
        return grid
    z = pts[:, 2] + cfg.sensor_height   # express heights relative to the base plane
    keep = z < cfg.z_ceiling
    pts = pts[keep]
    z = z[keep]
    if len(pts) == 0:
        return grid
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    wx = pose.x + c * pts[:, 0] - s * pts[:, 1]
    wy = pose.y + s * pts[:, 0] + c * pts[:, 1]
    ix = np.round((wx - origin.x) / cfg.resolution).astype(int)
    iy = np.round((wy - origin.y) / cfg.resolution).astype(int)
    ok = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
    ix, iy, z = ix[ok], iy[ok], z[ok]
    acc = np.zeros((n, n))
    cnt = np.zeros((n, n))
    np.add.at(acc, (iy, ix), z)
    np.add.at(cnt, (iy, ix), 1.0)
    with np.errstate(invalid="ignore"):
        grid.values = np.where(cnt > 0, acc / np.maximum(cnt, 1), np.nan)
    _fill_small_holes(grid.values)
    if fill_under_robot:
        gx = origin.x + np.arange(n) * cfg.resolution
        gy = origin.y + np.arange(n) * cfg.resolution
        GX, GY = np.meshgrid(gx, gy)
        r2 = (GX - pose.x) ** 2 + (GY - pose.y) ** 2
        ring = (r2 < 2.0 ** 2) & np.isfinite(grid.values)
        if ring.any():
            base = float(np.mean(grid.values[ring]))
            blind = (r2 < 1.3 ** 2) & ~np.isfinite(grid.values)
            grid.values[blind] = base
    return grid


def _fill_small_holes(v: np.ndarray, passes: int = 2) -> None:
    """Interpolate unknown cells that are mostly surrounded by data.

    The sweep's elevation rings leave radial gaps between floor returns
    at range; cells inside those gaps get the mean of their known
    3x3 neighbors. Large unknown regions (behind walls) stay unknown
    because they lack enough known neighbors.
    """
    for _ in range(passes):
        known = np.isfinite(v)
        s = ndimage.uniform_filter(np.where(known, v, 0.0), 3) * 9.0
        c = ndimage.uniform_filter(known.astype(float), 3) * 9.0
        fill = ~known & (c >= 4.0)
        if not fill.any():
            return
        v[fill] = s[fill] / c[fill]


def heightmap_to_gradient(heights: Grid2) -> GradientMap:
    """|gradient| of the heightmap; NaN wherever the stencil touches unknown."""
    h = heights.values
    res = heights.resolution
    gy, gx = np.gradient(h, res)
    return GradientMap(Grid2(heights.origin, res, np.hypot(gx, gy)))


# ------------------------------------------------------------ temporal fusion


def recenter_gradient(g: GradientMap, new_origin: Pose2) -> GradientMap:
    """Resample a gradient map onto a window anchored at a new origin.

    Bilinear resampling; cells leaving the window are dropped (UNKNOWN
    where the old map has no data).
    """
    grid = g.grid
    n_y, n_x = grid.values.shape
    xs = new_origin.x + np.arange(n_x) * grid.resolution
    ys = new_origin.y + np.arange(n_y) * grid.resolution
    X, Y = np.meshgrid(xs, ys)
    vals = grid.sample_world(np.stack([X, Y], axis=-1))
    return GradientMap(Grid2(Pose2(new_origin.x, new_origin.y, 0.0), grid.resolution, vals))


def fuse_gradient(g_prev: GradientMap, motion: Pose2, g_meas: GradientMap) -> GradientMap:
    """Propagate the old map by the robot motion, then fuse the measurement.

    Per cell: unknown prior takes the measurement; two known values
    average; a known prior survives an unknown measurement.
    """
    if abs(g_prev.resolution - g_meas.resolution) > 1e-12:
        raise ValueError("gradient map resolution mismatch")
    prev = recenter_gradient(g_prev, g_meas.grid.origin).grid.values
    meas = g_meas.grid.values
    prev_known = np.isfinite(prev)
    meas_known = np.isfinite(meas)
    out = np.full_like(meas, np.nan)
    out[meas_known & ~prev_known] = meas[meas_known & ~prev_known]
    both = meas_known & prev_known
    out[both] = (meas[both] + prev[both]) / 2.0
    out[prev_known & ~meas_known] = prev[prev_known & ~meas_known]
    return GradientMap(Grid2(g_meas.grid.origin, g_meas.resolution, out))


# ------------------------------------------------------------ config space


def footprint_offsets(footprint_length: float, footprint_width: float,
                      theta: float, resolution: float) -> np.ndarray:
    """Cell offsets (dy, dx) covered by the rotated footprint rectangle."""
    half_l = footprint_length / 2.0
    half_w = footprint_width / 2.0
    reach = math.hypot(half_l, half_w)
    r = int(math.ceil(reach / resolution))
    d = np.arange(-r, r + 1) * resolution
    DX, DY = np.meshgrid(d, d)
    c, s = math.cos(theta), math.sin(theta)
    u = DX * c + DY * s
    v = -DX * s + DY * c
    inside = (np.abs(u) <= half_l + 1e-9) & (np.abs(v) <= half_w + 1e-9)
    iy, ix = np.nonzero(inside)
    return np.stack([iy - r, ix - r], axis=1)


def build_config_space(g: GradientMap, config: PlannerConfig | None = None,
                       blur: bool = True) -> ConfigSpace:
    """Footprint-max expansion of the gradient map over (x, y, theta).

    Any unknown cell under the footprint makes the pose untraversable
    (infinite cost). A 1-D Gaussian blur along the body-frame lateral
    axis then pushes paths toward the tunnel center; infinite cells stay
    infinite and the blur ignores them.
    """
    cfg = config or PlannerConfig()
    vals = g.grid.values
    ny, nx = vals.shape
    filled = np.where(np.isfinite(vals), vals, np.inf)
    cs = ConfigSpace(g.grid.origin.x, g.grid.origin.y, g.resolution, cfg.n_theta,
                     np.empty((ny, nx, cfg.n_theta)))
    thetas = cs.thetas()
    for k, th in enumerate(thetas):
        offs = footprint_offsets(cfg.footprint_length, cfg.footprint_width,
                                 th, g.resolution)
        r = int(np.max(np.abs(offs))) if len(offs) else 0
        size = 2 * r + 1
        mask = np.zeros((size, size), dtype=bool)
        mask[offs[:, 0] + r, offs[:, 1] + r] = True
        slab = ndimage.maximum_filter(filled, footprint=mask, mode="constant", cval=np.inf)
        cs.costs[:, :, k] = slab
    if blur:
        _lateral_blur(cs, cfg)
    return cs


def _lateral_blur(cs: ConfigSpace, cfg: PlannerConfig) -> None:
    """In-place Gaussian blur along the body-frame lateral axis per theta."""
    hw = cfg.blur_halfwidth
    ks = np.exp(-0.5 * (np.arange(-hw, hw + 1) / cfg.blur_sigma) ** 2)
    ny, nx, _ = cs.costs.shape
    for k, th in enumerate(cs.thetas()):
        lat = np.array([-math.sin(th), math.cos(th)])
        slab = cs.costs[:, :, k]
        acc = np.zeros_like(slab)
        wacc = np.zeros_like(slab)
        for w, off in zip(ks, range(-hw, hw + 1)):
            dx = int(round(off * lat[0]))
            dy = int(round(off * lat[1]))
            shifted = np.full_like(slab, np.inf)
            ys = slice(max(0, dy), ny + min(0, dy))
            xs = slice(max(0, dx), nx + min(0, dx))
            ys_src = slice(max(0, -dy), ny + min(0, -dy))
            xs_src = slice(max(0, -dx), nx + min(0, -dx))
            shifted[ys, xs] = slab[ys_src, xs_src]
            fin = np.isfinite(shifted)
            acc[fin] += w * shifted[fin]
            wacc[fin] += w
        blurred = np.where(wacc > 0, acc / np.maximum(wacc, 1e-12), np.inf)
        cs.costs[:, :, k] = np.where(np.isfinite(slab), blurred, np.inf)


# ------------------------------------------------------------ edge costs


def _moves(n_theta: int, resolution: float):
    """All lattice moves: 8-connected translations x {-1, 0, +1} heading steps."""
    out = []
    for mx in (-1, 0, 1):
        for my in (-1, 0, 1):
            if mx == 0 and my == 0:
                continue
            for mt in (-1, 0, 1):
                out.append((mx, my, mt))
    return out


def edge_cost(dxy: np.ndarray, dtheta: float, theta_from: float, dest_cost,
              d_des: np.ndarray, w: PlannerWeights):
    """Eq-style edge cost; vectorized over dest_cost arrays."""
    dist = float(np.linalg.norm(dxy))
    cost = w.L_theta * abs(dtheta) + w.L_xy * dist
    if dist > 0:
        cost += w.L_s * angle_diff(math.atan2(dxy[1], dxy[0]), theta_from) ** 2
        heading = np.array([math.cos(theta_from), math.sin(theta_from)])
        cost += w.L_b * max(-float(dxy @ heading), 0.0)
        cost += w.L_D * (dist - float(dxy @ d_des))
    trav = w.L_G * np.log1p(np.maximum(dest_cost, w.epsilon_log)) * dist
    return cost + trav


def plan(cs: ConfigSpace, start: Pose2, d_des: np.ndarray,
         config: PlannerConfig | None = None) -> Trajectory:
    """Lattice Dijkstra toward the horizon along d_des.

    Raises NoPathError when no admissible lattice pose reaches the
    horizon projection.
    """
    cfg = config or PlannerConfig()
    w = cfg.weights
    d_des = np.asarray(d_des, dtype=float)
    d_des = d_des / np.linalg.norm(d_des)
    ny, nx, nt = cs.costs.shape
    res = cs.resolution
    thetas = cs.thetas()
    dth = 2.0 * np.pi / nt

    start_ix, start_iy = cs.cell_index(start.x, start.y)
    start_it = cs.theta_index(start.theta)
    if not (0 <= start_ix < nx and 0 <= start_iy < ny):
        raise NoPathError("start outside lattice")
    if not (cs.costs[start_iy, start_ix, start_it] <= w.c_max):
        raise NoPathError("start cell inadmissible")

    admissible = cs.costs <= w.c_max                     # (ny, nx, nt)
    n_nodes = ny * nx * nt

    rows, cols, data = [], [], []
    iy, ix = np.mgrid[0:ny, 0:nx]
    for (mx, my, mt) in _moves(nt, res):
        dxy = np.array([mx * res, my * res])
        dist = np.linalg.norm(dxy)
        ny2 = iy + my
        nx2 = ix + mx
        valid = (ny2 >= 0) & (ny2 < ny) & (nx2 >= 0) & (nx2 < nx)
        for it in range(nt):
            jt = (it + mt) % nt
            th = thetas[it]
            ok = valid & admissible[:, :, it]
            dest_ok = np.zeros_like(ok)
            dest_ok[valid] = admissible[ny2[valid], nx2[valid], jt]
            ok &= dest_ok
            if not ok.any():
                continue
            src = (iy[ok] * nx + ix[ok]) * nt + it
            dst = (ny2[ok] * nx + nx2[ok]) * nt + jt
            dest_cost = cs.costs[ny2[ok], nx2[ok], jt]
            c = edge_cost(dxy, abs(mt) * dth, th, dest_cost, d_des, w)
            rows.append(src)
            cols.append(dst)
            data.append(np.broadcast_to(np.asarray(c), src.shape).astype(float))
    if not rows:
        raise NoPathError("no admissible edges")
    graph = sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_nodes, n_nodes))
    start_node = (start_iy * nx + start_ix) * nt + start_it
    dist_arr, pred = cs_dijkstra(graph, indices=start_node, return_predecessors=True)

    # goal set: projection along d_des at least the horizon
    px = cs.origin_x + np.arange(nx) * res - start.x
    py = cs.origin_y + np.arange(ny) * res - start.y
    PX, PY = np.meshgrid(px, py)
    proj = PX * d_des[0] + PY * d_des[1]
    goal_mask = np.repeat((proj >= cfg.horizon)[:, :, None], nt, axis=2)
    goal_nodes = np.nonzero(goal_mask.reshape(-1))[0]
    reachable = goal_nodes[np.isfinite(dist_arr[goal_nodes])]
    if len(reachable) == 0:
        raise NoPathError("horizon unreachable")
    order = np.lexsort((reachable, dist_arr[reachable]))
    goal = int(reachable[order[0]])

    nodes = [goal]
    while nodes[-1] != start_node:
        p = pred[nodes[-1]]
        if p < 0:
            raise NoPathError("predecessor chain broken")
        nodes.append(int(p))
    nodes.reverse()

    poses = []
    for node in nodes:
        it = node % nt
        cell = node // nt
        cy, cx2 = divmod(cell, nx)
        poses.append(Pose2(cs.origin_x + cx2 * res, cs.origin_y + cy * res, thetas[it]))
    return time_parametrize(poses, d_des, cfg)


def time_parametrize(poses: list, d_des: np.ndarray,
                     config: PlannerConfig | None = None) -> Trajectory:
    """Assign waypoint times assuming fixed linear and angular speeds."""
    cfg = config or PlannerConfig()
    t = 0.0
    waypoints = [(poses[0], 0.0)]
    for a, b in zip(poses, poses[1:]):
        dist = a.distance_to(b)
        dth = abs(angle_diff(b.theta, a.theta))
        t += max(dist / cfg.v_lin, dth / cfg.v_ang, 1e-6)
        waypoints.append((b, t))
    return Trajectory(waypoints, np.asarray(d_des, dtype=float))


def trajectory_cost(poses: list, cs: ConfigSpace, d_des: np.ndarray,
                    w: PlannerWeights) -> float:
    """Total edge-decomposed cost of a waypoint sequence."""
    total = 0.0
    d_des = np.asarray(d_des, dtype=float)
    for a, b in zip(poses, poses[1:]):
        dxy = np.array([b.x - a.x, b.y - a.y])
        total += float(edge_cost(dxy, abs(angle_diff(b.theta, a.theta)), a.theta,
                                 cs.cost_at(b), d_des, w))
    return total


# ------------------------------------------------------------ pruning


def _interpolate(a: Pose2, b: Pose2, step: float) -> list:
    n = max(1, int(math.ceil(a.distance_to(b) / step)))
    out = []
    for i in range(1, n + 1):
        f = i / n
        out.append(Pose2(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y),
                         a.theta + f * angle_diff(b.theta, a.theta)))
    return out


def _segment_admissible(a: Pose2, b: Pose2, cs: ConfigSpace, w: PlannerWeights,
                        step: float) -> bool:
    for p in _interpolate(a, b, step):
        if not (cs.cost_at(p) <= w.c_max):
            return False
    return True


def prune(traj: Trajectory, cs: ConfigSpace,
          config: PlannerConfig | None = None) -> Trajectory:
    """Recursive shortcutting; never increases cost, never leaves the
    admissible set.

    A shortcut from waypoint i to j is accepted only when the straight
    segment between them stays admissible (checked at lattice-resolution
    samples) and the single replacement edge costs no more than the
    sub-path it replaces.
    """
    cfg = config or PlannerConfig()
    w = cfg.weights
    poses = traj.poses()
    if len(poses) <= 2:
        return traj
    step = cs.resolution

    def shortcut(i: int, j: int) -> list:
        if j - i <= 1:
            return [i, j]
        a, b = poses[i], poses[j]
        if _segment_admissible(a, b, cs, w, step):
            direct = trajectory_cost([a, b], cs, traj.commanded_direction, w)
            original = trajectory_cost(poses[i:j + 1], cs,
                                       traj.commanded_direction, w)
            if direct <= original + 1e-12:
                return [i, j]
        m = (i + j) // 2
        left = shortcut(i, m)
        right = shortcut(m, j)
        return left[:-1] + right

    keep = shortcut(0, len(poses) - 1)
    return time_parametrize([poses[k] for k in keep],
                            traj.commanded_direction, cfg)


# ------------------------------------------------------------ tracking


def reference_pose(traj: Trajectory, t: float) -> Pose2:
    """Interpolated reference pose at time t (clamped to the trajectory)."""
    wps = traj.waypoints
    if t <= wps[0][1]:
        return wps[0][0]
    if t >= wps[-1][1]:
        return wps[-1][0]
    for (pa, ta), (pb, tb) in zip(wps, wps[1:]):
        if ta <= t <= tb:
            f = (t - ta) / max(tb - ta, 1e-12)
            return Pose2(pa.x + f * (pb.x - pa.x), pa.y + f * (pb.y - pa.y),
                         pa.theta + f * angle_diff(pb.theta, pa.theta))
    return wps[-1][0]


def track(traj: Trajectory, x_now: Pose2, t: float, gains: np.ndarray,
          limits: Twist2) -> Twist2:
    """Proportional twist toward the time-parametrized reference."""
    ref = reference_pose(traj, t)
    err = ref.relative_to(x_now)       # body-frame error
    cmd = Twist2(float(gains[0] * err.x), float(gains[1] * err.y),
                 float(gains[2] * angle_diff(ref.theta, x_now.theta)))
    return cmd.clamped(limits)
