"""Planar geometry primitives shared by the whole stack.

Poses are SE(2) (x, y, yaw); yaw is wrapped to (-pi, pi] at construction
so downstream cost functions never see an unwrapped angle.  Grids are
dense row-major arrays with a world-anchored origin pose and a dedicated
UNKNOWN sentinel (NaN for float grids).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNKNOWN = float("nan")


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorized wrap to (-pi, pi]."""
    out = np.mod(a, 2.0 * np.pi)
    out = np.where(out > np.pi, out - 2.0 * np.pi, out)
    out = np.where(out <= -np.pi, out + 2.0 * np.pi, out)
    return out


def angle_diff(a: float, b: float) -> float:
    """Shortest signed angular difference a - b, in (-pi, pi]."""
    return wrap_angle(a - b)


@dataclass(frozen=True)
class Pose2:
    """Planar rigid pose. theta is always stored wrapped to (-pi, pi]."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def compose(self, other: Pose2) -> Pose2:
        """Group composition self * other (apply other in self's frame)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> Pose2:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def relative_to(self, reference: Pose2) -> Pose2:
        """Express self in the frame of `reference`: reference^-1 * self."""
        return reference.inverse().compose(self)

    def transform_point(self, xy: np.ndarray) -> np.ndarray:
        """Map body-frame point(s) (..., 2) into the world frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        xy = np.asarray(xy, dtype=float)
        out = np.empty_like(xy)
        out[..., 0] = self.x + c * xy[..., 0] - s * xy[..., 1]
        out[..., 1] = self.y + s * xy[..., 0] + c * xy[..., 1]
        return out

    def inverse_transform_point(self, xy: np.ndarray) -> np.ndarray:
        """Map world-frame point(s) (..., 2) into this pose's body frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        xy = np.asarray(xy, dtype=float)
        dx = xy[..., 0] - self.x
        dy = xy[..., 1] - self.y
        out = np.empty_like(xy)
        out[..., 0] = c * dx + s * dy
        out[..., 1] = -s * dx + c * dy
        return out

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous transform."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    @staticmethod
    def from_array(v) -> Pose2:
        return Pose2(float(v[0]), float(v[1]), float(v[2]))

    def distance_to(self, other: Pose2) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def compose(a: Pose2, b: Pose2) -> Pose2:
    return a.compose(b)


@dataclass(frozen=True)
class Twist2:
    """Body-frame velocity command: forward, lateral, yaw rate."""

    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.vx) and math.isfinite(self.vy) and math.isfinite(self.omega)):
            raise ValueError("twist components must be finite")

    def clamped(self, limits: Twist2) -> Twist2:
        """Clamp each component magnitude to the corresponding limit."""
        return Twist2(
            max(-limits.vx, min(limits.vx, self.vx)),
            max(-limits.vy, min(limits.vy, self.vy)),
            max(-limits.omega, min(limits.omega, self.omega)),
        )


@dataclass
class Grid2:
    """Dense 2-D grid of floats with an UNKNOWN (NaN) sentinel.

    values[iy, ix]; cell (0, 0) center sits at `origin` (origin.theta is
    carried but grids are axis-aligned in their own frame; all grids in
    this codebase use theta = 0 origins).
    """

    origin: Pose2
    resolution: float
    values: np.ndarray = field(repr=False)

    def __init__(self, origin: Pose2, resolution: float, values: np.ndarray):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.origin = origin
        self.resolution = resolution
        self.values = np.asarray(values, dtype=float)

    @classmethod
    def filled(cls, origin: Pose2, resolution: float, width: int, height: int,
               fill: float = UNKNOWN) -> Grid2:
        return cls(origin, resolution, np.full((height, width), fill))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def world_to_index(self, x: float, y: float) -> tuple[int, int]:
        """Nearest cell index (ix, iy) for a world point."""
        ix = int(round((x - self.origin.x) / self.resolution))
        iy = int(round((y - self.origin.y) / self.resolution))
        return ix, iy

    def index_to_world(self, ix: int, iy: int) -> tuple[float, float]:
        return (self.origin.x + ix * self.resolution, self.origin.y + iy * self.resolution)

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def get(self, ix: int, iy: int) -> float:
        if not self.in_bounds(ix, iy):
            return UNKNOWN
        return float(self.values[iy, ix])

    def copy(self) -> Grid2:
        return Grid2(self.origin, self.resolution, self.values.copy())

    def sample_world(self, xy: np.ndarray) -> np.ndarray:
        """Bilinear sample at world points (..., 2); NaN outside or near UNKNOWN."""
        xy = np.asarray(xy, dtype=float)
        fx = (xy[..., 0] - self.origin.x) / self.resolution
        fy = (xy[..., 1] - self.origin.y) / self.resolution
        fin = np.isfinite(fx) & np.isfinite(fy)
        fx = np.where(fin, fx, -1.0)
        fy = np.where(fin, fy, -1.0)
        x0 = np.floor(fx).astype(int)
        y0 = np.floor(fy).astype(int)
        tx = fx - x0
        ty = fy - y0
        out = np.full(fx.shape, np.nan)
        ok = (x0 >= 0) & (x0 + 1 < self.width) & (y0 >= 0) & (y0 + 1 < self.height)
        if np.any(ok):
            x0k, y0k = x0[ok], y0[ok]
            v00 = self.values[y0k, x0k]
            v10 = self.values[y0k, x0k + 1]
            v01 = self.values[y0k + 1, x0k]
            v11 = self.values[y0k + 1, x0k + 1]
            txk, tyk = tx[ok], ty[ok]
            out[ok] = ((1 - txk) * (1 - tyk) * v00 + txk * (1 - tyk) * v10
                       + (1 - txk) * tyk * v01 + txk * tyk * v11)
        return out
