"""Depth panorama container and pixel geometry.

A panorama is an azimuth x elevation range image taken from a sensor
pose. Columns sweep azimuth from -pi to pi (left to right), rows sweep
elevation from +vfov (top) down to -vfov. Free space is implicitly
encoded along each ray up to the recorded range; rays that leave the
world unobstructed carry the max_range sentinel. NaN marks pixels that
were never observed (used by keyframes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DepthPanorama:
    ranges: np.ndarray            # (H, W) meters; NaN = unknown
    max_range: float
    vfov: float                   # half vertical field of view, radians
    confidence: np.ndarray = field(default=None, repr=False)
    normals: np.ndarray = field(default=None, repr=False)  # (H, W, 3), sensor frame

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=float)
        if self.confidence is None:
            self.confidence = np.zeros_like(self.ranges)
        if self.ranges.ndim != 2:
            raise ValueError("ranges must be 2-D (elevation x azimuth)")

    @property
    def height(self) -> int:
        return self.ranges.shape[0]

    @property
    def width(self) -> int:
        return self.ranges.shape[1]

    def azimuths(self) -> np.ndarray:
        """Azimuth of each column center, (-pi, pi), increasing with column."""
        w = self.width
        return -np.pi + (np.arange(w) + 0.5) * (2.0 * np.pi / w)

    def elevations(self) -> np.ndarray:
        """Elevation of each row center; row 0 looks up."""
        h = self.height
        return self.vfov - (np.arange(h) + 0.5) * (2.0 * self.vfov / h)

    def azimuth_to_column(self, az: np.ndarray) -> np.ndarray:
        """Nearest column index for azimuth(s); wraps around."""
        w = self.width
        col = np.floor((np.asarray(az) + np.pi) / (2.0 * np.pi / w)).astype(int)
        return np.mod(col, w)

    def ray_directions(self) -> np.ndarray:
        """Unit ray direction per pixel, (H, W, 3), sensor frame (x fwd, z up)."""
        az = self.azimuths()[None, :]
        el = self.elevations()[:, None]
        ce = np.cos(el)
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = ce * np.cos(az)
        d[..., 1] = ce * np.sin(az)
        d[..., 2] = np.broadcast_to(np.sin(el), (self.height, self.width))
        return d

    def points(self, include_max_range: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Sensor-frame 3-D points for valid pixels.

        Returns (points (N, 3), mask (H, W)). Max-range sentinel pixels are
        excluded unless requested.
        """
        valid = np.isfinite(self.ranges)
        if not include_max_range:
            valid &= self.ranges < self.max_range - 1e-9
        d = self.ray_directions()
        pts = d[valid] * self.ranges[valid][:, None]
        return pts, valid

    def valid_mask(self) -> np.ndarray:
        """Pixels carrying a real surface range (neither unknown nor max-range)."""
        return np.isfinite(self.ranges) & (self.ranges < self.max_range - 1e-9)

    def copy(self) -> DepthPanorama:
        return DepthPanorama(
            self.ranges.copy(), self.max_range, self.vfov,
            confidence=self.confidence.copy(),
            normals=None if self.normals is None else self.normals.copy(),
        )

    def compute_normals(self) -> np.ndarray:
        """Estimate per-pixel surface normals from the range image.

        Normals are unit vectors in the sensor frame, oriented to face the
        sensor (n . p < 0). Pixels without a valid neighborhood get NaN.
        """
        d = self.ray_directions()
        r = np.where(self.valid_mask(), self.ranges, np.nan)
        p = d * r[..., None]
        # Central differences; azimuth axis wraps.
        dpa = (np.roll(p, -1, axis=1) - np.roll(p, 1, axis=1)) / 2.0
        dpe = np.empty_like(p)
        dpe[1:-1] = (p[2:] - p[:-2]) / 2.0
        dpe[0] = p[1] - p[0]
        dpe[-1] = p[-1] - p[-2]
        n = np.cross(dpa, dpe)
        norm = np.linalg.norm(n, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            n = n / norm[..., None]
        # orient toward sensor
        flip = np.nansum(n * p, axis=-1) > 0
        n[flip] = -n[flip]
        bad = ~np.isfinite(norm) | (norm < 1e-12)
        n[bad] = np.nan
        self.normals = n
        return n
