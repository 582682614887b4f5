"""Procedural street-canyon scenes.

Two rows of box buildings flank a straight street running along +y, on a
rectangular ground plate. Walls and roofs are split into two triangles each
(bottoms are never visible and are left out), so a building contributes ten
facets and the ground two. TX and RX are drawn inside the open canyon volume,
then a random number of facets is deleted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from ..geometry import Scene


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class CanyonParams:
    street_width: tuple[float, float] = (12.0, 20.0)
    buildings_per_side: tuple[int, int] = (3, 4)
    building_length: tuple[float, float] = (8.0, 16.0)
    building_depth: tuple[float, float] = (8.0, 14.0)
    building_height: tuple[float, float] = (10.0, 30.0)
    gap: tuple[float, float] = (0.0, 4.0)
    r_max: int = 5
    margin: float = 0.5
    min_separation: float = 1.0
    max_retries: int = 100

    def __post_init__(self):
        for name in ("street_width", "buildings_per_side", "building_length", "building_depth", "building_height", "gap"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name}: invalid range ({lo}, {hi})")
        if self.buildings_per_side[0] < 1:
            raise ValueError("need at least one building per side")
        if self.building_height[0] <= 0 or self.building_length[0] <= 0 or self.building_depth[0] <= 0:
            raise ValueError("building dimensions must be positive")
        if self.r_max < 0 or self.margin < 0 or self.min_separation < 0 or self.max_retries < 1:
            raise ValueError("r_max, margin, min_separation must be >= 0 and max_retries >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CanyonParams":
        kw = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise ValueError(f"unknown scene parameter {k!r}")
            kw[k] = tuple(v) if isinstance(v, (list, tuple)) else v
        return cls(**kw)

    @property
    def full_facet_range(self) -> tuple[int, int]:
        lo, hi = self.buildings_per_side
        return 20 * lo + 2, 20 * hi + 2


def _quad(a, b, c, d) -> list[np.ndarray]:
    return [np.array([a, b, c]), np.array([a, c, d])]


def box_facets(x0: float, x1: float, y0: float, y1: float, h: float) -> list[np.ndarray]:
    """Four walls and a roof of an axis-aligned box, outward-facing winding."""
    return (
        _quad((x0, y0, 0), (x0, y0, h), (x0, y1, h), (x0, y1, 0))
        + _quad((x1, y0, 0), (x1, y1, 0), (x1, y1, h), (x1, y0, h))
        + _quad((x0, y0, 0), (x1, y0, 0), (x1, y0, h), (x0, y0, h))
        + _quad((x0, y1, 0), (x0, y1, h), (x1, y1, h), (x1, y1, 0))
        + _quad((x0, y0, h), (x1, y0, h), (x1, y1, h), (x0, y1, h))
    )


def _uniform(rng, bounds) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _row(rng, params: CanyonParams, x_near: float, side: int) -> tuple[list[np.ndarray], float, float, float]:
    """One row of buildings; returns facets, row length, max depth and min height."""
    count = int(rng.integers(params.buildings_per_side[0], params.buildings_per_side[1] + 1))
    facets: list[np.ndarray] = []
    y = 0.0
    depth_max, height_min = 0.0, np.inf
    for i in range(count):
        if i:
            y += _uniform(rng, params.gap)
        length = _uniform(rng, params.building_length)
        depth = _uniform(rng, params.building_depth)
        height = _uniform(rng, params.building_height)
        x_far = x_near + side * depth
        facets += box_facets(min(x_near, x_far), max(x_near, x_far), y, y + length, height)
        y += length
        depth_max = max(depth_max, depth)
        height_min = min(height_min, height)
    return facets, y, depth_max, height_min


@dataclass(frozen=True, eq=False)
class CanyonSample:
    scene: Scene
    n_full: int
    removed: int


def generate_canyon_scene(rng, params: CanyonParams | None = None) -> Scene:
    """Random street canyon with TX/RX inside the street and up to ``r_max`` facets removed."""
    return sample_canyon(rng, params).scene


def sample_canyon(rng, params: CanyonParams | None = None) -> CanyonSample:
    params = params or CanyonParams()
    rng = np.random.default_rng(rng)
    width = _uniform(rng, params.street_width)
    left, len_l, depth_l, h_l = _row(rng, params, -width / 2, -1)
    right, len_r, depth_r, h_r = _row(rng, params, width / 2, +1)
    length = max(len_l, len_r)
    x_ext = width / 2 + max(depth_l, depth_r)
    ground = _quad((-x_ext, 0, 0), (x_ext, 0, 0), (x_ext, length, 0), (-x_ext, length, 0))
    triangles = ground + left + right

    m = params.margin
    lo = np.array([-width / 2 + m, m, m])
    hi = np.array([width / 2 - m, min(len_l, len_r) - m, min(h_l, h_r) - m])
    if np.any(hi <= lo):
        raise PlacementError("canyon volume is empty after margins")
    for _ in range(params.max_retries):
        tx = rng.uniform(lo, hi)
        rx = rng.uniform(lo, hi)
        if np.linalg.norm(tx - rx) >= params.min_separation:
            break
    else:
        raise PlacementError(f"no TX/RX pair {params.min_separation} m apart after {params.max_retries} tries")

    n_full = len(triangles)
    removed = int(rng.integers(0, min(params.r_max, n_full - 1) + 1))
    keep = np.sort(rng.choice(n_full, size=n_full - removed, replace=False))
    return CanyonSample(Scene.from_arrays(tx, rx, [triangles[i] for i in keep]), n_full, removed)
