"""Image-method path construction and validity checks for specular reflections."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .geometry import Facet, Scene

PARALLEL_EPS = 1e-12
BARY_EPS = 1e-9
PLANE_EPS = 1e-9
SEG_EPS = 1e-9
SPECULAR_TOL = 1e-9
K_MAX = 3


class DegenerateGeometryError(ValueError):
    """Raised when a back-traced segment runs parallel to its facet plane."""


class CandidateError(ValueError):
    pass


@dataclass(frozen=True)
class PathCandidate:
    """Ordered facet indices a prospective ray reflects on."""

    facet_ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.facet_ids)
        if not ids:
            raise CandidateError("a candidate needs at least one interaction")
        if any(i < 0 for i in ids):
            raise CandidateError(f"negative facet id in {ids}")
        if any(a == b for a, b in zip(ids, ids[1:])):
            raise CandidateError(f"consecutive repeat in {ids}")
        object.__setattr__(self, "facet_ids", ids)

    def __len__(self) -> int:
        return len(self.facet_ids)

    def __iter__(self):
        return iter(self.facet_ids)

    def __str__(self) -> str:
        return ",".join(map(str, self.facet_ids))

    @classmethod
    def parse(cls, text: str) -> "PathCandidate":
        return cls(tuple(int(t) for t in text.split(",") if t.strip()))


def as_candidate(cand) -> PathCandidate:
    return cand if isinstance(cand, PathCandidate) else PathCandidate(tuple(cand))


@dataclass(frozen=True, eq=False)
class RayPath:
    points: np.ndarray  # (K + 2, 3)
    candidate: PathCandidate

    @property
    def interactions(self) -> np.ndarray:
        return self.points[1:-1]

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


class Failure(str, enum.Enum):
    NONE = "none"
    OFF_FACET = "off_facet"
    WRONG_SIDE = "wrong_side"
    OBSTRUCTED = "obstructed"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    failure: Failure

    @classmethod
    def ok(cls) -> "ValidityReport":
        return cls(True, Failure.NONE)

    @classmethod
    def fail(cls, failure: Failure) -> "ValidityReport":
        return cls(False, failure)


def mirror_point(p, f: Facet) -> np.ndarray:
    """Reflect ``p`` across the supporting plane of ``f``."""
    p = np.asarray(p, dtype=np.float64)
    n = f.normal
    return p - 2.0 * np.dot(p - f.vertices[0], n) * n


def image_chain(scene: Scene, cand: PathCandidate) -> np.ndarray:
    """Successive images of TX, one per interaction, as a (K, 3) array."""
    images = np.empty((len(cand), 3))
    img = scene.tx
    for k, fid in enumerate(cand.facet_ids):
        img = mirror_point(img, scene.facets[fid])
        images[k] = img
    return images


def trace_path(scene: Scene, cand) -> RayPath:
    """Build the geometric path for ``cand`` with the image method.

    The returned points are not validated; see :func:`validate_path`.
    """
    cand = as_candidate(cand)
    n_fac = len(scene.facets)
    if max(cand.facet_ids) >= n_fac:
        raise CandidateError(f"facet id out of range for a scene with {n_fac} facets")
    images = image_chain(scene, cand)
    k_len = len(cand)
    points = np.empty((k_len + 2, 3))
    points[0] = scene.tx
    points[-1] = scene.rx
    current = scene.rx
    for k in range(k_len - 1, -1, -1):
        f = scene.facets[cand.facet_ids[k]]
        n = f.normal
        direction = images[k] - current
        length = np.linalg.norm(direction)
        if length == 0.0:
            raise DegenerateGeometryError(f"interaction {k}: point coincides with its image")
        denom = np.dot(direction / length, n)
        if abs(denom) < PARALLEL_EPS:
            raise DegenerateGeometryError(f"interaction {k}: segment parallel to facet {f.id}")
        t = np.dot(f.vertices[0] - current, n) / (denom * length)
        current = current + t * direction
        points[k + 1] = current
    return RayPath(points, cand)


def barycentric(p, f: Facet) -> np.ndarray:
    v = f.vertices
    e1, e2, w = v[1] - v[0], v[2] - v[0], np.asarray(p, dtype=np.float64) - v[0]
    d11, d12, d22 = e1 @ e1, e1 @ e2, e2 @ e2
    dw1, dw2 = w @ e1, w @ e2
    den = d11 * d22 - d12 * d12
    b1 = (d22 * dw1 - d12 * dw2) / den
    b2 = (d11 * dw2 - d12 * dw1) / den
    return np.array([1.0 - b1 - b2, b1, b2])


def point_in_facet(p, f: Facet) -> bool:
    """Boundary-inclusive test for a point lying (close to) the facet plane."""
    b = barycentric(p, f)
    return bool(np.all(b >= -BARY_EPS) and np.all(b <= 1.0 + BARY_EPS))


def ray_triangles_intersect(origin, direction, triangles: np.ndarray) -> np.ndarray:
    """Möller-Trumbore against many triangles at once.

    Returns the ray parameter of each hit, ``nan`` for misses and for rays
    parallel to the triangle. Edges count as hits.
    """
    tris = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1) * np.linalg.norm(direction)
    ok = np.abs(det) > PARALLEL_EPS * scale
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    svec = origin - v0
    u = np.einsum("ij,ij->i", svec, pvec) * inv
    qvec = np.cross(svec, e1)
    v = (qvec @ direction) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = ok & (u >= -BARY_EPS) & (v >= -BARY_EPS) & (u + v <= 1.0 + BARY_EPS)
    return np.where(hit, t, np.nan)


def ray_facet_intersect(origin, direction, f: Facet) -> float | None:
    """Ray parameter ``t > 0`` of the hit with ``f``, or None."""
    if not np.linalg.norm(direction) > 0.0:
        raise ValueError("ray direction must be non-zero")
    t = ray_triangles_intersect(origin, direction, f.vertices[None])[0]
    if np.isnan(t) or t <= 0.0:
        return None
    return float(t)


def is_obstructed(scene, a, b, exclude: Iterable[int] = ()) -> bool:
    """Whether any facet outside ``exclude`` cuts the open segment ``(a, b)``.

    ``scene`` may be a :class:`Scene` or a bare (N, 3, 3) triangle array.
    Brute force over every facet.
    """
    tris = scene.triangles if isinstance(scene, Scene) else np.asarray(scene, dtype=np.float64)
    tris = tris.reshape(-1, 3, 3)
    if len(tris) == 0:
        return False
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = ray_triangles_intersect(a, b - a, tris)
    excl = list(exclude)
    if excl:
        t[excl] = np.nan
    with np.errstate(invalid="ignore"):
        blocked = (t > SEG_EPS) & (t < 1.0 - SEG_EPS)
    return bool(blocked.any())


def validate_path(scene: Scene, path: RayPath) -> ValidityReport:
    """Check, in order: points inside facets, specular reflection, occlusion."""
    pts = path.points
    ids = path.candidate.facet_ids
    k_len = len(ids)
    facets = [scene.facets[i] for i in ids]
    if not np.all(np.isfinite(pts)):
        return ValidityReport.fail(Failure.DEGENERATE)
    tol = PLANE_EPS * scene.length_scale

    for k, f in enumerate(facets):
        if not point_in_facet(pts[k + 1], f):
            return ValidityReport.fail(Failure.OFF_FACET)

    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    if np.any(seg_len <= tol):
        return ValidityReport.fail(Failure.DEGENERATE)
    unit = seg / seg_len[:, None]
    for k, f in enumerate(facets):
        n = f.normal
        side_in = np.dot(pts[k] - f.vertices[0], n)
        side_out = np.dot(pts[k + 2] - f.vertices[0], n)
        if side_in * side_out <= 0.0 or abs(side_in) <= tol or abs(side_out) <= tol:
            return ValidityReport.fail(Failure.WRONG_SIDE)
        d_in, d_out = unit[k], unit[k + 1]
        reflected = d_in - 2.0 * np.dot(d_in, n) * n
        if np.max(np.abs(reflected - d_out)) > SPECULAR_TOL:
            return ValidityReport.fail(Failure.WRONG_SIDE)

    for i in range(k_len + 1):
        exclude = []
        if i >= 1:
            exclude.append(ids[i - 1])
        if i < k_len:
            exclude.append(ids[i])
        if is_obstructed(scene, pts[i], pts[i + 1], exclude):
            return ValidityReport.fail(Failure.OBSTRUCTED)
    return ValidityReport.ok()


def trace_and_validate(scene: Scene, cand) -> tuple[RayPath | None, ValidityReport]:
    """Trace then validate; tracing degeneracies become a ``degenerate`` report."""
    try:
        path = trace_path(scene, cand)
    except DegenerateGeometryError:
        return None, ValidityReport.fail(Failure.DEGENERATE)
    return path, validate_path(scene, path)


def is_valid(scene: Scene, cand) -> bool:
    return trace_and_validate(scene, cand)[1].valid
