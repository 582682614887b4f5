"""Scene containers, JSON I/O, normalization and invariant featurization.

A scene is a transmitter, a receiver and an ordered list of triangles. The
model never sees raw coordinates: scenes are centred and divided by one pooled
standard deviation, then reduced to pairwise distances, which makes the
features exactly invariant to rotations, reflections, translations and uniform
scaling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

AREA_EPS = 1e-12

#: Per-facet feature width: 3 vertices x (|v-tx|, |v-rx|, |v|), 3 edges, 2 plane distances.
F_RAW = 14
#: Global feature width: |tx-rx|, |tx|, |rx|.
G_RAW = 3


class SceneError(ValueError):
    """Base class for invalid scene input."""


class SceneParseError(SceneError):
    pass


class DegenerateFacetError(SceneError):
    pass


class CoincidentEndpointsError(SceneError):
    pass


class ZeroVarianceError(SceneError):
    pass


def as_vec3(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.shape != (3,):
        raise SceneParseError(f"expected 3 coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SceneParseError(f"non-finite coordinate in {value!r}")
    return arr


def triangle_area(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    return 0.5 * float(np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0])))


@dataclass(frozen=True, eq=False)
class Facet:
    """A triangle with its index in scene order."""

    vertices: np.ndarray
    id: int = 0

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        if v.shape != (3, 3):
            raise SceneParseError(f"facet {self.id}: expected 3 vertices of 3 coordinates, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise SceneParseError(f"facet {self.id}: non-finite vertex")
        if triangle_area(v) <= AREA_EPS:
            raise DegenerateFacetError(f"facet {self.id}: area <= {AREA_EPS}")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @cached_property
    def normal(self) -> np.ndarray:
        return facet_normal(self)


def facet_normal(f: Facet) -> np.ndarray:
    """Unit normal following the right-hand rule on (v1 - v0) x (v2 - v0)."""
    v = f.vertices
    n = np.cross(v[1] - v[0], v[2] - v[0])
    norm = np.linalg.norm(n)
    if 0.5 * norm <= AREA_EPS:
        raise DegenerateFacetError(f"facet {f.id} is degenerate")
    return n / norm


@dataclass(frozen=True, eq=False)
class Scene:
    tx: np.ndarray
    rx: np.ndarray
    facets: tuple[Facet, ...]

    def __post_init__(self):
        tx, rx = as_vec3(self.tx), as_vec3(self.rx)
        if np.array_equal(tx, rx):
            raise CoincidentEndpointsError("tx and rx coincide")
        facets = tuple(self.facets)
        if not facets:
            raise SceneParseError("a scene needs at least one facet")
        for i, f in enumerate(facets):
            if f.id != i:
                raise SceneParseError(f"facet at position {i} has id {f.id}")
        tx.setflags(write=False)
        rx.setflags(write=False)
        object.__setattr__(self, "tx", tx)
        object.__setattr__(self, "rx", rx)
        object.__setattr__(self, "facets", facets)

    @classmethod
    def from_arrays(cls, tx, rx, triangles: Iterable) -> "Scene":
        facets = tuple(Facet(np.asarray(t, dtype=np.float64), i) for i, t in enumerate(triangles))
        return cls(tx, rx, facets)

    def __len__(self) -> int:
        return len(self.facets)

    @cached_property
    def triangles(self) -> np.ndarray:
        """All facet vertices stacked as an (N, 3, 3) array."""
        tris = np.stack([f.vertices for f in self.facets])
        tris.setflags(write=False)
        return tris

    @cached_property
    def normals(self) -> np.ndarray:
        return np.stack([f.normal for f in self.facets])

    @cached_property
    def points(self) -> np.ndarray:
        """TX, RX and every vertex stacked as a (2 + 3N, 3) array."""
        return np.concatenate([self.tx[None], self.rx[None], self.triangles.reshape(-1, 3)])

    @cached_property
    def length_scale(self) -> float:
        """Pooled standard deviation of all coordinates; the unit for relative tolerances."""
        pts = self.points
        return float(np.sqrt(np.mean((pts - pts.mean(axis=0)) ** 2)))

    def transformed(self, fn) -> "Scene":
        """Apply a point map ``fn: (M, 3) -> (M, 3)`` to TX, RX and every vertex."""
        pts = fn(self.points)
        return Scene.from_arrays(pts[0], pts[1], pts[2:].reshape(-1, 3, 3))

    def subset(self, keep: Sequence[int]) -> "Scene":
        """Scene with only the listed facets, renumbered in the given order."""
        return Scene.from_arrays(self.tx, self.rx, self.triangles[list(keep)])


# --------------------------------------------------------------------------- I/O


def scene_to_dict(scene: Scene) -> dict:
    return {
        "tx": scene.tx.tolist(),
        "rx": scene.rx.tolist(),
        "objects": scene.triangles.tolist(),
    }


def scene_from_dict(data) -> Scene:
    if not isinstance(data, dict):
        raise SceneParseError("scene JSON must be an object")
    try:
        tx, rx, objects = data["tx"], data["rx"], data["objects"]
    except KeyError as exc:
        raise SceneParseError(f"missing key {exc.args[0]!r}") from None
    if not isinstance(objects, list):
        raise SceneParseError("'objects' must be an array")
    tris = []
    for i, obj in enumerate(objects):
        try:
            tri = np.array(obj, dtype=np.float64)
        except (TypeError, ValueError):
            raise SceneParseError(f"object {i}: not a numeric array") from None
        if tri.shape != (3, 3):
            raise SceneParseError(f"object {i}: expected 3x3 coordinates, got shape {tri.shape}")
        tris.append(tri)
    try:
        tx_arr, rx_arr = as_vec3(tx), as_vec3(rx)
    except (TypeError, ValueError) as exc:
        raise SceneParseError(str(exc)) from None
    return Scene.from_arrays(tx_arr, rx_arr, tris)


def load_scene(path) -> Scene:
    """Read a scene JSON file (keys ``tx``, ``rx``, ``objects``)."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(f"malformed JSON: {exc}") from None
    return scene_from_dict(data)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)))


# ------------------------------------------------------------------ normalization


@dataclass(frozen=True, eq=False)
class NormalizedScene:
    scene: Scene
    centroid: np.ndarray
    scale: float

    def denormalize(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) * self.scale + self.centroid


def normalize_scene(scene: Scene) -> NormalizedScene:
    """Centre all coordinates on their mean and divide by one pooled standard deviation.

    TX and RX take part in the statistics together with every vertex.
    """
    pts = scene.points
    centroid = pts.mean(axis=0)
    centred = pts - centroid
    scale = math.sqrt(float(np.mean(centred**2)))
    if not scale > 0.0:
        raise ZeroVarianceError("all scene points coincide")
    unit = centred / scale
    ns = Scene.from_arrays(unit[0], unit[1], unit[2:].reshape(-1, 3, 3))
    return NormalizedScene(ns, centroid, scale)


# ------------------------------------------------------------------ featurization


@dataclass(frozen=True, eq=False)
class InvariantFeatures:
    per_facet: np.ndarray  # (N, F_RAW)
    global_: np.ndarray  # (G_RAW,)

    @property
    def n(self) -> int:
        return self.per_facet.shape[0]

    def object_inputs(self) -> np.ndarray:
        """Per-facet rows with the global vector appended, (N, F_RAW + G_RAW)."""
        g = np.broadcast_to(self.global_, (self.n, G_RAW))
        return np.concatenate([self.per_facet, g], axis=1)

    def permuted(self, perm) -> "InvariantFeatures":
        return InvariantFeatures(self.per_facet[np.asarray(perm)], self.global_)


def featurize(ns: NormalizedScene) -> InvariantFeatures:
    """Distance-only features of a normalized scene.

    Row ``i`` holds, for each vertex of facet ``i``, its distances to TX, RX
    and the origin, then the three edge lengths, then the unsigned distances
    of TX and RX to the facet plane.
    """
    s = ns.scene
    tris = s.triangles
    tx, rx = s.tx, s.rx
    d_tx = np.linalg.norm(tris - tx, axis=2)
    d_rx = np.linalg.norm(tris - rx, axis=2)
    d_o = np.linalg.norm(tris, axis=2)
    per_vertex = np.stack([d_tx, d_rx, d_o], axis=2).reshape(len(tris), 9)
    edges = np.linalg.norm(tris[:, [1, 2, 0]] - tris, axis=2)
    n = s.normals
    plane_tx = np.abs(np.einsum("ij,ij->i", tx - tris[:, 0], n))
    plane_rx = np.abs(np.einsum("ij,ij->i", rx - tris[:, 0], n))
    per_facet = np.concatenate([per_vertex, edges, plane_tx[:, None], plane_rx[:, None]], axis=1)
    global_ = np.array([np.linalg.norm(tx - rx), np.linalg.norm(tx), np.linalg.norm(rx)])
    return InvariantFeatures(per_facet, global_)


def scene_features(scene: Scene) -> InvariantFeatures:
    return featurize(normalize_scene(scene))
