import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from raypath.geometry import (
    CoincidentEndpointsError,
    DegenerateFacetError,
    Facet,
    Scene,
    SceneParseError,
    ZeroVarianceError,
    facet_normal,
    featurize,
    load_scene,
    normalize_scene,
    save_scene,
    scene_features,
)
from raypath.trainpipe.canyon import generate_canyon_scene

from conftest import random_scene, random_similarity


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_load_single_facet(tmp_path):
    f = write_json(tmp_path / "s.json", {"tx": [0, 0, 1], "rx": [1, 1, 1], "objects": [[[0, 0, 0], [1, 0, 0], [0, 1, 0]]]})
    scene = load_scene(f)
    assert len(scene) == 1
    assert scene.facets[0].id == 0
    np.testing.assert_array_equal(scene.facets[0].vertices, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_unknown_keys_are_ignored(tmp_path):
    f = write_json(
        tmp_path / "s.json",
        {"tx": [0, 0, 1], "rx": [1, 1, 1], "objects": [[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], "name": "x"},
    )
    assert len(load_scene(f)) == 1


def test_load_rejects_collinear_facet(tmp_path):
    f = write_json(tmp_path / "s.json", {"tx": [0, 0, 1], "rx": [1, 1, 1], "objects": [[[0, 0, 0], [1, 0, 0], [2, 0, 0]]]})
    with pytest.raises(DegenerateFacetError):
        load_scene(f)


@pytest.mark.parametrize(
    "payload",
    [
        "{not json",
        json.dumps({"tx": [0, 0], "rx": [1, 1, 1], "objects": [[[0, 0, 0], [1, 0, 0], [0, 1, 0]]]}),
        json.dumps({"tx": [0, 0, 1], "rx": [1, 1, 1], "objects": [[[0, 0, 0], [1, 0, 0]]]}),
        json.dumps({"tx": [0, 0, 1], "objects": []}),
        json.dumps([1, 2, 3]),
    ],
)
def test_load_parse_errors(tmp_path, payload):
    f = tmp_path / "s.json"
    f.write_text(payload)
    with pytest.raises(SceneParseError):
        load_scene(f)


def test_tx_equal_rx_rejected():
    with pytest.raises(CoincidentEndpointsError):
        Scene.from_arrays([1, 1, 1], [1, 1, 1], [[[0, 0, 0], [1, 0, 0], [0, 1, 0]]])


def test_canyon_scene_round_trip_is_bit_identical(tmp_path):
    scene = generate_canyon_scene(7)
    save_scene(scene, tmp_path / "c.json")
    back = load_scene(tmp_path / "c.json")
    assert back.tx.tobytes() == scene.tx.tobytes()
    assert back.rx.tobytes() == scene.rx.tobytes()
    assert back.triangles.tobytes() == scene.triangles.tobytes()


# ------------------------------------------------------------------- normals


def test_facet_normal_xy_plane():
    np.testing.assert_array_equal(facet_normal(Facet(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]]))), [0, 0, 1])


def test_facet_normal_reversed_winding():
    np.testing.assert_array_equal(facet_normal(Facet(np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0]]))), [0, 0, -1])


def test_facet_normal_unit_flip_and_cyclic():
    rng = np.random.default_rng(3)
    for _ in range(100):
        v = rng.normal(size=(3, 3))
        n = facet_normal(Facet(v))
        assert abs(np.linalg.norm(n) - 1) < 1e-12
        np.testing.assert_allclose(facet_normal(Facet(v[::-1])), -n, atol=1e-12)
        np.testing.assert_allclose(facet_normal(Facet(v[[1, 2, 0]])), n, atol=1e-12)
        assert abs(n @ (v[1] - v[0])) < 1e-12 * np.linalg.norm(v[1] - v[0])


# ------------------------------------------------------------- normalization


def test_normalize_fixed_point():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(2 + 3 * 4, 3))
    pts -= pts.mean(axis=0)
    pts /= np.sqrt(np.mean(pts**2))
    scene = Scene.from_arrays(pts[0], pts[1], pts[2:].reshape(-1, 3, 3))
    ns = normalize_scene(scene)
    np.testing.assert_allclose(ns.centroid, 0, atol=1e-15)
    assert abs(ns.scale - 1) < 1e-12
    np.testing.assert_allclose(ns.scene.points, scene.points, atol=1e-12)


def test_normalize_translation_and_scaling():
    rng = np.random.default_rng(1)
    scene = random_scene(rng, 5)
    base = normalize_scene(scene).scene.points
    shifted = normalize_scene(scene.transformed(lambda p: p + 5.0)).scene.points
    scaled = normalize_scene(scene.transformed(lambda p: p * 7.3)).scene.points
    np.testing.assert_allclose(shifted, base, atol=1e-12)
    np.testing.assert_allclose(scaled, base, atol=1e-9)


def test_normalized_invariants():
    rng = np.random.default_rng(2)
    for _ in range(20):
        ns = normalize_scene(random_scene(rng, int(rng.integers(1, 10))).transformed(random_similarity(rng)))
        pts = ns.scene.points
        np.testing.assert_allclose(pts.mean(axis=0), 0, atol=1e-9)
        assert abs(pts.std() - 1) < 1e-9


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2 + 3 * 3, 3), elements=finite))
def test_normalize_round_trip(pts):
    try:
        scene = Scene.from_arrays(pts[0], pts[1], pts[2:].reshape(-1, 3, 3))
    except (DegenerateFacetError, CoincidentEndpointsError):
        return
    ns = normalize_scene(scene)
    back = ns.denormalize(ns.scene.points)
    np.testing.assert_allclose(back, scene.points, rtol=1e-9, atol=1e-9 * ns.scale)


def test_zero_variance_error():
    # Unreachable through Scene (tx != rx), so exercise the guard through a stub.
    class Flat:
        points = np.ones((5, 3))

    with pytest.raises(ZeroVarianceError):
        normalize_scene(Flat())


# ------------------------------------------------------------- featurization


def test_features_shapes_and_sign():
    feat = scene_features(random_scene(np.random.default_rng(4), 6))
    assert feat.per_facet.shape == (6, 14)
    assert feat.global_.shape == (3,)
    assert np.all(feat.per_facet >= 0) and np.all(feat.global_ >= 0)
    assert feat.object_inputs().shape == (6, 17)


def test_features_permute_with_facets():
    rng = np.random.default_rng(5)
    scene = random_scene(rng, 7)
    perm = rng.permutation(7)
    a = scene_features(scene)
    b = scene_features(scene.subset(perm))
    np.testing.assert_allclose(b.per_facet, a.per_facet[perm], atol=1e-12)
    np.testing.assert_allclose(b.global_, a.global_, atol=1e-12)


def test_features_by_hand_mirror_scene(mirror_scene):
    # Stacked points: tx, rx and the floor vertices; centroid and pooled std by hand.
    pts = np.array([[0, 0, 1], [2, 0, 1], [-10, -10, 0], [10, -10, 0], [0, 10, 0]], dtype=float)
    c = pts.sum(axis=0) / 5  # (0.4, -2, 0.4)
    s = np.sqrt(((pts - c) ** 2).sum() / 15)
    tx, rx = (pts[0] - c) / s, (pts[1] - c) / s
    verts = (pts[2:] - c) / s
    expected = []
    for v in verts:
        expected += [np.linalg.norm(v - tx), np.linalg.norm(v - rx), np.linalg.norm(v)]
    expected += [
        np.linalg.norm(verts[1] - verts[0]),
        np.linalg.norm(verts[2] - verts[1]),
        np.linalg.norm(verts[0] - verts[2]),
    ]
    # Floor plane z=0 maps to z=-0.4/s; TX and RX sit at height 1/s above it.
    expected += [1 / s, 1 / s]
    feat = featurize(normalize_scene(mirror_scene))
    np.testing.assert_allclose(feat.per_facet[0], expected, atol=1e-12)
    np.testing.assert_allclose(feat.global_, [2 / s, np.linalg.norm(tx), np.linalg.norm(rx)], atol=1e-12)


def test_features_invariant_under_similarities():
    rng = np.random.default_rng(6)
    scene = random_scene(rng, 9)
    ref = scene_features(scene)
    for _ in range(100):
        moved = scene_features(scene.transformed(random_similarity(rng)))
        assert np.max(np.abs(moved.per_facet - ref.per_facet)) <= 1e-8
        assert np.max(np.abs(moved.global_ - ref.global_)) <= 1e-8
