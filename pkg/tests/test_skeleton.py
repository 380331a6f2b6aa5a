import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation
from scipy.special import softmax

from rigfield import geomcore as gc
from rigfield.gradtape import InvalidInput, ParamStore
from rigfield.neuralfield import AnalyticField, box_sdf, capsule_sdf, sphere_sdf
from rigfield.skeleton import (BoneDescriptor, EmptyMesh, Mesh, bone_features, build_skeleton, marching_cubes,
                               morphological_correlation, range_stats, semantic_correlation)
from rigfield.synthetic import three_bone_scene, two_bone_scene
from rigfield.warpfield import ScriptedTrack


def desc(features):
    return [BoneDescriptor(np.asarray(f, dtype=float), 1.0) for f in features]


def random_mesh(rng, n_verts=12, n_faces=20):
    return Mesh(rng.normal(size=(n_verts, 3)), rng.integers(0, n_verts, (n_faces, 3)))


# marching cubes

def test_sphere_vertices_near_radius():
    mesh = marching_cubes(AnalyticField(sphere_sdf(0.5)), 64)
    cell = 2.0 / 63
    assert np.all(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5) < 2 * cell)


def test_empty_field_raises():
    with pytest.raises(EmptyMesh):
        marching_cubes(AnalyticField(lambda X: np.ones(len(X))), 16)
    with pytest.raises(InvalidInput):
        marching_cubes(AnalyticField(sphere_sdf(0.5)), 4)


def test_box_is_watertight():
    mesh = marching_cubes(AnalyticField(box_sdf([0.4, 0.3, 0.5])), 32)
    assert len(mesh.vertices) > 0 and mesh.is_watertight()


def test_mesh_edges_unique_and_valid():
    mesh = marching_cubes(AnalyticField(sphere_sdf(0.4)), 16)
    E = mesh.edges
    assert np.all(E[:, 0] < E[:, 1]) and E.max() < len(mesh.vertices)
    assert len(np.unique(E, axis=0)) == len(E) > 0


# bone features

def test_shared_feature_everywhere():
    rng = np.random.default_rng(0)
    mesh = random_mesh(rng)
    f = rng.normal(size=16)
    S = softmax(rng.normal(size=(12, 3)), axis=1)
    for d in bone_features(mesh, None, None, weights=S, features=np.tile(f, (12, 1))):
        assert np.allclose(d.feature, f)


def test_one_hot_is_mean_of_own_vertices():
    rng = np.random.default_rng(1)
    mesh = random_mesh(rng)
    label = np.arange(12) % 3
    psi = rng.normal(size=(12, 16))
    out = bone_features(mesh, None, None, weights=np.eye(3)[label], features=psi)
    for b in range(3):
        assert np.allclose(out[b].feature, psi[label == b].mean(0))


def test_half_split_recovers_side_features():
    mesh = random_mesh(np.random.default_rng(2), 10)
    fa, fb = np.eye(16)[0], np.eye(16)[1]
    S = np.eye(2)[[0] * 5 + [1] * 5]
    out = bone_features(mesh, None, None, weights=S, features=np.array([fa] * 5 + [fb] * 5))
    assert np.allclose(out[0].feature, fa) and np.allclose(out[1].feature, fb)


def test_orphan_flag_and_scale_invariance():
    rng = np.random.default_rng(3)
    mesh = random_mesh(rng)
    S = np.column_stack([softmax(rng.normal(size=(12, 2)), axis=1), np.zeros(12)])
    psi = rng.normal(size=(12, 16))
    a = bone_features(mesh, None, None, weights=S, features=psi)
    b = bone_features(mesh, None, None, weights=S * 7.5, features=psi)
    assert a[2].orphan and not a[0].orphan
    for x, y in zip(a[:2], b[:2]):
        assert np.allclose(x.feature, y.feature)


# semantic correlation

def test_identical_features_uniform_rows():
    G = semantic_correlation(desc([np.ones(16)] * 4))
    assert np.allclose(G, 0.25)


def test_orthogonal_pair_softmax():
    G = semantic_correlation(desc(np.eye(16)[:2]))
    e = np.e / (np.e + 1)
    assert np.allclose(G, [[e, 1 - e], [1 - e, e]])
    assert G[0, 0] == pytest.approx(0.731, abs=1e-3)


def test_zero_feature_and_orphan_rejected():
    with pytest.raises(InvalidInput):
        semantic_correlation(desc([np.zeros(16), np.ones(16)]))
    with pytest.raises(InvalidInput):
        semantic_correlation([BoneDescriptor(np.ones(16), 0.0, True)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_semantic_rows_and_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(5, 16))
    G = semantic_correlation(desc(F))
    assert np.allclose(G.sum(1), 1.0)
    Q = np.linalg.qr(rng.normal(size=(16, 16)))[0]
    assert np.allclose(semantic_correlation(desc(F @ Q.T)), G)


# morphological correlation

def test_single_edge_outer_product():
    mesh = Mesh(np.zeros((3, 3)), [[0, 1, 0]])   # degenerate face yields the single edge (0, 1)
    assert mesh.edges.tolist() == [[0, 1]]
    M = morphological_correlation(mesh, weights=np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]))
    assert np.allclose(M, [[0, 1], [1, 0]])


def test_one_hot_internal_edges_zero_off_diagonal():
    verts = np.random.default_rng(4).normal(size=(6, 3))
    mesh = Mesh(verts, [[0, 1, 2], [3, 4, 5]])
    M = morphological_correlation(mesh, weights=np.eye(2)[[0, 0, 0, 1, 1, 1]])
    assert M[0, 1] == M[1, 0] == 0 and M[0, 0] > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_morphological_bounds_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    mesh = random_mesh(rng, 8, 10)
    S = softmax(rng.normal(size=(8, 4)) * 3, axis=1)
    M = morphological_correlation(mesh, weights=S)
    assert np.all((M >= 0) & (M <= 1)) and np.array_equal(M, M.T)
    # brute force over edges
    E = mesh.edges
    A = sum(np.outer(S[i], S[j]) for i, j in E)
    assert np.allclose(np.maximum(np.sqrt(A), np.sqrt(A).T) / len(E), M)


# build_skeleton

def test_all_below_threshold_gives_empty_graph():
    G = np.full((3, 3), 1 / 3)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        g = build_skeleton(G, np.zeros((3, 3)), "fixed", alpha=1.0, xi=0.1)
    assert g.edges == {} and g.orphans == [0, 1, 2] and g.warning


def test_alpha_zero_uses_g_only():
    G = softmax(np.random.default_rng(5).normal(size=(3, 3)), axis=1)
    M = np.array([[0, 0.5, 0.01], [0.5, 0, 0.4], [0.01, 0.4, 0]])
    g = build_skeleton(G, M, "fixed", alpha=0.0, xi=0.1)
    assert g.edge_list() == [(0, 1), (1, 2)]
    assert g.edges[(0, 1)] == pytest.approx(0.5 * (G[0, 1] + G[1, 0]))


def test_auto_threshold_keeps_top_fraction():
    G = np.full((3, 3), 1 / 3)
    M = np.array([[0, 0.5, 0.01], [0.5, 0, 0.4], [0.01, 0.4, 0]])
    g = build_skeleton(G, M)
    assert g.edge_list() == [(0, 1), (1, 2)] and g.alpha == 0.0 and not g.warning
    assert g.xi == pytest.approx(np.quantile([0.5, 0.01, 0.4], 0.2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_raising_threshold_never_adds_edges(seed, xi1, xi2):
    rng = np.random.default_rng(seed)
    M = rng.uniform(0, 0.5, (5, 5))
    M = np.maximum(M, M.T)
    G = softmax(rng.normal(size=(5, 5)), axis=1)
    lo, hi = sorted((xi1, xi2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = set(build_skeleton(G, M, "fixed", alpha=1.0, xi=lo).edges)
        b = set(build_skeleton(G, M, "fixed", alpha=1.0, xi=hi).edges)
    assert b <= a


def scene_skeleton(scene, mesh_res=48):
    """Skeleton from exact geometry: soft weights from per-bone capsule distance."""
    mesh = scene.mesh(0.0, mesh_res)
    d = np.stack([np.min([capsule_sdf(mesh.vertices, c.a, c.b, c.radius) for c in scene.capsules if c.bone == b],
                         axis=0) for b in range(scene.n_bones)], -1)
    S = softmax(-d / 0.03, axis=1)
    out = bone_features(mesh, None, None, weights=S, features=S @ scene.features)
    G = semantic_correlation(out)
    M = morphological_correlation(mesh, weights=S)
    return build_skeleton(G, M)


def test_two_bone_capsule_single_edge():
    assert scene_skeleton(two_bone_scene()).edge_list() == [(0, 1)]


def test_three_bone_chain_two_edges():
    assert scene_skeleton(three_bone_scene()).edge_list() == [(0, 1), (1, 2)]


# range statistics

def scripted_track(per_frame):
    """``per_frame[f][b] = (rotvec, translation)``."""
    real = np.zeros((len(per_frame), len(per_frame[0]), 4))
    dual = np.zeros_like(real)
    for f, bones in enumerate(per_frame):
        for b, (rv, t) in enumerate(bones):
            x, y, z, w = Rotation.from_rotvec(rv).as_quat()
            real[f, b], dual[f, b] = gc.dq_from_rt(np.array([w, x, y, z]), np.asarray(t, dtype=float))
    times = np.linspace(0, 1, len(per_frame))
    fn = lambda ts: (real[np.searchsorted(times, ts)], dual[np.searchsorted(times, ts)])
    return ScriptedTrack(ParamStore(), fn, np.zeros((len(per_frame[0]), 3))), times


def test_static_rig_degenerate_range():
    track, times = scripted_track([[([0, 0, 0.3], [0, 0, 0]), ([0, 0, 0], [1, 0, 0])]] * 3)
    r = range_stats(track, (0, 1), times)
    assert r.t_min == r.t_max == pytest.approx(1.0)
    assert r.a_min == r.a_max == pytest.approx(0.3)


def test_single_frame_range():
    track, times = scripted_track([[([0, 0, 0], [0, 0, 0]), ([0.2, 0, 0], [0, 2, 0])]])
    r = range_stats(track, (0, 1), times)
    assert r.t_min == r.t_max and r.a_min == r.a_max


def test_two_frame_translation_range():
    track, times = scripted_track([[([0, 0, 0], [0, 0, 0]), ([0, 0, 0], [1, 0, 0])],
                                   [([0, 0, 0], [0, 0, 0]), ([0, 0, 0], [2, 0, 0])]])
    r = range_stats(track, (0, 1), times)
    assert (r.t_min, r.t_max) == (pytest.approx(1.0), pytest.approx(2.0))
    # the angle carries a 1e-18 smoothing term under its square root
    assert r.a_min == pytest.approx(0.0, abs=1e-8) and r.a_max == pytest.approx(0.0, abs=1e-8)
