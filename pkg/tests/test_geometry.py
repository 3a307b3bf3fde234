import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radargate.gates import RotationParams, StretchParams, apply_rotation
from radargate.geometry import cone_project, escape_probe, in_cone, rotated_outputs
from radargate.layer import RadarLayer
from radargate.lora import FrozenBase, LoraBank, LoraModule
from radargate.numkernel import Rng

seeds = st.integers(0, 2 ** 32 - 1)


def grid_distance_1simplex(target, v1, v2, step=1e-4):
    t = np.arange(0.0, 1.0 + step / 2, step)[:, None]
    pts = t * v1 + (1 - t) * v2
    return np.linalg.norm(pts - target, axis=1).min()


def grid_distance_2simplex(target, v, step=2e-3):
    best = np.inf
    for a in np.arange(0.0, 1.0 + step / 2, step):
        b = np.arange(0.0, 1.0 - a + step / 2, step)
        c = np.clip(1.0 - a - b, 0.0, None)
        pts = a * v[0] + b[:, None] * v[1] + c[:, None] * v[2]
        best = min(best, np.linalg.norm(pts - target, axis=1).min())
    return best


def test_singleton_hull():
    v = np.array([[1.0, 2.0, -1.0]])
    t = np.array([0.0, 0.5, 3.0])
    res = cone_project(t, v)
    assert res.g_star.tolist() == [1.0]
    assert res.distance == pytest.approx(np.linalg.norm(t - v[0]), abs=1e-15)


def test_vertex_target():
    v = Rng(1).normal((4, 5))
    res = cone_project(v[1], v)
    assert res.distance < 1e-9
    assert np.allclose(res.g_star, np.eye(4)[1], atol=1e-9)


def test_unit_square_corner_against_grid():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    t = np.array([1.0, 1.0])
    res = cone_project(t, v)
    grid = grid_distance_1simplex(t, v[0], v[1])
    assert abs(res.distance - np.sqrt(0.5)) < 1e-6
    assert abs(res.distance - grid) < 1e-6
    assert np.allclose(res.point, [0.5, 0.5], atol=1e-6)
    assert np.allclose(res.g_star, [0.5, 0.5], atol=1e-6)
    assert res.converged


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        cone_project(np.ones(2), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        cone_project(np.ones(2), np.ones((2, 3)))
    with pytest.raises(ValueError):
        cone_project(np.ones(2), np.ones((2, 2)), tol=0.0)


def test_in_cone_examples():
    v = Rng(2).normal((4, 6))
    assert in_cone(v.mean(axis=0), v)
    E = np.eye(3)
    assert not in_cone(2 * E[0], E)
    # affine combination with a negative weight leaves the hull
    t = 1.5 * E[0] - 0.5 * E[1]
    assert not in_cone(t, E, tol=1e-6)
    assert grid_distance_2simplex(t, E) > 1e-6


@given(seeds, st.integers(1, 8), st.integers(1, 6))
def test_projection_invariants(seed, n, d):
    rng = Rng(seed)
    v = rng.normal((n, d))
    t = rng.normal(d) * 2
    res = cone_project(t, v)
    assert np.all(res.g_star >= 0) and abs(res.g_star.sum() - 1) < 1e-9
    assert np.allclose(res.point, res.g_star @ v, atol=1e-9)
    assert res.distance == pytest.approx(np.linalg.norm(t - res.point), abs=1e-12)


@given(seeds, st.integers(2, 8), st.integers(1, 6))
def test_projection_beats_random_simplex_points(seed, n, d):
    rng = Rng(seed)
    v = rng.normal((n, d))
    t = rng.normal(d) * 2
    res = cone_project(t, v)
    w = np.vstack([rng.dirichlet(n) for _ in range(2000)])
    assert res.distance <= np.linalg.norm(w @ v - t, axis=1).min() + 1e-12


@given(seeds, st.integers(2, 10), st.integers(2, 8))
def test_frank_wolfe_monotone(seed, n, d):
    rng = Rng(seed)
    v = rng.normal((n, d))
    res = cone_project(rng.normal(d), v, record=True)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-12 * max(1.0, h[0]))


def test_rotated_singleton_circle_geometry():
    # rotating one 2-D vector sweeps a circle: the best distance is | |t| - |v| |
    v = np.array([0.6, -0.3])
    t = np.array([1.5, 2.0])
    angles = np.linspace(-np.pi, np.pi, 20001)
    best = min(cone_project(t, apply_rotation(v, np.array([a]))[None]).distance for a in angles[::10])
    assert abs(best - abs(np.linalg.norm(t) - np.linalg.norm(v))) < 1e-3


def two_expert_layer(v1, v2):
    """d_in = d_out = 2, rank-1 experts with x = e_1 giving outputs v1, v2; W = 0."""
    A = np.array([[1.0], [0.0]])
    bank = LoraBank([LoraModule(A, np.asarray(v1, float)[None]), LoraModule(A, np.asarray(v2, float)[None])])
    stretch = StretchParams(np.zeros((4, 2)), k=2)
    return RadarLayer(FrozenBase(np.zeros((2, 2))), bank, stretch, RotationParams.zeros(2))


def test_escape_near_collinear_pair():
    layer = two_expert_layer([1.0, 0.0], [0.9, 0.1])
    x = np.array([1.0, 0.0])
    target = np.array([0.0, 1.0])
    # both relation vectors equal (0.9, 0), so one angle alpha = 0.9 * theta[0, 0] drives both
    grid = np.linspace(-np.pi, np.pi, 4001)
    v = np.array([[1.0, 0.0], [0.9, 0.1]])
    oracle = min(cone_project(target, np.array([apply_rotation(r, np.array([a])) for r in v])).distance
                 for a in grid)
    res = escape_probe(layer, x, target, 200, Rng(3))
    assert res.base_distance > 0.9
    assert res.best_rotated_distance < 0.1
    assert res.success
    assert res.best_rotated_distance >= oracle - 1e-9
    vt = rotated_outputs(layer, x, res.witness_theta_r)
    assert cone_project(target, vt).distance == pytest.approx(res.best_rotated_distance, abs=1e-12)


def test_escape_with_identity_only():
    layer = two_expert_layer([1.0, 0.0], [0.9, 0.1])
    res = escape_probe(layer, np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1, Rng(4),
                       candidates=[np.zeros((2, 1))])
    assert res.best_rotated_distance == res.base_distance
    assert not res.success


def test_escape_rejects_inside_target():
    layer = two_expert_layer([1.0, 0.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        escape_probe(layer, np.array([1.0, 0.0]), np.array([0.5, 0.5]), 10, Rng(5))


def test_near_collinear_escape_rate():
    wins = 0
    runs = 40
    for seed in range(runs):
        rng = Rng(seed)
        phi = rng.uniform(0, 2 * np.pi)
        v1 = np.array([np.cos(phi), np.sin(phi)])
        v2 = 0.9 * np.array([np.cos(phi + 0.1), np.sin(phi + 0.1)])
        psi = phi + rng.uniform(np.pi / 4, 7 * np.pi / 4)
        target = np.array([np.cos(psi), np.sin(psi)])
        layer = two_expert_layer(v1, v2)
        res = escape_probe(layer, np.array([1.0, 0.0]), target, 200, rng.spawn(1))
        wins += res.success
    assert wins / runs >= 0.95
