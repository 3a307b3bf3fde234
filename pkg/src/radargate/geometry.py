"""Simplex-hull projection of a target onto expert outputs, and the
rotation cone-escape probe."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gates import RotationParams
from .layer import GateMode, RadarLayer, forward
from .numkernel import Rng, as_mat, as_vec


@dataclass
class ConeProjection:
    g_star: np.ndarray
    point: np.ndarray
    distance: float
    iterations: int
    converged: bool
    gap: float = float("nan")
    history: list = field(default_factory=list, repr=False)


def cone_project(target, v, tol: float = 1e-9, max_iter: int = 100_000,
                 record: bool = False) -> ConeProjection:
    """Closest point to ``target`` in conv{v_i} (rows of ``v``).

    Pairwise Frank-Wolfe on f(g) = ||target - g V||^2 over the simplex:
    each step moves mass from the worst active vertex to the Frank-Wolfe
    vertex with exact line search, so f never increases.  Stops once the
    Frank-Wolfe duality gap max_s <grad, g - e_s> drops below ``tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    target = as_vec(target, "target")
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError("need at least one expert output")
    if v.shape[1] != target.shape[0]:
        raise ValueError(f"expert outputs have length {v.shape[1]}, target has {target.shape[0]}")
    n = v.shape[0]
    gram = v @ v.T
    lin = v @ target

    # start at the vertex nearest the target
    g = np.zeros(n)
    g[int(np.argmin(np.diag(gram) - 2 * lin))] = 1.0
    grad = 2.0 * (gram @ g - lin)
    history = []
    it = 0
    converged = False
    while True:
        s = int(np.argmin(grad))
        gap = float(grad @ g - grad[s])
        if record:
            resid = target - g @ v
            history.append(float(resid @ resid))
        if gap < tol:
            converged = True
            break
        if it >= max_iter:
            break
        if it % 64 == 63:
            grad = 2.0 * (gram @ g - lin)  # refresh against drift
        active = np.flatnonzero(g > 0)
        a = int(active[np.argmax(grad[active])])
        if a == s:
            break
        slope = grad[s] - grad[a]
        curv = gram[s, s] + gram[a, a] - 2.0 * gram[s, a]
        gamma = g[a] if curv <= 0 else min(g[a], -slope / (2.0 * curv))
        if not gamma > 0:
            break
        drop = gamma >= g[a]
        g[s] += gamma
        g[a] = 0.0 if drop else g[a] - gamma
        grad += 2.0 * gamma * (gram[:, s] - gram[:, a])
        it += 1

    g = np.maximum(g, 0.0)
    g /= g.sum()
    point = g @ v
    dist = float(np.linalg.norm(target - point))
    return ConeProjection(g, point, dist, it, converged, gap, history)


def in_cone(target, v, tol: float = 1e-6) -> bool:
    return cone_project(target, v).distance < tol


@dataclass
class EscapeProbe:
    target: np.ndarray
    base_distance: float
    best_rotated_distance: float
    witness_theta_r: np.ndarray
    samples: int
    success: bool


def rotated_outputs(layer: RadarLayer, x, theta_r) -> np.ndarray:
    """v~_i at ``x`` for a candidate dense theta_r, all experts."""
    probe = layer.with_params(rotation=RotationParams(full=theta_r), mode=GateMode.ROTATION_ONLY)
    return forward(probe, x).v_tilde


def escape_probe(layer: RadarLayer, x, target, samples: int, rng: Rng, tol: float = 1e-9,
                 candidates: Optional[list] = None) -> EscapeProbe:
    """Search random theta_r for a rotated hull closer to ``target`` than the plain hull.

    ``target`` is a full layer output; the frozen base x W is subtracted so
    the comparison is against the hull of expert outputs.  Candidate entries
    are uniform in [-pi, pi] divided by the mean relation-vector norm, so the
    induced angles span roughly a full turn.
    """
    x = as_vec(x, "x")
    target = as_vec(target, "target")
    trace = forward(layer.with_params(mode=GateMode.ROTATION_ONLY), x)
    delta = target - trace.base_out
    base = cone_project(delta, trace.v, tol=tol)
    if base.distance <= tol:
        raise ValueError("target lies inside the un-rotated hull; nothing to escape")
    d_out = layer.d_out
    if candidates is None:
        scale = float(np.mean(np.linalg.norm(trace.relation, axis=1)))
        scale = 1.0 / scale if scale > 0 else 0.0
        candidates = (rng.uniform(-np.pi, np.pi, size=(d_out, d_out // 2)) * scale
                      for _ in range(samples))
    best = base.distance
    witness = np.zeros((d_out, d_out // 2))
    count = 0
    for theta in candidates:
        theta = as_mat(theta, "theta_r")
        count += 1
        vt = rotated_outputs(layer, x, theta)
        dist = cone_project(delta, vt, tol=tol).distance
        if dist < best:
            best, witness = dist, theta.copy()
    success = best < base.distance - tol
    return EscapeProbe(target, base.distance, best, witness, count, success)
