"""StretchGate (top-k softmax weights) and RotationGate (pairwise rotations).

All array functions accept extra leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .numkernel import as_mat, hadamard, l2_normalize, matmul, softmax, tally


class StretchMode(str, Enum):
    INPUT_PROJ = "InputProj"
    CONCAT_PROJ = "ConcatProj"


@dataclass
class StretchParams:
    theta_s: np.ndarray
    mode: StretchMode = StretchMode.CONCAT_PROJ
    tau: float = 1.0
    k: int = 1

    def __post_init__(self):
        self.theta_s = as_mat(self.theta_s, "theta_s")
        self.mode = StretchMode(self.mode)
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        n = self.theta_s.shape[1]
        if not 1 <= self.k <= n:
            raise ValueError(f"k must lie in [1, {n}], got {self.k}")

    @property
    def n(self) -> int:
        return self.theta_s.shape[1]

    def expected_rows(self, d_in: int, d_out: int) -> int:
        return d_in if self.mode is StretchMode.INPUT_PROJ else self.n * d_out


@dataclass
class RotationParams:
    """theta_r held dense (d_out, d_out/2) or as U (d_out, r_a) @ V (r_a, d_out/2)."""

    full: Optional[np.ndarray] = None
    U: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None

    def __post_init__(self):
        has_full = self.full is not None
        has_uv = self.U is not None or self.V is not None
        if has_full == has_uv:
            raise ValueError("RotationParams needs exactly one of `full` or (`U`, `V`)")
        if has_full:
            self.full = as_mat(self.full, "theta_r")
            rows, cols = self.full.shape
        else:
            if self.U is None or self.V is None:
                raise ValueError("factorized RotationParams needs both U and V")
            self.U = as_mat(self.U, "U")
            self.V = as_mat(self.V, "V")
            if self.U.shape[1] != self.V.shape[0]:
                raise ValueError(f"U {self.U.shape} and V {self.V.shape} do not chain")
            rows, cols = self.U.shape[0], self.V.shape[1]
        if rows % 2 or cols * 2 != rows:
            raise ValueError(f"effective theta_r must be d_out x d_out/2, got {rows} x {cols}")

    @property
    def factorized(self) -> bool:
        return self.full is None

    @property
    def d_out(self) -> int:
        return self.full.shape[0] if self.full is not None else self.U.shape[0]

    @property
    def r_a(self) -> Optional[int]:
        return None if self.full is not None else self.U.shape[1]

    @classmethod
    def zeros(cls, d_out: int, r_a: Optional[int] = None) -> "RotationParams":
        if r_a is None:
            return cls(full=np.zeros((d_out, d_out // 2)))
        return cls(U=np.zeros((d_out, r_a)), V=np.zeros((r_a, d_out // 2)))


@dataclass
class GateDecision:
    logits: np.ndarray
    probs: np.ndarray
    selected: tuple
    g: np.ndarray


def effective_theta_r(params: RotationParams) -> np.ndarray:
    if params.full is not None:
        return params.full
    return matmul(params.U, params.V, tag="theta_r_collapse")


def stretch_logits(params: StretchParams, x, v) -> np.ndarray:
    """Gate logits before temperature: ``x theta_s`` or ``l2norm(v_1 ++ ... ++ v_n) theta_s``.

    ``x`` has shape (..., d_in) and ``v`` (..., n, d_out).
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if params.mode is StretchMode.INPUT_PROJ:
        if x.shape[-1] != params.theta_s.shape[0]:
            raise ValueError(f"x has length {x.shape[-1]}, theta_s expects {params.theta_s.shape[0]}")
        return matmul(x, params.theta_s, tag="gate_logits")
    z = concat_normalized(v)
    if z.shape[-1] != params.theta_s.shape[0]:
        raise ValueError(f"concat(v) has length {z.shape[-1]}, theta_s expects {params.theta_s.shape[0]}")
    return matmul(z, params.theta_s, tag="gate_logits")


def concat_normalized(v, eps: float = 1e-12) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(v.shape[:-2] + (v.shape[-2] * v.shape[-1],))
    tally(flat.size, "gate_normalize")
    return l2_normalize(flat, eps)


def topk_mask(probs, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries along the last axis; ties go to the lowest index."""
    probs = np.asarray(probs)
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def masked_softmax(logits, mask, tau: float) -> np.ndarray:
    """Softmax over the masked entries only; zeros elsewhere.

    Equal to renormalizing the top-k slice of the full softmax, but the
    unselected logits never enter the arithmetic.
    """
    z = np.where(mask, np.asarray(logits, dtype=np.float64) / tau, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def topk_gate(logits, tau: float, k: int) -> GateDecision:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("topk_gate takes a single logit vector")
    n = logits.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    probs = softmax(logits, tau)
    mask = topk_mask(probs, k)
    g = masked_softmax(logits, mask, tau)
    return GateDecision(logits, probs, tuple(int(i) for i in np.flatnonzero(mask)), g)


def rotation_angles(theta_r: RotationParams, x, P_i, Q_i) -> np.ndarray:
    """alpha_i = ((x P_i) * (x Q_i)) theta_r, with theta_r collapsed first."""
    x = np.asarray(x, dtype=np.float64)
    P_i = np.asarray(P_i, dtype=np.float64)
    Q_i = np.asarray(Q_i, dtype=np.float64)
    if P_i.shape != Q_i.shape or x.shape[-1] != P_i.shape[0]:
        raise ValueError(f"shape mismatch: x {x.shape}, P {P_i.shape}, Q {Q_i.shape}")
    theta = effective_theta_r(theta_r)
    if theta.shape[0] != P_i.shape[1]:
        raise ValueError(f"theta_r has {theta.shape[0]} rows, d_out is {P_i.shape[1]}")
    rel = hadamard(matmul(x, P_i, tag="experts"), matmul(x, Q_i, tag="ref_outputs"), tag="relation")
    return matmul(rel, theta, tag="angles")


def apply_rotation(v, alpha) -> np.ndarray:
    """Rotate consecutive pairs (2m, 2m+1) of ``v`` by ``alpha[m]``."""
    v = np.asarray(v, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if v.shape[-1] % 2 or alpha.shape[-1] * 2 != v.shape[-1] or v.shape[:-1] != alpha.shape[:-1]:
        raise ValueError(f"length mismatch: v {v.shape}, alpha {alpha.shape}")
    c = np.cos(alpha)
    s = np.sin(alpha)
    even = v[..., 0::2]
    odd = v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    tally(2 * v.size, "rotate")
    return out


def rotation_matrix(alpha) -> np.ndarray:
    """Dense block-diagonal R with 2x2 blocks [[cos, -sin], [sin, cos]].

    Acts on column vectors: ``R @ v`` equals :func:`apply_rotation`.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    d = 2 * alpha.shape[0]
    R = np.zeros((d, d))
    for m, a in enumerate(alpha):
        c, s = np.cos(a), np.sin(a)
        R[2 * m:2 * m + 2, 2 * m:2 * m + 2] = [[c, -s], [s, c]]
    return R


def angular_similarity(v_tilde, selected=None) -> np.ndarray:
    """Cosine-similarity matrix between (selected) rotated expert outputs."""
    vt = np.asarray(v_tilde, dtype=np.float64)
    if selected is not None:
        vt = vt[list(selected)]
    unit = l2_normalize(vt)
    return unit @ unit.T
