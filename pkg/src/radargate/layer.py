"""Composable LoRA layer: y = x W + sum_i g_i * rotate(v_i, alpha_i)."""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .gates import (
    GateDecision,
    RotationParams,
    StretchMode,
    StretchParams,
    apply_rotation,
    concat_normalized,
    effective_theta_r,
    masked_softmax,
    softmax,
    topk_mask,
)
from .lora import FrozenBase, LoraBank
from .numkernel import as_mat, as_vec, hadamard, matmul


class GateMode(str, Enum):
    RADAR = "Radar"
    STRETCH_ONLY = "StretchOnly"
    ROTATION_ONLY = "RotationOnly"
    BASE_ONLY = "BaseOnly"

    @property
    def rotates(self) -> bool:
        return self in (GateMode.RADAR, GateMode.ROTATION_ONLY)

    @property
    def stretches(self) -> bool:
        return self in (GateMode.RADAR, GateMode.STRETCH_ONLY)


@dataclass
class RadarLayer:
    base: FrozenBase
    bank: LoraBank
    stretch: StretchParams
    rotation: RotationParams
    mode: GateMode = GateMode.RADAR

    def __post_init__(self):
        self.mode = GateMode(self.mode)
        d_in, d_out = self.bank.d_in, self.bank.d_out
        if self.base.W.shape != (d_in, d_out):
            raise ValueError(f"W is {self.base.W.shape}, bank needs ({d_in}, {d_out})")
        if self.stretch.n != self.bank.n:
            raise ValueError(f"theta_s has {self.stretch.n} columns, bank has {self.bank.n} experts")
        rows = self.stretch.expected_rows(d_in, d_out)
        if self.stretch.theta_s.shape[0] != rows:
            raise ValueError(f"theta_s has {self.stretch.theta_s.shape[0]} rows, {self.stretch.mode.value} needs {rows}")
        if self.rotation.d_out != d_out:
            raise ValueError(f"theta_r is for d_out={self.rotation.d_out}, bank has d_out={d_out}")

    @property
    def n(self) -> int:
        return self.bank.n

    @property
    def d_in(self) -> int:
        return self.bank.d_in

    @property
    def d_out(self) -> int:
        return self.bank.d_out

    def with_params(self, theta_s=None, rotation: Optional[RotationParams] = None, mode=None) -> "RadarLayer":
        stretch = self.stretch if theta_s is None else replace(self.stretch, theta_s=theta_s)
        return RadarLayer(
            self.base,
            self.bank,
            stretch,
            self.rotation if rotation is None else rotation,
            self.mode if mode is None else GateMode(mode),
        )


@dataclass
class ForwardTrace:
    """Every intermediate of a forward pass.

    Arrays carry a leading batch axis when produced by :func:`forward_arrays`;
    traces from :func:`forward` / :func:`forward_batch` are single rows.
    Fields the active mode does not compute are ``None``.
    """

    mode: GateMode
    x: np.ndarray
    base_out: np.ndarray
    y: np.ndarray
    v: Optional[np.ndarray] = None  # (n, d_out)
    relation: Optional[np.ndarray] = None  # (x P_i) * (x Q_i), (n, d_out)
    alpha: Optional[np.ndarray] = None  # (n, d_out/2)
    v_tilde: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    tau: float = 1.0

    @property
    def batched(self) -> bool:
        return self.x.ndim == 2

    @property
    def decision(self) -> Optional[GateDecision]:
        if self.g is None or self.batched:
            return None
        return GateDecision(
            self.logits, self.probs, tuple(int(i) for i in np.flatnonzero(self.mask)), self.g
        )

    def row(self, b: int) -> "ForwardTrace":
        def pick(a):
            return None if a is None else a[b]

        return ForwardTrace(
            self.mode, self.x[b], self.base_out[b], self.y[b], pick(self.v), pick(self.relation),
            pick(self.alpha), pick(self.v_tilde), pick(self.z), pick(self.logits), pick(self.probs),
            pick(self.mask), pick(self.g), self.tau,
        )


def forward_arrays(layer: RadarLayer, X) -> ForwardTrace:
    """Batched forward over the rows of X (L, d_in); per-row gating."""
    X = as_mat(X, "X")
    if X.shape[1] != layer.d_in:
        raise ValueError(f"X has {X.shape[1]} columns, layer expects d_in={layer.d_in}")
    mode = layer.mode
    base_out = X @ layer.base.W  # frozen base product, outside the tally by convention
    if mode is GateMode.BASE_ONLY:
        return ForwardTrace(mode, X, base_out, base_out.copy(), tau=layer.stretch.tau)

    bank = layer.bank
    L, n = X.shape[0], bank.n
    V = matmul(X, bank.composed, tag="experts").transpose(1, 0, 2)  # (L, n, d_out)

    relation = alpha = None
    V_tilde = V
    if mode.rotates:
        XQ = matmul(X, bank.ref_sums, tag="ref_outputs").transpose(1, 0, 2)
        relation = hadamard(V, XQ, tag="relation")
        theta = effective_theta_r(layer.rotation)
        alpha = matmul(relation, theta, tag="angles")
        V_tilde = apply_rotation(V, alpha)

    z = logits = probs = None
    if mode.stretches:
        sp = layer.stretch
        if sp.mode is StretchMode.INPUT_PROJ:
            logits = matmul(X, sp.theta_s, tag="gate_logits")
        else:
            z = concat_normalized(V)
            logits = matmul(z, sp.theta_s, tag="gate_logits")
        probs = softmax(logits, sp.tau)
        mask = topk_mask(probs, sp.k)
        g = masked_softmax(logits, mask, sp.tau)
    else:
        g = np.full((L, n), 1.0 / n)
        probs = g.copy()
        mask = np.ones((L, n), dtype=bool)

    mixed = matmul(g[:, None, :], V_tilde, tag="combine")[:, 0, :]
    y = base_out + mixed
    return ForwardTrace(
        mode, X, base_out, y, V, relation, alpha, V_tilde, z, logits, probs, mask, g,
        layer.stretch.tau,
    )


def forward(layer: RadarLayer, x) -> ForwardTrace:
    x = as_vec(x, "x")
    if x.shape[0] != layer.d_in:
        raise ValueError(f"x has length {x.shape[0]}, layer expects d_in={layer.d_in}")
    return forward_arrays(layer, x[None, :]).row(0)


def forward_batch(layer: RadarLayer, X) -> list:
    trace = forward_arrays(layer, X)
    return [trace.row(b) for b in range(trace.x.shape[0])]
