"""Analytic gradients of the MSE loss w.r.t. the gate parameters, plus a
central finite-difference checker.

Only theta_s and theta_r (or its factors U, V) are differentiated; W and
the LoRA factors are frozen.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .gates import RotationParams, StretchMode
from .layer import ForwardTrace, RadarLayer, forward
from .numkernel import as_vec


class StretchGradMode(str, Enum):
    PAPER_APPROX = "PaperApprox"
    EXACT_MASKED = "ExactMasked"


class UnstableSelection(ValueError):
    """The top-k support would flip under an h-sized perturbation."""


@dataclass
class GateGrads:
    d_theta_s: Optional[np.ndarray]
    d_theta_r: Optional[np.ndarray]  # w.r.t. the effective dense theta_r
    d_U: Optional[np.ndarray] = None
    d_V: Optional[np.ndarray] = None
    stretch_grad_mode: StretchGradMode = StretchGradMode.EXACT_MASKED

    def norm_s(self) -> float:
        return 0.0 if self.d_theta_s is None else float(np.linalg.norm(self.d_theta_s))

    def norm_r(self) -> float:
        if self.d_U is not None:
            return float(np.sqrt(np.sum(self.d_U ** 2) + np.sum(self.d_V ** 2)))
        return 0.0 if self.d_theta_r is None else float(np.linalg.norm(self.d_theta_r))

    def is_finite(self) -> bool:
        parts = (self.d_theta_s, self.d_theta_r, self.d_U, self.d_V)
        return all(p is None or np.all(np.isfinite(p)) for p in parts)


def loss_mse(y, target) -> float:
    """Squared L2 distance (no 1/2 factor)."""
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {target.shape}")
    r = y - target
    return float(np.sum(r * r))


def batch_losses(trace: ForwardTrace, targets) -> np.ndarray:
    r = trace.y - np.asarray(targets, dtype=np.float64)
    return np.sum(r * r, axis=-1)


def _as_batch(trace: ForwardTrace, target):
    target = np.asarray(target, dtype=np.float64)
    if trace.batched:
        if target.shape != trace.y.shape:
            raise ValueError(f"targets {target.shape} do not match outputs {trace.y.shape}")
        return trace, target
    if target.shape != trace.y.shape:
        raise ValueError(f"length mismatch: {target.shape} vs {trace.y.shape}")
    single = ForwardTrace(
        trace.mode, *(None if a is None else a[None] for a in (
            trace.x, trace.base_out, trace.y, trace.v, trace.relation, trace.alpha,
            trace.v_tilde, trace.z, trace.logits, trace.probs, trace.mask, trace.g)),
        tau=trace.tau,
    )
    return single, target[None]


def _logit_features(trace: ForwardTrace) -> np.ndarray:
    return trace.x if trace.z is None else trace.z


def backward_stretch(trace: ForwardTrace, target, mode=StretchGradMode.EXACT_MASKED) -> np.ndarray:
    """dL/dtheta_s, averaged over the batch when the trace is batched.

    ExactMasked differentiates the renormalized top-k softmax with the
    support held fixed.  PaperApprox keeps only the diagonal softmax term
    (1/tau) S_j (1 - S_j), S the pre-truncation probabilities, restricted to
    the selected experts.
    """
    mode = StretchGradMode(mode)
    if not trace.mode.stretches:
        raise ValueError(f"no stretch gate in a {trace.mode.value} trace")
    bt, tgt = _as_batch(trace, target)
    dy = 2.0 * (bt.y - tgt)
    dg = np.einsum("bo,bno->bn", dy, bt.v_tilde)
    if mode is StretchGradMode.EXACT_MASKED:
        centered = dg - np.sum(bt.g * dg, axis=-1, keepdims=True)
        d_eps = bt.g * centered / bt.tau
    else:
        S = bt.probs
        d_eps = np.where(bt.mask, dg * S * (1.0 - S) / bt.tau, 0.0)
    feats = _logit_features(bt)
    return feats.T @ d_eps / feats.shape[0]


def backward_rotation(trace: ForwardTrace, target) -> np.ndarray:
    """dL/dtheta_r for the effective dense theta_r (d_out, d_out/2)."""
    if not trace.mode.rotates:
        raise ValueError(f"no rotation gate in a {trace.mode.value} trace")
    bt, tgt = _as_batch(trace, target)
    dy = 2.0 * (bt.y - tgt)
    v = bt.v
    c, s = np.cos(bt.alpha), np.sin(bt.alpha)
    v_even, v_odd = v[..., 0::2], v[..., 1::2]
    dvt_even = -v_even * s - v_odd * c  # d v~(2m) / d alpha_m
    dvt_odd = v_even * c - v_odd * s  # d v~(2m+1) / d alpha_m
    d_alpha = bt.g[..., None] * (dy[:, None, 0::2] * dvt_even + dy[:, None, 1::2] * dvt_odd)
    return np.einsum("bnj,bnk->jk", bt.relation, d_alpha) / bt.x.shape[0]


def factor_grads(d_theta_r: np.ndarray, rotation: RotationParams):
    """Chain a dense theta_r gradient through theta_r = U V."""
    if not rotation.factorized:
        raise ValueError("rotation parameters are not factorized")
    return d_theta_r @ rotation.V.T, rotation.U.T @ d_theta_r


def gate_grads(layer: RadarLayer, trace: ForwardTrace, target,
               stretch_mode=StretchGradMode.EXACT_MASKED) -> GateGrads:
    d_s = backward_stretch(trace, target, stretch_mode) if layer.mode.stretches else None
    d_r = d_U = d_V = None
    if layer.mode.rotates:
        d_r = backward_rotation(trace, target)
        if layer.rotation.factorized:
            d_U, d_V = factor_grads(d_r, layer.rotation)
    return GateGrads(d_s, d_r, d_U, d_V, StretchGradMode(stretch_mode))


def selection_gap(trace: ForwardTrace, k: int) -> float:
    """Gap between the k-th and (k+1)-th largest gate probabilities (inf if k = n)."""
    p = np.sort(np.asarray(trace.probs))[::-1]
    if k >= p.shape[-1]:
        return float("inf")
    return float(p[k - 1] - p[k])


def _param_arrays(layer: RadarLayer) -> dict:
    out = {}
    if layer.mode.stretches:
        out["theta_s"] = layer.stretch.theta_s
    if layer.mode.rotates:
        rp = layer.rotation
        if rp.factorized:
            out["U"], out["V"] = rp.U, rp.V
        else:
            out["theta_r"] = rp.full
    return out


def reference_loss(layer: RadarLayer, params: dict, x, target, dtype=np.longdouble):
    """Loss and top-k support from a loop-per-expert evaluation in ``dtype``.

    Independent of :func:`forward_arrays`: it re-derives every intermediate
    directly from the layer definition, so it can serve as the FD oracle.
    Extended precision keeps central-difference round-off far below the
    analytic-gradient tolerance.
    """
    mode = layer.mode
    x = np.asarray(x, dtype=dtype)
    W = layer.base.W.astype(dtype)
    y = x @ W
    n = layer.n
    P = layer.bank.composed.astype(dtype)
    v = [x @ P[i] for i in range(n)]
    if mode.rotates:
        if "theta_r" in params:
            theta = params["theta_r"].astype(dtype)
        else:
            theta = params["U"].astype(dtype) @ params["V"].astype(dtype)
        rotated = []
        for i in range(n):
            others = sum((v[j] for j in range(n) if j != i), np.zeros_like(v[i]))
            alpha = (v[i] * others) @ theta
            c, s = np.cos(alpha), np.sin(alpha)
            out = np.empty_like(v[i])
            out[0::2] = v[i][0::2] * c - v[i][1::2] * s
            out[1::2] = v[i][0::2] * s + v[i][1::2] * c
            rotated.append(out)
    else:
        rotated = v
    if mode.stretches:
        sp = layer.stretch
        theta_s = params["theta_s"].astype(dtype)
        if sp.mode is StretchMode.INPUT_PROJ:
            feats = x
        else:
            cat = np.concatenate(v)
            norm = np.sqrt(np.sum(cat * cat))
            feats = cat / max(norm, dtype(1e-12))
        eps = (feats @ theta_s) / dtype(sp.tau)
        order = sorted(range(n), key=lambda i: (-eps[i], i))
        chosen = sorted(order[:sp.k])
        top = max(eps[i] for i in chosen)
        w = {i: np.exp(eps[i] - top) for i in chosen}
        norm_w = sum(w.values())
        g = [w[i] / norm_w if i in w else dtype(0) for i in range(n)]
        mask = np.array([i in w for i in range(n)])
    else:
        g = [dtype(1) / dtype(n)] * n
        mask = np.ones(n, dtype=bool)
    for i in range(n):
        y = y + g[i] * rotated[i]
    r = y - np.asarray(target, dtype=dtype)
    return np.sum(r * r), mask


def numeric_grads(layer: RadarLayer, x, target, h: float = 1e-5, check_mask: bool = True,
                  dtype=np.longdouble) -> dict:
    """Central differences of :func:`reference_loss` w.r.t. every gate parameter entry."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = as_vec(x, "x")
    target = as_vec(target, "target")
    params = {k: v.astype(dtype) for k, v in _param_arrays(layer).items()}
    _, base_mask = reference_loss(layer, params, x, target, dtype)
    out = {}
    for name, arr in params.items():
        grad = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            losses = []
            for sign in (1, -1):
                arr[idx] = orig + sign * dtype(h)
                loss, mask = reference_loss(layer, params, x, target, dtype)
                if check_mask and not np.array_equal(mask, base_mask):
                    arr[idx] = orig
                    raise UnstableSelection(f"top-k support flips when perturbing {name}{idx}")
                losses.append(loss)
            arr[idx] = orig
            grad[idx] = float((losses[0] - losses[1]) / (2 * dtype(h)))
        out[name] = grad
    return out


def analytic_param_grads(layer: RadarLayer, x, target,
                         stretch_mode=StretchGradMode.EXACT_MASKED) -> dict:
    trace = forward(layer, x)
    gg = gate_grads(layer, trace, target, stretch_mode)
    out = {}
    if gg.d_theta_s is not None:
        out["theta_s"] = gg.d_theta_s
    if gg.d_U is not None:
        out["U"], out["V"] = gg.d_U, gg.d_V
    elif gg.d_theta_r is not None:
        out["theta_r"] = gg.d_theta_r
    return out


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - f| / max(|f|, floor)."""
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))


def finite_diff_check(layer: RadarLayer, x, target, h: float = 1e-5, tamper=None):
    """(max_rel_err_s, max_rel_err_r) of ExactMasked analytic vs central FD.

    Raises :class:`UnstableSelection` when the top-k boundary gap is below
    10 h or a perturbation flips the support; callers resample.  ``tamper``
    (test hook) maps the analytic gradient dict before comparison.
    """
    trace = forward(layer, x)
    if layer.mode.stretches and selection_gap(trace, layer.stretch.k) <= 10 * h:
        raise UnstableSelection("selection-boundary probability gap below 10 h")
    num = numeric_grads(layer, x, target, h)
    ana = analytic_param_grads(layer, x, target)
    if tamper is not None:
        ana = tamper(ana)
    err_s = max_rel_err(ana["theta_s"], num["theta_s"]) if "theta_s" in num else 0.0
    r_keys = [k for k in ("theta_r", "U", "V") if k in num]
    err_r = max((max_rel_err(ana[k], num[k]) for k in r_keys), default=0.0)
    return err_s, err_r
