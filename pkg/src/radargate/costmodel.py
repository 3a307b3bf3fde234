"""Analytic FLOP / memory formulas and instrumented MAC counts.

Conventions: one multiply-accumulate is one FLOP, additions inside an
accumulation are not charged separately, and the frozen base product x W is
excluded on both sides.  The analytic gate term ``n d_in`` is the input
projection gate; the concat projection gate is only covered by the counted
path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .gates import RotationParams, StretchMode, StretchParams, apply_rotation, masked_softmax, topk_mask
from .layer import GateMode, RadarLayer, forward_arrays
from .lora import LoraModule, random_lora
from .numkernel import Rng, as_mat, counting, hadamard, l2_normalize, matmul, softmax, tally

STRETCH = "Stretch"
RADAR = "Radar"


@dataclass(frozen=True)
class CostParams:
    L: int
    n: int
    d_in: int
    d_out: int
    r: int
    k: int
    r_a: int = 4

    def __post_init__(self):
        for name in ("n", "d_in", "d_out", "r", "k"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        # L = 0 and r_a = 0 are admitted so the limiting forms can be evaluated
        if self.L < 0 or self.r_a < 0:
            raise ValueError("L and r_a must be non-negative")
        if self.k > self.n:
            raise ValueError(f"k ({self.k}) must not exceed n ({self.n})")
        if self.r_a > self.d_out:
            raise ValueError(f"r_a ({self.r_a}) must not exceed d_out ({self.d_out})")


def _which(which: str) -> str:
    if which not in (STRETCH, RADAR):
        raise ValueError(f"which must be {STRETCH!r} or {RADAR!r}, got {which!r}")
    return which


def analytic_flops(p: CostParams, which: str) -> int:
    adapters = p.k * p.r * (p.d_in + p.d_out) + p.k * p.d_out
    if _which(which) == STRETCH:
        return p.L * (p.n * p.d_in + adapters)
    return p.L * ((2 * p.n + 2 * p.r_a) * p.d_in + adapters)


def analytic_memory(p: CostParams, which: str) -> int:
    act = p.L * (p.n + p.k * p.r)
    lora = p.r * (p.d_in + p.d_out)
    if _which(which) == STRETCH:
        return p.n * (p.d_in + lora) + act
    return p.n * ((2 * p.r_a + 1) * p.d_in + lora) + act


def parity_limit(n: int, r: int, k: int, r_a: int) -> float:
    """d -> infinity limit of O_r / O_s with d_in = d_out = d."""
    return (2 * n + 2 * r_a + 2 * k * r + k) / (n + 2 * k * r + k)


# --- counted paths -------------------------------------------------------------


def _expert_row(m: LoraModule, x):
    return matmul(matmul(x, m.A, tag="adapter_down"), m.B, tag="adapter_up")


def minimal_forward(modules: Sequence[LoraModule], stretch: StretchParams, rotation: RotationParams,
                    mode, X) -> np.ndarray:
    """Adapter-path output sum_i g_i v~_i per row, computed with the fewest MACs.

    Experts are evaluated through their factors ((x A) B), only when needed:
    a stretch-only input-projection gate touches just the k selected experts,
    while rotation (reference sums) and the concat gate need all n.  Only the
    selected experts are rotated, and a factorized theta_r is applied as
    ((relation U) V) without forming U V.  The frozen base is not included.
    """
    mode = GateMode(mode)
    X = as_mat(X, "X")
    n = len(modules)
    d_out = modules[0].d_out
    out = np.zeros((X.shape[0], d_out))
    if mode is GateMode.BASE_ONLY:
        return out
    for b, x in enumerate(X):
        need_all = mode.rotates or (mode.stretches and stretch.mode is StretchMode.CONCAT_PROJ)
        v = {}
        if need_all:
            for i in range(n):
                v[i] = _expert_row(modules[i], x)
        if mode.stretches:
            if stretch.mode is StretchMode.INPUT_PROJ:
                logits = matmul(x, stretch.theta_s, tag="gate_logits")
            else:
                cat = np.concatenate([v[i] for i in range(n)])
                tally(cat.size, "gate_normalize")
                logits = matmul(l2_normalize(cat), stretch.theta_s, tag="gate_logits")
            mask = topk_mask(softmax(logits, stretch.tau), stretch.k)
            g = masked_softmax(logits, mask, stretch.tau)
            chosen = [int(i) for i in np.flatnonzero(mask)]
        else:
            g = np.full(n, 1.0 / n)
            chosen = list(range(n))
        for i in chosen:
            if i not in v:
                v[i] = _expert_row(modules[i], x)
        if mode.rotates:
            total = np.sum([v[i] for i in range(n)], axis=0)
            for i in chosen:
                rel = hadamard(v[i], total - v[i], tag="relation")
                if rotation.factorized:
                    alpha = matmul(matmul(rel, rotation.U, tag="angles"), rotation.V, tag="angles")
                else:
                    alpha = matmul(rel, rotation.full, tag="angles")
                v[i] = apply_rotation(v[i], alpha)
        stack = np.stack([v[i] for i in chosen])
        out[b] = matmul(g[chosen], stack, tag="combine")
    return out


def counted_flops(layer: RadarLayer, X, path: str = "minimal", breakdown: bool = False):
    """MACs charged while evaluating ``layer`` on the rows of X (base x W excluded).

    ``path="full"`` counts :func:`forward_arrays`, which materializes every
    intermediate of the trace (composed d_in x d_out expert matrices, all n
    rotations).  ``path="minimal"`` counts :func:`minimal_forward`.  With
    ``breakdown=True`` returns ``(total, {tag: macs})``.
    """
    if path == "full":
        with counting() as c:
            forward_arrays(layer, X)
    elif path == "minimal":
        with counting() as c:
            minimal_forward(layer.bank.modules, layer.stretch, layer.rotation, layer.mode, X)
    else:
        raise ValueError(f"unknown path {path!r}")
    return (c.total, dict(c.breakdown)) if breakdown else c.total


ROTATION_TAGS = ("ref_outputs", "relation", "angles", "theta_r_collapse", "rotate")


@dataclass
class CostReport:
    d: int
    analytic_flops_stretch: int
    analytic_flops_radar: int
    counted_flops_stretch: int
    counted_flops_radar: int
    analytic_mem_stretch: int
    analytic_mem_radar: int
    ratio: float
    breakdown_radar: dict = field(default_factory=dict, repr=False)

    @property
    def bracket_stretch(self) -> float:
        return self.counted_flops_stretch / self.analytic_flops_stretch

    @property
    def bracket_radar(self) -> float:
        return self.counted_flops_radar / self.analytic_flops_radar


def _sweep_parts(rng: Rng, p: CostParams):
    modules = [random_lora(rng, p.d_in, p.d_out, p.r) for _ in range(p.n)]
    stretch = StretchParams(rng.normal((p.d_in, p.n)), StretchMode.INPUT_PROJ, 1.0, p.k)
    if p.r_a > 0:
        rotation = RotationParams(U=rng.normal((p.d_out, p.r_a)) * 0.1,
                                  V=rng.normal((p.r_a, p.d_out // 2)) * 0.1)
    else:
        rotation = RotationParams(full=rng.normal((p.d_out, p.d_out // 2)) * 0.1)
    X = l2_normalize(rng.normal((p.L, p.d_in)))
    return modules, stretch, rotation, X


def parity_sweep(dims: Sequence[int], n: int = 8, r: int = 8, k: int = 2, r_a: int = 4,
                 L: int = 4, seed: int = 0) -> list:
    """One :class:`CostReport` per d (d_in = d_out = d), input-projection gate.

    Counted columns come from :func:`minimal_forward` on a random instance
    built directly from LoRA factors, so no d x d matrix is ever formed.
    """
    dims = list(dims)
    if not dims:
        raise ValueError("dims must be non-empty")
    reports = []
    for d in dims:
        d = int(d)
        if d < 2 or d % 2:
            raise ValueError(f"d must be even and >= 2, got {d}")
        p = CostParams(L, n, d, d, min(r, d), k, r_a)
        modules, stretch, rotation, X = _sweep_parts(Rng(seed).spawn(d), p)
        counted = {}
        for mode in (GateMode.STRETCH_ONLY, GateMode.RADAR):
            with counting() as c:
                minimal_forward(modules, stretch, rotation, mode, X)
            counted[mode] = c
        a_s, a_r = analytic_flops(p, STRETCH), analytic_flops(p, RADAR)
        reports.append(CostReport(
            d, a_s, a_r, counted[GateMode.STRETCH_ONLY].total, counted[GateMode.RADAR].total,
            analytic_memory(p, STRETCH), analytic_memory(p, RADAR), a_r / a_s,
            dict(counted[GateMode.RADAR].breakdown),
        ))
    return reports


def complexity_rows(reports) -> list:
    """Rows (d, which, analytic_flops, counted_flops, analytic_mem, ratio)."""
    rows = []
    for rep in reports:
        rows.append((rep.d, STRETCH, rep.analytic_flops_stretch, rep.counted_flops_stretch,
                     rep.analytic_mem_stretch, rep.ratio))
        rows.append((rep.d, RADAR, rep.analytic_flops_radar, rep.counted_flops_radar,
                     rep.analytic_mem_radar, rep.ratio))
    return rows
