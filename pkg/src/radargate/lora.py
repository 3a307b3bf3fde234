"""Frozen LoRA expert bank with cached composed and leave-one-out sums."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import Rng, as_mat, as_vec, matmul


@dataclass(frozen=True)
class LoraModule:
    A: np.ndarray  # (d_in, r)
    B: np.ndarray  # (r, d_out)

    def __post_init__(self):
        A = as_mat(self.A, "A").copy()
        B = as_mat(self.B, "B").copy()
        if A.shape[1] != B.shape[0]:
            raise ValueError(f"rank mismatch: A is {A.shape}, B is {B.shape}")
        r = A.shape[1]
        if r > min(A.shape[0], B.shape[1]):
            raise ValueError(f"rank {r} exceeds min(d_in, d_out)")
        A.flags.writeable = False
        B.flags.writeable = False
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d_in(self) -> int:
        return self.A.shape[0]

    @property
    def d_out(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class FrozenBase:
    W: np.ndarray  # (d_in, d_out)

    def __post_init__(self):
        W = as_mat(self.W, "W").copy()
        W.flags.writeable = False
        object.__setattr__(self, "W", W)


def init_lora(rng: Rng, d_in: int, d_out: int, r: int, scale: float = 1.0) -> LoraModule:
    """Standard LoRA init: A ~ U(-scale/sqrt(d_in), scale/sqrt(d_in)), B = 0."""
    if d_out % 2:
        raise ValueError(f"d_out must be even, got {d_out}")
    if r < 1:
        raise ValueError("rank must be >= 1")
    bound = scale / np.sqrt(d_in)
    A = rng.uniform(-bound, bound, size=(d_in, r))
    return LoraModule(A, np.zeros((r, d_out)))


def random_lora(rng: Rng, d_in: int, d_out: int, r: int, scale: float = 1.0) -> LoraModule:
    """A "trained" adapter: both factors Gaussian, scaled so ``x A B`` is O(scale)
    for unit-norm ``x``.  Stands in for pretrained experts in synthetic runs."""
    if d_out % 2:
        raise ValueError(f"d_out must be even, got {d_out}")
    A = rng.normal((d_in, r)) / np.sqrt(r)
    B = rng.normal((r, d_out)) * scale / np.sqrt(d_out)
    return LoraModule(A, B)


def compose(m: LoraModule) -> np.ndarray:
    return matmul(m.A, m.B, tag="compose")


class LoraBank:
    """n frozen experts sharing (d_in, d_out).

    ``composed[i]`` holds A_i B_i and ``ref_sums[i]`` holds the sum of every
    other expert's composed matrix, stored as total - composed[i].  Caches are
    rebuilt eagerly whenever the module list changes.
    """

    def __init__(self, modules):
        modules = tuple(modules)
        if not modules:
            raise ValueError("a bank needs at least one module")
        d_in, d_out = modules[0].d_in, modules[0].d_out
        for i, m in enumerate(modules):
            if (m.d_in, m.d_out) != (d_in, d_out):
                raise ValueError(f"module {i} has shape ({m.d_in}, {m.d_out}), expected ({d_in}, {d_out})")
        if d_out % 2:
            raise ValueError(f"d_out must be even for pairwise rotation, got {d_out}")
        self.modules = modules
        self.d_in = d_in
        self.d_out = d_out
        self._rebuild()

    def _rebuild(self):
        P = np.stack([compose(m) for m in self.modules])
        total = P.sum(axis=0)
        Q = total[None, :, :] - P
        for arr in (P, total, Q):
            arr.flags.writeable = False
        self.composed = P
        self.total = total
        self.ref_sums = Q

    @property
    def n(self) -> int:
        return len(self.modules)

    def replace(self, i: int, module: LoraModule) -> "LoraBank":
        """New bank with expert ``i`` swapped (caches recomputed)."""
        mods = list(self.modules)
        mods[self._check_index(i)] = module
        return LoraBank(mods)

    def _check_index(self, i: int) -> int:
        if not 0 <= i < self.n:
            raise IndexError(f"expert index {i} out of range for n={self.n}")
        return i


def make_bank(rng: Rng, n: int, d_in: int, d_out: int, r: int, scale: float = 1.0) -> LoraBank:
    return LoraBank([random_lora(rng, d_in, d_out, r, scale) for _ in range(n)])


def expert_outputs(bank: LoraBank, x) -> np.ndarray:
    """Rows v_i = x P_i, shape (n, d_out)."""
    x = as_vec(x, "x")
    if x.shape[0] != bank.d_in:
        raise ValueError(f"x has length {x.shape[0]}, expected d_in={bank.d_in}")
    return matmul(x, bank.composed, tag="experts")


def ref_sum(bank: LoraBank, i: int) -> np.ndarray:
    return bank.ref_sums[bank._check_index(i)]
