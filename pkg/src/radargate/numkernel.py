"""Dense float64 kernels, seeded random streams and MAC tallies.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64
(1-D and 2-D, row-major).  Every product on the layer's forward path goes
through :func:`matmul` / :func:`hadamard` / :func:`tally` so that a
:class:`FlopCounter` opened by the caller sees the multiply-accumulates.
"""
from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

Vec = np.ndarray
Mat = np.ndarray

_COUNTER: contextvars.ContextVar["FlopCounter | None"] = contextvars.ContextVar(
    "radargate_flop_counter", default=None
)


@dataclass
class FlopCounter:
    """Per-evaluation MAC accumulator, keyed by a free-form tag."""

    total: int = 0
    breakdown: dict = field(default_factory=dict)

    def add(self, macs: int, tag: str) -> None:
        self.total += int(macs)
        self.breakdown[tag] = self.breakdown.get(tag, 0) + int(macs)


@contextmanager
def counting():
    """Open a fresh counter for the current context; yields it."""
    counter = FlopCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


def tally(macs: int, tag: str = "other") -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.add(macs, tag)


def as_vec(x, name: str = "vector") -> Vec:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_mat(a, name: str = "matrix") -> Mat:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray, tag: str = "matmul") -> np.ndarray:
    """Matrix product with numpy broadcasting over leading (stack) axes.

    The inner dimensions must agree; the MAC count charged is
    ``prod(stack) * m * k * n``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError("matmul needs at least 1-D operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a, b)
    tally(out.size * ka, tag)
    return out


def hadamard(a: np.ndarray, b: np.ndarray, tag: str = "hadamard") -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    tally(a.size, tag)
    return a * b


def softmax(logits, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis (max-subtracted)."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax logits must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def l2_normalize(v, eps: float = 1e-12) -> np.ndarray:
    """``v / max(||v||, eps)`` along the last axis."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    return v / np.maximum(norm, eps)


def jacobi_eigh(sym, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(values, vectors)`` sorted by decreasing eigenvalue; column
    ``vectors[:, i]`` pairs with ``values[i]``.
    """
    a = np.array(sym, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("jacobi_eigh needs a square matrix")
    n = a.shape[0]
    vecs = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = vecs[:, p].copy()
                vq = vecs[:, q].copy()
                vecs[:, p] = c * vp - s * vq
                vecs[:, q] = s * vp + c * vq
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], vecs[:, order]


def pca_2d(points) -> np.ndarray:
    """Project points onto their top two principal axes.

    Sign convention: each axis is flipped so its largest-magnitude loading
    is positive.  All-identical input yields an all-zero (m, 2) result.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("pca_2d needs at least two points of equal dimension")
    centered = pts - pts.mean(axis=0)
    dim = centered.shape[1]
    if dim > 4096:
        raise ValueError("pca_2d supports dimension <= 4096")
    cov = centered.T @ centered / (pts.shape[0] - 1)
    _, vecs = jacobi_eigh(cov)
    axes = np.zeros((dim, 2))
    take = min(dim, 2)
    axes[:, :take] = vecs[:, :take]
    for j in range(take):
        col = axes[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            axes[:, j] = -col
    return centered @ axes


class Rng:
    """Seeded random stream on numpy's Philox counter-based generator.

    Philox4x64-10 is fully specified, so a seed reproduces the same draws on
    every platform.  One stream per logical task; use :meth:`spawn` for
    independent children.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(self.seed)
        self.gen = np.random.Generator(self._bitgen)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None, scale=1.0):
        return self.gen.normal(0.0, scale, size)

    def dirichlet(self, n: int):
        return self.gen.dirichlet(np.ones(n))

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int):
        return self.gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        return Rng(derive_seed(self.seed, key))

    def get_state(self) -> np.ndarray:
        """Full generator state as 13 uint64 words (for checkpoints)."""
        st = self._bitgen.state
        inner = st["state"]
        return np.array(
            [*inner["counter"], *inner["key"], *st["buffer"],
             st["buffer_pos"], st["has_uint32"], st["uinteger"]],
            dtype=np.uint64,
        )

    def set_state(self, words) -> None:
        words = np.asarray(words, dtype=np.uint64)
        if words.shape != (13,):
            raise ValueError("Rng state must be 13 uint64 words")
        st = self._bitgen.state
        st["state"]["counter"] = words[0:4].copy()
        st["state"]["key"] = words[4:6].copy()
        st["buffer"] = words[6:10].copy()
        st["buffer_pos"] = int(words[10])
        st["has_uint32"] = int(words[11])
        st["uinteger"] = int(words[12])
        self._bitgen.state = st


def derive_seed(base: int, *parts: int) -> int:
    """Mix ``parts`` into ``base`` with splitmix64 finalization, then XOR."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        h = _splitmix64(h ^ (int(p) & 0xFFFFFFFFFFFFFFFF))
    return (int(base) ^ h) & 0xFFFFFFFFFFFFFFFF


def _splitmix64(z: int) -> int:
    mask = 0xFFFFFFFFFFFFFFFF
    z = (z + 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)
