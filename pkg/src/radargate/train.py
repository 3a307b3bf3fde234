"""Synthetic tasks, optimizers and the gate-only training loop."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .gates import RotationParams, StretchMode, StretchParams, angular_similarity
from .geometry import cone_project
from .grads import GateGrads, StretchGradMode, batch_losses, gate_grads
from .layer import GateMode, RadarLayer, forward_arrays
from .lora import FrozenBase, LoraBank, make_bank
from .numkernel import Rng, l2_normalize, softmax


class TaskKind(str, Enum):
    IN_CONE = "InCone"
    OUT_OF_CONE = "OutOfCone"
    MULTI_TASK_MIX = "MultiTaskMix"


@dataclass
class SyntheticTask:
    X: np.ndarray
    Y: np.ndarray
    kind: TaskKind
    cone_meta: np.ndarray  # per-sample distance from target - xW to the expert hull
    clusters: Optional[np.ndarray] = None  # per-sample cluster id (MultiTaskMix)

    @property
    def floor(self) -> float:
        """Mean squared hull distance: no stretch-only gate can go below it."""
        return float(np.mean(self.cone_meta ** 2))


class TaskError(ValueError):
    pass


def sample_inputs(rng: Rng, N: int, d_in: int) -> np.ndarray:
    return l2_normalize(rng.normal((N, d_in)))


def _experts(bank: LoraBank, x: np.ndarray) -> np.ndarray:
    return x @ bank.composed


def _hull_distances(X, delta, bank) -> np.ndarray:
    return np.array([cone_project(delta[b], _experts(bank, X[b])).distance for b in range(X.shape[0])])


def make_in_cone_task(rng: Rng, bank: LoraBank, N: int, noise: float = 0.0,
                      base: Optional[FrozenBase] = None) -> SyntheticTask:
    """Targets x W + sum_i g*_i v_i(x) with g* ~ Dirichlet(1, ..., 1), plus optional noise."""
    if noise < 0:
        raise TaskError("noise must be >= 0")
    W = np.zeros((bank.d_in, bank.d_out)) if base is None else base.W
    X = sample_inputs(rng, N, bank.d_in)
    delta = np.empty((N, bank.d_out))
    for b in range(N):
        g = rng.dirichlet(bank.n)
        delta[b] = g @ _experts(bank, X[b])
    if noise > 0:
        delta = delta + noise * rng.normal((N, bank.d_out))
    return SyntheticTask(X, X @ W + delta, TaskKind.IN_CONE, _hull_distances(X, delta, bank))


def outward_direction(rng: Rng, v: np.ndarray, anchor: np.ndarray):
    """(base point, unit direction) leaving conv(v).

    Affinely degenerate hull (rank of the differences < d): a random unit
    vector in the orthogonal complement of the affine span, based at
    ``anchor``.  Full-dimensional hull: the outward normal at the projection
    of a far random exterior point, based at that projection.
    """
    n, d = v.shape
    rank = int(np.linalg.matrix_rank(v[1:] - v[0])) if n > 1 else 0
    u = rng.normal(d)
    if rank < d:
        if rank > 0:
            q, _ = np.linalg.qr((v[1:] - v[0]).T)
            q = q[:, :rank]
            u = u - q @ (q.T @ u)
        return anchor, u / np.linalg.norm(u)
    far = anchor + 1e3 * (1.0 + np.abs(v).max()) * u / np.linalg.norm(u)
    proj = cone_project(far, v)
    out = far - proj.point
    return proj.point, out / np.linalg.norm(out)


def make_out_of_cone_task(rng: Rng, bank: LoraBank, N: int, margin: float = 0.1,
                          base: Optional[FrozenBase] = None, max_resample: int = 100) -> SyntheticTask:
    """Targets x W + p(x) + margin * u(x): p a hull point, u an outward unit direction.

    p mixes the experts with the weights of one fixed random concat-projection
    teacher gate, so a stretch-only student can in principle reach p and is
    left with the margin as its error floor.  Every placement is re-checked
    with :func:`cone_project` and redrawn if it falls short of the margin.
    """
    if not margin > 0:
        raise TaskError("margin must be positive")
    W = np.zeros((bank.d_in, bank.d_out)) if base is None else base.W
    theta_t = rng.spawn(0x7EAC).normal((bank.n * bank.d_out, bank.n))
    X = np.empty((N, bank.d_in))
    delta = np.empty((N, bank.d_out))
    dist = np.empty(N)
    for b in range(N):
        for _ in range(max_resample):
            x = sample_inputs(rng, 1, bank.d_in)[0]
            V = _experts(bank, x)
            p = softmax(l2_normalize(V.reshape(-1)) @ theta_t) @ V
            anchor, u = outward_direction(rng, V, p)
            cand = anchor + margin * u
            d = cone_project(cand, V).distance
            if d >= margin * (1 - 1e-6):
                X[b], delta[b], dist[b] = x, cand, d
                break
        else:
            raise TaskError(f"could not place a target {margin} outside the hull after {max_resample} draws")
    return SyntheticTask(X, X @ W + delta, TaskKind.OUT_OF_CONE, dist)


def make_multitask_mix(rng: Rng, bank: LoraBank, clusters: int, N: int,
                       base: Optional[FrozenBase] = None) -> SyntheticTask:
    """Experts split into contiguous clusters; each target mixes one cluster only."""
    if clusters < 1:
        raise TaskError("clusters must be >= 1")
    if clusters > bank.n:
        raise TaskError(f"clusters ({clusters}) > n ({bank.n})")
    W = np.zeros((bank.d_in, bank.d_out)) if base is None else base.W
    groups = np.array_split(np.arange(bank.n), clusters)
    X = sample_inputs(rng, N, bank.d_in)
    delta = np.empty((N, bank.d_out))
    ids = np.empty(N, dtype=np.int64)
    for b in range(N):
        c = int(rng.integers(0, clusters))
        members = groups[c]
        g = rng.dirichlet(len(members))
        delta[b] = g @ _experts(bank, X[b])[members]
        ids[b] = c
    kind = TaskKind.IN_CONE if clusters == 1 else TaskKind.MULTI_TASK_MIX
    return SyntheticTask(X, X @ W + delta, kind, _hull_distances(X, delta, bank), ids)


def cluster_groups(n: int, clusters: int) -> list:
    return np.array_split(np.arange(n), clusters)


# --- optimization -------------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimState:
    algorithm: str = "Adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("SGD", "Adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def update(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            if self.algorithm == "SGD":
                out[name] = p - self.lr * g
                continue
            m = self.beta1 * self.m.get(name, np.zeros_like(p)) + (1 - self.beta1) * g
            u = self.beta2 * self.u.get(name, np.zeros_like(p)) + (1 - self.beta2) * g * g
            self.m[name], self.u[name] = m, u
            m_hat = m / (1 - self.beta1 ** self.t)
            u_hat = u / (1 - self.beta2 ** self.t)
            out[name] = p - self.lr * m_hat / (np.sqrt(u_hat) + self.eps)
        return out


def trainable(layer: RadarLayer) -> dict:
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


def grads_dict(gg: GateGrads) -> dict:
    out = {}
    if gg.d_theta_s is not None:
        out["theta_s"] = gg.d_theta_s
    if gg.d_U is not None:
        out["U"], out["V"] = gg.d_U, gg.d_V
    elif gg.d_theta_r is not None:
        out["theta_r"] = gg.d_theta_r
    return out


def with_trainable(layer: RadarLayer, params: dict) -> RadarLayer:
    rotation = layer.rotation
    if "theta_r" in params:
        rotation = RotationParams(full=params["theta_r"])
    elif "U" in params:
        rotation = RotationParams(U=params["U"], V=params["V"])
    return layer.with_params(theta_s=params.get("theta_s"), rotation=rotation)


def step(layer: RadarLayer, opt: OptimState, X, Y,
         stretch_grad=StretchGradMode.EXACT_MASKED):
    """One optimizer step on the batch mean loss; returns (layer, loss, grads)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    trace = forward_arrays(layer, X)
    loss = float(np.mean(batch_losses(trace, Y)))
    gg = gate_grads(layer, trace, Y, stretch_grad)
    if not gg.is_finite() or not np.isfinite(loss):
        raise NonFiniteGradient(f"non-finite gradient or loss at optimizer step {opt.t + 1}")
    params = opt.update(trainable(layer), grads_dict(gg))
    return with_trainable(layer, params), loss, gg


# --- experiment loop -----------------------------------------------------------


@dataclass
class TrainConfig:
    seed: int = 0
    n: int = 4
    d_in: int = 8
    d_out: int = 8
    r: int = 2
    r_a: int = 0  # 0 keeps theta_r dense
    k: int = 4
    tau: float = 1.0
    mode: str = "Radar"
    gate_variant: str = "ConcatProj"
    task: str = "OutOfCone"
    samples: int = 8
    margin: float = 0.1
    noise: float = 0.0
    clusters: int = 2
    expert_scale: float = 1.0
    optimizer: str = "Adam"
    lr: float = 1e-4
    batch: int = 4
    steps: int = 1000
    eval_every: int = 10
    stretch_grad: str = "ExactMasked"
    theta_s_init: float = 1e-2
    problem_seed: Optional[int] = None  # bank/task seed; defaults to seed

    def snapshot(self) -> dict:
        return asdict(self)


@dataclass
class Problem:
    bank: LoraBank
    base: FrozenBase
    task: SyntheticTask


def build_problem(cfg: TrainConfig) -> Problem:
    """Bank, frozen base and task; depends only on the problem seed and dims."""
    rng = Rng(cfg.seed if cfg.problem_seed is None else cfg.problem_seed)
    bank_rng, base_rng, task_rng = rng.spawn(1), rng.spawn(2), rng.spawn(3)
    bank = make_bank(bank_rng, cfg.n, cfg.d_in, cfg.d_out, cfg.r, cfg.expert_scale)
    base = FrozenBase(base_rng.normal((cfg.d_in, cfg.d_out)) / np.sqrt(cfg.d_in))
    kind = TaskKind(cfg.task)
    if kind is TaskKind.IN_CONE:
        task = make_in_cone_task(task_rng, bank, cfg.samples, cfg.noise, base)
    elif kind is TaskKind.OUT_OF_CONE:
        task = make_out_of_cone_task(task_rng, bank, cfg.samples, cfg.margin, base)
    else:
        task = make_multitask_mix(task_rng, bank, cfg.clusters, cfg.samples, base)
    return Problem(bank, base, task)


def init_layer(cfg: TrainConfig, problem: Problem) -> RadarLayer:
    """theta_s ~ U(+-theta_s_init), theta_r = 0 (factorized: U small, V = 0)."""
    rng = Rng(cfg.seed).spawn(4)
    variant = StretchMode(cfg.gate_variant)
    rows = cfg.d_in if variant is StretchMode.INPUT_PROJ else cfg.n * cfg.d_out
    a = cfg.theta_s_init
    theta_s = rng.uniform(-a, a, size=(rows, cfg.n))
    if cfg.r_a > 0:
        U = rng.uniform(-1.0, 1.0, size=(cfg.d_out, cfg.r_a)) / np.sqrt(cfg.r_a)
        rotation = RotationParams(U=U, V=np.zeros((cfg.r_a, cfg.d_out // 2)))
    else:
        rotation = RotationParams.zeros(cfg.d_out)
    stretch = StretchParams(theta_s, variant, cfg.tau, cfg.k)
    return RadarLayer(problem.base, problem.bank, stretch, rotation, GateMode(cfg.mode))


@dataclass
class EvalPoint:
    step: int
    loss: float
    grad_norm_s: float
    grad_norm_r: float
    cone_gap: float


@dataclass
class RunRecord:
    config: dict
    floor: float
    batch_loss: list
    evals: list
    angular_similarity: Optional[np.ndarray]
    wall_time: float
    final_layer: Optional[RadarLayer] = field(default=None, repr=False)
    rng_state: Optional[np.ndarray] = field(default=None, repr=False)
    steps_done: int = 0
    error: Optional[str] = None  # set when the run aborted on a non-finite gradient

    @property
    def eval_steps(self) -> np.ndarray:
        return np.array([e.step for e in self.evals])

    @property
    def eval_loss(self) -> np.ndarray:
        return np.array([e.loss for e in self.evals])

    @property
    def final_mse(self) -> float:
        return self.evals[-1].loss

    @property
    def best_mse(self) -> float:
        return float(self.eval_loss.min())


def evaluate(layer: RadarLayer, task: SyntheticTask, step_no: int,
             stretch_grad=StretchGradMode.EXACT_MASKED) -> EvalPoint:
    trace = forward_arrays(layer, task.X)
    mse = float(np.mean(batch_losses(trace, task.Y)))
    gg = gate_grads(layer, trace, task.Y, stretch_grad) if layer.mode is not GateMode.BASE_ONLY else GateGrads(None, None)
    return EvalPoint(step_no, mse, gg.norm_s(), gg.norm_r(), mse - task.floor)


def final_similarity(layer: RadarLayer, task: SyntheticTask) -> Optional[np.ndarray]:
    """Mean over training inputs of the cosine-similarity matrix of rotated outputs."""
    if layer.mode is GateMode.BASE_ONLY:
        return None
    trace = forward_arrays(layer, task.X)
    return np.mean([angular_similarity(vt) for vt in trace.v_tilde], axis=0)


def train(cfg: TrainConfig, problem: Optional[Problem] = None) -> RunRecord:
    """Fixed-seed loop: shuffled mini-batches, eval every ``eval_every`` steps and at the end."""
    start = time.perf_counter()
    problem = build_problem(cfg) if problem is None else problem
    task = problem.task
    layer = init_layer(cfg, problem)
    opt = OptimState(cfg.optimizer, cfg.lr)
    sg = StretchGradMode(cfg.stretch_grad)
    order_rng = Rng(cfg.seed).spawn(5)
    N = task.X.shape[0]
    batch = min(cfg.batch, N)
    evals = [evaluate(layer, task, 0, sg)]
    losses = []
    perm = order_rng.permutation(N)
    pos = 0
    done = 0
    error = None
    for t in range(1, cfg.steps + 1):
        if pos + batch > N:
            perm = order_rng.permutation(N)
            pos = 0
        idx = perm[pos:pos + batch]
        pos += batch
        try:
            layer, loss, _ = step(layer, opt, task.X[idx], task.Y[idx], sg)
        except NonFiniteGradient as exc:
            error = str(exc)
            break
        losses.append(loss)
        done = t
        if t % cfg.eval_every == 0 or t == cfg.steps:
            evals.append(evaluate(layer, task, t, sg))
    sim = final_similarity(layer, task) if error is None else None
    return RunRecord(cfg.snapshot(), task.floor, losses, evals, sim, time.perf_counter() - start,
                     layer, order_rng.get_state(), done, error)
