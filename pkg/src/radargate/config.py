"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored.  Lists are comma separated.
Every problem found while loading is collected and reported in one
:class:`ConfigError`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .gates import StretchMode
from .grads import StretchGradMode
from .layer import GateMode
from .train import TaskKind, TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


class UnknownKeyError(ConfigError):
    pass


KEYS = {
    "seed": "base seed; --seed on the command line overrides it",
    "n": "number of LoRA experts",
    "d_in": "input width",
    "d_out": "output width (even)",
    "r": "LoRA rank",
    "r_a": "rank of the theta_r factorization; 0 keeps theta_r dense",
    "k": "top-k of the stretch gate",
    "tau": "softmax temperature",
    "modes": "gate modes to train, e.g. StretchOnly,Radar",
    "gate_variant": "InputProj or ConcatProj",
    "task": "InCone, OutOfCone or MultiTaskMix",
    "samples": "training set size N",
    "margin": "out-of-cone margin",
    "noise": "in-cone target noise",
    "clusters": "expert clusters for MultiTaskMix",
    "cluster_size": "scale-sweep: experts per cluster (clusters = max(2, n // cluster_size))",
    "optimizer": "Adam or SGD",
    "lr": "learning rate",
    "batch": "mini-batch size",
    "steps": "optimizer steps per run",
    "eval_every": "evaluation period in steps",
    "stretch_grad": "ExactMasked or PaperApprox",
    "repeats": "seeds per (n, mode) / runs per subcommand",
    "n_list": "scale-sweep expert counts",
    "d_list": "complexity-sweep widths (even)",
    "gradcheck_configs": "number of random gradient-check configurations",
    "probe_samples": "random theta_r draws per cone-escape probe",
    "seq_len": "rows L used for counted FLOPs",
    "out": "output directory; --out on the command line overrides it",
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    n: int = 4
    d_in: int = 16
    d_out: int = 16
    r: int = 8
    r_a: int = 4
    k: int = 2
    tau: float = 1.0
    modes: list = field(default_factory=lambda: ["StretchOnly", "Radar"])
    gate_variant: str = "ConcatProj"
    task: str = "OutOfCone"
    samples: int = 8
    margin: float = 0.1
    noise: float = 0.0
    clusters: int = 2
    cluster_size: int = 2
    optimizer: str = "Adam"
    lr: float = 1e-4
    batch: int = 4
    steps: int = 1000
    eval_every: int = 10
    stretch_grad: str = "ExactMasked"
    repeats: int = 1
    n_list: list = field(default_factory=lambda: [5, 10, 20, 40])
    d_list: list = field(default_factory=lambda: [64, 128, 256, 512, 1024, 2048, 4096])
    gradcheck_configs: int = 100
    probe_samples: int = 200
    seq_len: int = 4
    out: Optional[str] = None

    def train_config(self, mode: str, seed: Optional[int] = None, **over) -> TrainConfig:
        base = TrainConfig(
            seed=self.seed if seed is None else seed, n=self.n, d_in=self.d_in, d_out=self.d_out,
            r=self.r, r_a=self.r_a, k=self.k, tau=self.tau, mode=mode,
            gate_variant=self.gate_variant, task=self.task, samples=self.samples,
            margin=self.margin, noise=self.noise, clusters=self.clusters,
            optimizer=self.optimizer, lr=self.lr, batch=self.batch, steps=self.steps,
            eval_every=self.eval_every, stretch_grad=self.stretch_grad,
        )
        return replace(base, **over)


_LISTS = {"modes": str, "n_list": int, "d_list": int}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    if key in _LISTS:
        conv = _LISTS[key]
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return [conv(s) for s in items]
    kind = _TYPES[key]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _enum_ok(enum, value) -> bool:
    try:
        enum(value)
    except ValueError:
        return False
    return True


def validate(cfg: ExperimentConfig) -> list:
    """All constraint violations, one message per offending field."""
    bad = []

    def need(cond, key, msg):
        if not cond:
            bad.append(f"{key}: {msg}")

    for key in ("n", "d_in", "d_out", "r", "k", "samples", "batch", "eval_every", "repeats",
                "gradcheck_configs", "probe_samples", "seq_len", "clusters", "cluster_size"):
        need(getattr(cfg, key) >= 1, key, "must be >= 1")
    need(cfg.d_out % 2 == 0, "d_out", f"must be even, got {cfg.d_out}")
    need(cfg.r <= min(cfg.d_in, cfg.d_out), "r", "must not exceed min(d_in, d_out)")
    need(0 <= cfg.r_a <= cfg.d_out, "r_a", "must lie in [0, d_out]")
    need(cfg.k <= cfg.n, "k", f"must not exceed n ({cfg.n})")
    need(cfg.clusters <= cfg.n, "clusters", f"must not exceed n ({cfg.n})")
    need(cfg.tau > 0, "tau", "must be positive")
    need(cfg.lr > 0, "lr", "must be positive")
    need(cfg.margin > 0, "margin", "must be positive")
    need(cfg.noise >= 0, "noise", "must be >= 0")
    need(cfg.steps >= 0, "steps", "must be >= 0")
    need(0 <= cfg.seed < 2 ** 64, "seed", "must be a 64-bit unsigned integer")
    need(cfg.optimizer in ("Adam", "SGD"), "optimizer", f"unknown optimizer {cfg.optimizer!r}")
    need(_enum_ok(StretchMode, cfg.gate_variant), "gate_variant", f"unknown variant {cfg.gate_variant!r}")
    need(_enum_ok(TaskKind, cfg.task), "task", f"unknown task {cfg.task!r}")
    need(_enum_ok(StretchGradMode, cfg.stretch_grad), "stretch_grad", f"unknown mode {cfg.stretch_grad!r}")
    need(len(cfg.modes) > 0, "modes", "must list at least one mode")
    for m in cfg.modes:
        need(_enum_ok(GateMode, m), "modes", f"unknown gate mode {m!r}")
    need(len(cfg.n_list) > 0, "n_list", "must be non-empty")
    need(all(v >= 2 for v in cfg.n_list), "n_list", "entries must be >= 2")
    need(len(cfg.d_list) > 0, "d_list", "must be non-empty")
    for d in cfg.d_list:
        need(d >= 2 and d % 2 == 0, "d_list", f"entries must be even and >= 2, got {d}")
    return bad


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    values = {}
    problems = []
    unknown = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            unknown.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in values:
            problems.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = _convert(key, raw)
        except ValueError:
            problems.append(f"{key}: cannot parse {raw!r} as {_LISTS.get(key, _TYPES[key])}")
    if unknown:
        raise UnknownKeyError(unknown + problems)
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(**values)
    bad = validate(cfg)
    if bad:
        raise ConfigError(bad)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        if f.name == "out":
            continue
        val = getattr(cfg, f.name)
        if isinstance(val, list):
            val = ",".join(str(v) for v in val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
