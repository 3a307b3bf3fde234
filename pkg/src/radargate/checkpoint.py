"""Binary checkpoints of a layer, an RNG stream and a step count.

Layout (little-endian throughout)::

    magic     4 bytes   b"RGK1"
    version   u32
    header    u32 n, d_in, d_out, r, r_a (0 = dense theta_r), k, theta_s rows
              u8 gate mode, u8 gate variant, 2 pad bytes, f64 tau
    matrices  f64, row-major, in order:
              W, A_0..A_{n-1}, B_0..B_{n-1}, theta_s, then theta_r or U, V
    rng       13 x u64 (Rng.get_state)
    step      u64
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .gates import RotationParams, StretchMode, StretchParams
from .layer import GateMode, RadarLayer
from .lora import FrozenBase, LoraBank, LoraModule

MAGIC = b"RGK1"
VERSION = 1
_MODES = list(GateMode)
_VARIANTS = list(StretchMode)
_HEAD = struct.Struct("<7I2B2xd")


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    def __init__(self, offset: int, need: int, have: int, what: str):
        self.offset = offset
        super().__init__(f"truncated checkpoint: {what} needs {need} bytes at byte offset {offset}, "
                         f"only {have} remain")


@dataclass
class Checkpoint:
    layer: RadarLayer
    rng_state: np.ndarray
    step: int
    version: int = VERSION


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode(layer: RadarLayer, rng_state=None, step: int = 0) -> bytes:
    bank = layer.bank
    rot = layer.rotation
    rng_state = np.zeros(13, dtype=np.uint64) if rng_state is None else np.asarray(rng_state, dtype=np.uint64)
    if rng_state.shape != (13,):
        raise ValueError("rng state must have 13 words")
    r = bank.modules[0].rank
    if any(m.rank != r for m in bank.modules):
        raise ValueError("checkpoint format needs a common LoRA rank")
    head = _HEAD.pack(
        bank.n, bank.d_in, bank.d_out, r, rot.r_a or 0, layer.stretch.k,
        layer.stretch.theta_s.shape[0], _MODES.index(layer.mode),
        _VARIANTS.index(layer.stretch.mode), float(layer.stretch.tau),
    )
    parts = [MAGIC, struct.pack("<I", VERSION), head, _f64(layer.base.W)]
    parts += [_f64(m.A) for m in bank.modules]
    parts += [_f64(m.B) for m in bank.modules]
    parts.append(_f64(layer.stretch.theta_s))
    if rot.factorized:
        parts += [_f64(rot.U), _f64(rot.V)]
    else:
        parts.append(_f64(rot.full))
    parts.append(rng_state.astype("<u8").tobytes())
    parts.append(struct.pack("<Q", int(step)))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        have = len(self.data) - self.pos
        if have < size:
            raise CheckpointTruncatedError(self.pos, size, have, what)
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out

    def mat(self, rows: int, cols: int, what: str) -> np.ndarray:
        raw = self.take(8 * rows * cols, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)


def decode(data: bytes) -> Checkpoint:
    rd = _Reader(data)
    if rd.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack("<I", rd.take(4, "version"))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads version {VERSION}")
    n, d_in, d_out, r, r_a, k, s_rows, mode_i, var_i, tau = _HEAD.unpack(rd.take(_HEAD.size, "header"))
    if mode_i >= len(_MODES) or var_i >= len(_VARIANTS):
        raise CheckpointFormatError(f"unknown gate mode/variant code ({mode_i}, {var_i})")
    W = rd.mat(d_in, d_out, "W")
    As = [rd.mat(d_in, r, f"A_{i}") for i in range(n)]
    Bs = [rd.mat(r, d_out, f"B_{i}") for i in range(n)]
    theta_s = rd.mat(s_rows, n, "theta_s")
    if r_a:
        rotation = RotationParams(U=rd.mat(d_out, r_a, "U"), V=rd.mat(r_a, d_out // 2, "V"))
    else:
        rotation = RotationParams(full=rd.mat(d_out, d_out // 2, "theta_r"))
    rng_state = np.frombuffer(rd.take(13 * 8, "rng state"), dtype="<u8").astype(np.uint64)
    (step,) = struct.unpack("<Q", rd.take(8, "step count"))
    if rd.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - rd.pos} trailing bytes after offset {rd.pos}")
    bank = LoraBank([LoraModule(a, b) for a, b in zip(As, Bs)])
    stretch = StretchParams(theta_s, _VARIANTS[var_i], tau, k)
    layer = RadarLayer(FrozenBase(W), bank, stretch, rotation, _MODES[mode_i])
    return Checkpoint(layer, rng_state, int(step), version)


def save_checkpoint(path, layer: RadarLayer, rng_state=None, step: int = 0) -> None:
    Path(path).write_bytes(encode(layer, rng_state, step))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
