"""Composable-LoRA gating with stretch (top-k magnitude) and rotation gates."""
from .costmodel import CostParams, analytic_flops, analytic_memory, counted_flops, parity_sweep
from .gates import (
    GateDecision,
    RotationParams,
    StretchMode,
    StretchParams,
    apply_rotation,
    rotation_angles,
    stretch_logits,
    topk_gate,
)
from .geometry import ConeProjection, EscapeProbe, cone_project, escape_probe, in_cone
from .grads import StretchGradMode, finite_diff_check, gate_grads, loss_mse
from .layer import ForwardTrace, GateMode, RadarLayer, forward, forward_batch
from .lora import FrozenBase, LoraBank, LoraModule, compose, expert_outputs, init_lora, make_bank, ref_sum
from .numkernel import Rng, hadamard, l2_normalize, matmul, pca_2d, softmax
from .train import OptimState, RunRecord, SyntheticTask, TrainConfig, train

__version__ = "0.1.0"
