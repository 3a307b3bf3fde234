import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from radargate.gates import RotationParams, StretchParams
from radargate.layer import RadarLayer
from radargate.lora import FrozenBase, make_bank
from radargate.numkernel import Rng

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_layer(seed, n=3, d_in=4, d_out=4, r=2, k=None, variant="ConcatProj", mode="Radar",
                 factorized=False, r_a=2, theta_r_scale=1.0, tau=1.0):
    rng = Rng(seed)
    bank = make_bank(rng, n, d_in, d_out, r)
    W = rng.normal((d_in, d_out)) / np.sqrt(d_in)
    rows = d_in if variant == "InputProj" else n * d_out
    stretch = StretchParams(rng.normal((rows, n)), variant, tau, n if k is None else k)
    if factorized:
        rot = RotationParams(U=rng.normal((d_out, r_a)) * theta_r_scale,
                             V=rng.normal((r_a, d_out // 2)) * theta_r_scale)
    else:
        rot = RotationParams(full=rng.normal((d_out, d_out // 2)) * theta_r_scale)
    return RadarLayer(FrozenBase(W), bank, stretch, rot, mode)


@pytest.fixture
def make_layer():
    return random_layer
