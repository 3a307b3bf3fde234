import numpy as np
import pytest

from radargate.checkpoint import (CheckpointFormatError, CheckpointTruncatedError, CheckpointVersionError, decode,
                                  encode, load_checkpoint, save_checkpoint)
from radargate.config import (ConfigError, ExperimentConfig, UnknownKeyError, dump_config, load_config,
                              parse_config)
from radargate.layer import forward_arrays
from radargate.numkernel import Rng

from conftest import random_layer


def test_defaults_parse():
    assert parse_config("") == ExperimentConfig()


def test_unknown_key_named():
    with pytest.raises(UnknownKeyError) as exc:
        parse_config("n = 4\nfoo = 1\n", "x.cfg")
    assert "foo" in str(exc.value)
    assert "x.cfg:2" in str(exc.value)


def test_errors_are_aggregated():
    with pytest.raises(ConfigError) as exc:
        parse_config("d_out = 7\nk = 9\ntau = -1\n")
    fields = {p.split(":")[0] for p in exc.value.problems}
    assert {"d_out", "k", "tau"} <= fields


def test_bad_value_and_syntax():
    with pytest.raises(ConfigError) as exc:
        parse_config("n = four\njunk line\n")
    assert len(exc.value.problems) == 2


def test_comments_and_lists():
    cfg = parse_config("# header\nn_list = 5, 10 ,20  # trailing\nmodes = Radar\n")
    assert cfg.n_list == [5, 10, 20]
    assert cfg.modes == ["Radar"]


def test_dump_round_trip(tmp_path):
    cfg = parse_config("seed = 7\nlr = 0.01\nn_list = 3,6\nmodes = StretchOnly,Radar\ntask = MultiTaskMix\n")
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for p in sorted(root.glob("*.cfg")):
        load_config(p)


def test_train_config_overrides():
    cfg = ExperimentConfig(n=5, k=3)
    tc = cfg.train_config("Radar", seed=11, steps=3)
    assert (tc.n, tc.k, tc.seed, tc.steps, tc.mode) == (5, 3, 11, 3, "Radar")


@pytest.mark.parametrize("factorized", [False, True])
@pytest.mark.parametrize("mode", ["Radar", "StretchOnly"])
def test_checkpoint_round_trip_bitwise(tmp_path, factorized, mode):
    layer = random_layer(1, n=3, d_in=5, d_out=6, k=2, factorized=factorized, mode=mode, tau=0.7)
    rng = Rng(2)
    rng.normal(5)
    path = tmp_path / "m.rgk"
    save_checkpoint(path, layer, rng.get_state(), step=123)
    ck = load_checkpoint(path)
    X = Rng(3).normal((4, 5))
    a, b = forward_arrays(layer, X).y, forward_arrays(ck.layer, X).y
    assert a.tobytes() == b.tobytes()
    assert ck.step == 123
    assert np.array_equal(ck.rng_state, rng.get_state())
    again = Rng(0)
    again.set_state(ck.rng_state)
    assert np.array_equal(again.normal(3), rng.normal(3))
    assert encode(ck.layer, ck.rng_state, ck.step) == path.read_bytes()


def test_truncated_reports_offset():
    data = encode(random_layer(4), step=1)
    cut = data[:len(data) - 20]
    with pytest.raises(CheckpointTruncatedError) as exc:
        decode(cut)
    assert exc.value.offset == len(data) - 8 - 13 * 8
    assert f"byte offset {exc.value.offset}" in str(exc.value)


def test_bad_magic_and_version():
    data = encode(random_layer(5))
    with pytest.raises(CheckpointFormatError):
        decode(b"XXXX" + data[4:])
    with pytest.raises(CheckpointVersionError):
        decode(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointFormatError):
        decode(data + b"\0")
