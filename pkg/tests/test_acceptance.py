"""Acceptance criteria AC-1 .. AC-9; each prints one PASS/FAIL line."""
import time
from pathlib import Path

import numpy as np
import pytest

from radargate.checkpoint import decode, encode
from radargate.cli import gradcheck_rows, main, scale_sweep
from radargate.config import load_config
from radargate.costmodel import RADAR, STRETCH, CostParams, analytic_flops, analytic_memory, parity_sweep
from radargate.gates import apply_rotation, rotation_matrix
from radargate.geometry import cone_project
from radargate.layer import GateMode, forward_arrays
from radargate.numkernel import Rng
from radargate.train import build_problem, train

from conftest import random_layer

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def report(capsys, name, ok, detail, elapsed, limit):
    ok = ok and elapsed < limit
    with capsys.disabled():
        print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail} ({elapsed:.1f}s, limit {limit}s)")
    return ok


def test_ac1_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "gradcheck.cfg")
    rows, worst, skipped = gradcheck_rows(cfg)
    elapsed = time.perf_counter() - t0
    modes = {r[6] for r in rows}
    covered = modes == {f"Radar/{v}/{t}" for v in ("ConcatProj", "InputProj") for t in ("full", "factorized")}
    sizes_ok = all(r[2] <= 6 and r[3] <= 16 and r[4] <= 16 for r in rows)
    ok = len(rows) == 100 and skipped == 0 and covered and sizes_ok and worst < 1e-5
    assert report(capsys, "AC-1", ok, f"{len(rows) - skipped} configs, max rel err {worst:.2e}", elapsed, 60)


def test_ac2_rotation_kernel(capsys):
    t0 = time.perf_counter()
    rng = Rng(2)
    err_dense = err_iso = err_comp = err_inv = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 33))
        v = rng.normal(2 * m) * rng.uniform(0.1, 10.0)
        a = rng.uniform(-4 * np.pi, 4 * np.pi, size=m)
        b = rng.uniform(-4 * np.pi, 4 * np.pi, size=m)
        rv = apply_rotation(v, a)
        err_dense = max(err_dense, np.abs(rv - rotation_matrix(a) @ v).max())
        err_iso = max(err_iso, abs(np.linalg.norm(rv) - np.linalg.norm(v)) / np.linalg.norm(v))
        err_comp = max(err_comp, np.abs(apply_rotation(rv, b) - apply_rotation(v, a + b)).max())
        err_inv = max(err_inv, np.abs(apply_rotation(rv, -a) - v).max())
    elapsed = time.perf_counter() - t0
    ok = err_dense <= 1e-12 and err_iso <= 1e-12 and err_comp <= 1e-12 and err_inv <= 1e-12
    detail = f"dense {err_dense:.1e}, isometry {err_iso:.1e}, compose {err_comp:.1e}, inverse {err_inv:.1e}"
    assert report(capsys, "AC-2", ok, detail, elapsed, 5)


@pytest.fixture(scope="module")
def out_of_cone_runs():
    cfg = load_config(CONFIGS / "out_of_cone.cfg")
    t0 = time.perf_counter()
    runs = []
    for rep in range(cfg.repeats):
        seed = cfg.seed + rep
        problem = build_problem(cfg.train_config("StretchOnly", seed))
        runs.append((train(cfg.train_config("StretchOnly", seed), problem),
                     train(cfg.train_config("Radar", seed), problem)))
    return cfg, runs, time.perf_counter() - t0


def test_ac3_floor_and_attainability(capsys, out_of_cone_runs):
    cfg, runs, elapsed = out_of_cone_runs
    floor_ok = all(s.eval_loss.min() >= s.floor - 1e-6 for s, _ in runs)
    wins = sum(r.final_mse < 0.5 * r.floor for _, r in runs)
    steps_ok = all(r.steps_done <= 5000 and r.error is None for _, r in runs)
    margin_ok = cfg.margin == 0.1 and cfg.n == 4 and cfg.d_in == cfg.d_out == 8 and len(runs) == 10
    worst_gap = min(s.eval_loss.min() - s.floor for s, _ in runs)
    ok = floor_ok and wins >= 9 and steps_ok and margin_ok
    detail = f"StretchOnly min(MSE - floor) {worst_gap:.1e}; Radar < floor/2 on {wins}/{len(runs)} seeds"
    assert report(capsys, "AC-3", ok, detail, elapsed, 300)


def test_ac4_nesting(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        rng = Rng(1000 + i)
        n = int(rng.integers(1, 6))
        d_out = 2 * int(rng.integers(1, 5))
        variant = "ConcatProj" if i % 2 else "InputProj"
        layer = random_layer(i, n=n, d_in=int(rng.integers(1, 7)), d_out=d_out, r=1,
                             k=int(rng.integers(1, n + 1)), variant=variant, factorized=bool(i % 3 == 0),
                             r_a=1, theta_r_scale=0.0)
        X = rng.normal((3, layer.d_in))
        ya = forward_arrays(layer, X).y
        yb = forward_arrays(layer.with_params(mode=GateMode.STRETCH_ONLY), X).y
        worst = max(worst, np.abs(ya - yb).max())
    cfg = load_config(CONFIGS / "out_of_cone.cfg")
    same = True
    for seed in range(3):
        problem = build_problem(cfg.train_config("StretchOnly", seed, steps=1))
        s = train(cfg.train_config("StretchOnly", seed, steps=1), problem)
        r = train(cfg.train_config("Radar", seed, steps=1), problem)
        same &= s.evals[0].loss == r.evals[0].loss and s.batch_loss[0] == r.batch_loss[0]
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-15 and same
    assert report(capsys, "AC-4", ok, f"max |y_radar - y_stretch| {worst:.1e}; step-0 losses equal: {same}",
                  elapsed, 5)


@pytest.mark.slow
def test_ac5_scaling_trend(capsys):
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "scale_sweep.cfg")
    _, summary = scale_sweep(cfg)
    elapsed = time.perf_counter() - t0
    ns = [row[0] for row in summary]
    gap = {row[0]: row[3] for row in summary}
    below = all(row[2] <= row[1] for row in summary)
    pairs = [(5, 10), (10, 20), (20, 40), (5, 40)]
    rising = sum(gap[b] >= gap[a] for a, b in pairs)
    ok = ns == [5, 10, 20, 40] and cfg.repeats == 5 and below and rising >= 3
    detail = ("gap " + ", ".join(f"n={n}: {gap[n]:+.4f}" for n in ns)
              + f"; Radar <= StretchOnly everywhere: {below}; non-decreasing {rising}/4")
    assert report(capsys, "AC-5", ok, detail, elapsed, 1200)


def test_ac6_convergence(capsys, out_of_cone_runs):
    _, runs, elapsed = out_of_cone_runs
    wins = 0
    ratios = []
    for s, r in runs:
        best = s.best_mse
        s_steps = int(s.eval_steps[np.argmin(s.eval_loss)])
        hit = np.flatnonzero(r.eval_loss <= best)
        if hit.size and s_steps > 0:
            ratios.append(r.eval_steps[hit[0]] / s_steps)
            wins += ratios[-1] <= 0.5
    ok = wins >= 8
    detail = f"Radar hits StretchOnly's best within 50% of its steps on {wins}/{len(runs)} seeds"
    if ratios:
        detail += f" (median step ratio {np.median(ratios):.3f})"
    assert report(capsys, "AC-6", ok, detail, elapsed, 300)


def test_ac7_complexity(capsys):
    t0 = time.perf_counter()
    p = CostParams(L=1, n=2, d_in=4, d_out=4, r=2, k=1, r_a=1)
    micro = (analytic_flops(p, STRETCH), analytic_flops(p, RADAR),
             analytic_memory(p, STRETCH), analytic_memory(p, RADAR))
    cfg = load_config(CONFIGS / "complexity.cfg")
    reps = parity_sweep(cfg.d_list, cfg.n, cfg.r, cfg.k, cfg.r_a, L=cfg.seq_len, seed=cfg.seed)
    elapsed = time.perf_counter() - t0
    ratio_ok = all(r.ratio <= 2 for r in reps)
    brackets = [b for r in reps for b in (r.bracket_stretch, r.bracket_radar)]
    bracket_ok = all(0.5 <= b <= 3 for b in brackets)
    dims_ok = cfg.d_list == [64, 128, 256, 512, 1024, 2048, 4096] and (cfg.n, cfg.r, cfg.k, cfg.r_a) == (8, 8, 2, 4)
    ok = micro == (28, 44, 44, 60) and ratio_ok and bracket_ok and dims_ok
    detail = (f"micro {micro}; ratio max {max(r.ratio for r in reps):.4f}; "
              f"bracket [{min(brackets):.2f}, {max(brackets):.2f}]")
    assert report(capsys, "AC-7", ok, detail, elapsed, 10)


def test_ac8_oracle_soundness(capsys):
    t0 = time.perf_counter()
    rng = Rng(8)
    beaten = 0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        d = int(rng.integers(1, 9))
        v = rng.normal((n, d))
        t = rng.normal(d) * 2
        res = cone_project(t, v)
        w = rng.uniform(size=(10_000, n))
        w = -np.log(w)
        w /= w.sum(axis=1, keepdims=True)  # uniform on the simplex
        beaten += res.distance <= np.linalg.norm(w @ v - t, axis=1).min() + 1e-12
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    target = np.array([1.0, 1.0])
    grid = np.arange(0.0, 1.0 + 5e-5, 1e-4)[:, None]
    grid_dist = np.linalg.norm(grid * v[0] + (1 - grid) * v[1] - target, axis=1).min()
    dist = cone_project(target, v).distance
    elapsed = time.perf_counter() - t0
    ok = beaten == 100 and abs(dist - np.sqrt(0.5)) <= 1e-6 and abs(dist - grid_dist) <= 1e-6
    assert report(capsys, "AC-8", ok, f"beats sampling on {beaten}/100; example distance {dist:.9f}",
                  elapsed, 30)


AC9_CONFIGS = {
    "gradcheck": "gradcheck_configs = 5\n",
    "train": "n = 3\nd_in = 4\nd_out = 4\nr = 2\nr_a = 2\nk = 2\nsamples = 4\nlr = 0.01\nsteps = 30\neval_every = 10\n",
    "scale-sweep": "n_list = 3,4\nd_in = 4\nd_out = 4\nr = 2\nr_a = 0\nk = 2\nsamples = 4\nlr = 0.01\nsteps = 10\n",
    "cone-demo": "n = 3\nd_in = 4\nd_out = 4\nr = 2\nr_a = 0\nk = 3\nsamples = 2\nsteps = 10\nrepeats = 2\n"
                 "probe_samples = 10\nlr = 0.01\n",
    "complexity": "",
}


def test_ac9_determinism_and_persistence(capsys, tmp_path):
    t0 = time.perf_counter()
    identical = True
    codes = []
    for cmd, text in AC9_CONFIGS.items():
        cfg = tmp_path / f"{cmd}.cfg"
        cfg.write_text(text)
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{cmd}-{tag}"
            codes.append(main([cmd, "--config", str(cfg), "--out", str(out), "--seed", "3"]))
            outs.append(out)
        names = sorted(p.name for p in outs[0].glob("*.csv"))
        identical &= bool(names) and names == sorted(p.name for p in outs[1].glob("*.csv"))
        identical &= all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    bitwise = True
    for i in range(20):
        layer = random_layer(900 + i, n=3, d_in=5, d_out=6, k=2, factorized=bool(i % 2),
                             mode=("Radar", "StretchOnly", "RotationOnly", "BaseOnly")[i % 4])
        back = decode(encode(layer, Rng(i).get_state(), i)).layer
        X = Rng(i).normal((4, 5))
        bitwise &= forward_arrays(layer, X).y.tobytes() == forward_arrays(back, X).y.tobytes()
    elapsed = time.perf_counter() - t0
    ok = identical and bitwise and all(c == 0 for c in codes)
    assert report(capsys, "AC-9", ok, f"byte-identical CSVs: {identical}; checkpoint bitwise: {bitwise}",
                  elapsed, 10)
