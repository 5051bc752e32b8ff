"""End-to-end acceptance gate.

One test per acceptance criterion, each printing a single pass line with the
measured margin.  Tolerances and runtime budgets are pinned in the asserts.
"""

import math
from time import perf_counter

import numpy as np
import pytest

from dynattn import (
    DaaIConfig,
    DaaSConfig,
    SynthParams,
    Trajectory,
    calibrate_threshold,
    classify_i,
    classify_s,
    daa_i_score,
    daa_s_score,
    default_roles,
    edge_weights,
    evaluate,
    f1_score,
    gen_dataset,
    integrate_states,
    laplacian,
    lyapunov_derivative,
    rer_eos,
    score_manifest,
    score_trajectory_s,
    sweep_params,
    METHOD_I,
    METHOD_S,
    METHODS,
)

from conftest import random_trajectory
from oracles import oracle_daa_i, oracle_daa_s, oracle_expm_trace, oracle_rer_eos


def report(number, detail):
    print(f"criterion {number}: PASS ({detail})")


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """The 200 + 200 synthetic dataset, shared by criteria 5 and 9."""
    out = tmp_path_factory.mktemp("synth_e2e")
    t0 = perf_counter()
    manifest = gen_dataset(200, 200, SynthParams(seed=29), out)
    return manifest, perf_counter() - t0


def test_criterion_1_lyapunov_negativity():
    rng = np.random.default_rng(101)
    t0 = perf_counter()
    worst_dv = -math.inf
    worst_eig = -math.inf
    for _ in range(1000):
        n = int(rng.integers(2, 21))
        frame = rng.uniform(0.0, 2.0, size=(n, 3, 3))
        lap = laplacian(edge_weights(frame))
        params = DaaSConfig().stability(n, eos_index=n)
        x = rng.normal(size=n)
        assert np.any(x != 0.0)
        dv = lyapunov_derivative(x, params.gamma, lap, params.c)
        assert dv < 0.0
        eig = float(np.linalg.eigvalsh(lap.T + lap).max())
        assert eig <= 1e-9
        worst_dv = max(worst_dv, dv)
        worst_eig = max(worst_eig, eig)
    elapsed = perf_counter() - t0
    assert elapsed < 10.0
    report(1, f"1000 states, max dV/dt {worst_dv:.3e}, max eig {worst_eig:.1e}, {elapsed:.1f}s")


def test_criterion_2_constant_coupling_matches_matrix_exponential():
    rng = np.random.default_rng(103)
    cfg = DaaSConfig()
    t0 = perf_counter()
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 7))
        frame = rng.uniform(0.0, 2.0, size=(n, 3, 3))
        traj = Trajectory(
            maps=np.tile(frame, (51, 1, 1, 1)),
            roles=default_roles(n),
            eos_index=n,
            sample_id="const",
        )
        got = integrate_states(traj, cfg, t_end=50).states
        params = cfg.stability(n, eos_index=n)
        want = oracle_expm_trace(params.gamma, laplacian(edge_weights(frame)), params.c, np.ones(n), 50)
        norms = np.linalg.norm(want, axis=1)
        # relative comparison is meaningful while the exact solution stays
        # above the solver's absolute-tolerance regime
        mask = norms >= 1e-3 * norms[0]
        assert mask[:2].all()
        rel = np.linalg.norm(got[mask] - want[mask], axis=1) / norms[mask]
        assert rel.max() < 1e-6
        worst = max(worst, float(rel.max()))
    elapsed = perf_counter() - t0
    assert elapsed < 30.0
    report(2, f"50 systems, horizon 50, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_brute_force_equivalence():
    rng = np.random.default_rng(107)
    cfg_s_base = DaaSConfig()
    for _ in range(200):
        traj = random_trajectory(rng)
        steps = traj.n_steps

        t = int(rng.integers(0, steps - 1))
        s = int(rng.integers(1, steps - t))
        got_i = daa_i_score(traj, DaaIConfig(t=t, s=s))
        assert got_i == pytest.approx(oracle_daa_i(traj.maps.tolist(), t, s, traj.eos_index), abs=1e-12)

        step = int(rng.integers(0, steps))
        want_r = np.asarray(oracle_rer_eos(traj.maps.tolist(), step, traj.eos_index))
        assert np.allclose(rer_eos(traj, step), want_r, atol=1e-12, rtol=0.0)

        trace = integrate_states(traj, cfg_s_base)
        t2 = int(rng.integers(0, steps - 1))
        s2 = int(rng.integers(1, steps - t2))
        cfg_s = DaaSConfig(t=t2, s=s2)
        got_s = daa_s_score(trace, cfg_s, traj.eos_index)
        want_s = oracle_daa_s(trace.states.tolist(), t2, s2, traj.eos_index)
        assert got_s == pytest.approx(want_s, abs=1e-12)
    report(3, "200 trajectories, daa_i / rer_eos / daa_s vs literal expansion at 1e-12")


def test_criterion_4_laplacian_structure_fuzz():
    rng = np.random.default_rng(109)
    worst = 0.0
    for k in range(1000):
        n = int(rng.integers(2, 13))
        d = int(rng.integers(1, 5))
        frame = rng.uniform(0.0, 2.0, size=(n, d, d))
        if k % 10 == 0:
            frame = np.tile(frame[:1], (n, 1, 1))  # degenerate: equal pair distances
        w = edge_weights(frame)
        assert np.array_equal(w, w.T)
        assert np.all((w >= 0.0) & (w <= 1.0))
        assert np.all(np.diag(w) == 0.0)
        a = laplacian(w)
        resid = max(
            float(np.abs(a.sum(axis=0)).max()),
            float(np.abs(a.sum(axis=1)).max()),
        )
        assert resid < 1e-9
        worst = max(worst, resid)
    report(4, f"1000 frames, max row/col residual {worst:.1e}")


def test_criterion_5_synthetic_end_to_end(e2e):
    manifest, gen_seconds = e2e
    t0 = perf_counter()
    summary = []
    for method, cfg in ((METHOD_I, DaaIConfig()), (METHOD_S, DaaSConfig())):
        train, failed = score_manifest(manifest, method, cfg, split="train")
        assert failed == []
        threshold = calibrate_threshold(train)
        test, failed = score_manifest(manifest, method, cfg, split="test")
        assert failed == []
        rep = evaluate(test, threshold)
        assert rep.auc >= 0.95
        assert rep.f1 >= 0.90
        summary.append(f"{method} auc {rep.auc:.3f} f1 {rep.f1:.3f}")
    elapsed = gen_seconds + (perf_counter() - t0)
    assert elapsed < 120.0
    report(5, f"200+200 samples, {'; '.join(summary)}, {elapsed:.1f}s")


def test_criterion_6_threshold_boundary_is_backdoor():
    alpha_i = DaaIConfig().alpha
    alpha_s = DaaSConfig().alpha
    assert classify_i(alpha_i, alpha_i) == "backdoor"
    assert classify_s(alpha_s, alpha_s) == "backdoor"
    assert classify_i(alpha_i + 1e-12, alpha_i) == "benign"
    assert classify_s(alpha_s + 1e-12, alpha_s) == "benign"
    report(6, f"score == alpha is backdoor for both detectors ({alpha_i}, {alpha_s})")


def test_criterion_7_constant_trajectory_is_benign():
    rng = np.random.default_rng(113)
    frame = rng.uniform(0.0, 2.0, size=(6, 4, 4))
    traj = Trajectory(
        maps=np.tile(frame, (8, 1, 1, 1)),
        roles=default_roles(6),
        eos_index=6,
        sample_id="flat",
    )
    cfg = DaaIConfig()
    score = daa_i_score(traj, cfg)
    assert score == 0.0
    assert classify_i(score, cfg.alpha) == "benign"
    report(7, f"identical frames score 0.0, benign under alpha {cfg.alpha}")


def _best_of(fn, repeats=5):
    best = math.inf
    for _ in range(repeats):
        t0 = perf_counter()
        fn()
        best = min(best, perf_counter() - t0)
    return best


def test_criterion_8_performance_envelope():
    rng = np.random.default_rng(127)
    maps = rng.uniform(0.0, 2.0, size=(8, 77, 16, 16))
    traj = Trajectory(maps=maps, roles=default_roles(77), eos_index=77, sample_id="wide")

    cfg_i = DaaIConfig()  # s=2 window
    daa_i_score(traj, cfg_i)  # warm
    t_i = _best_of(lambda: daa_i_score(traj, cfg_i))
    assert t_i < 0.010

    cfg_s = DaaSConfig(t=0, s=5)  # integration spans exactly 6 unit intervals
    short = Trajectory(maps=maps[:7], roles=traj.roles, eos_index=77, sample_id="wide6")
    score_trajectory_s(short, cfg_s)  # warm
    t_s = _best_of(lambda: score_trajectory_s(short, cfg_s), repeats=3)
    assert t_s < 0.200
    report(8, f"daa_i {t_i * 1e3:.2f}ms (< 10ms), daa_s {t_s * 1e3:.1f}ms (< 200ms)")


def test_criterion_9_sweep_matches_single_runs(e2e):
    manifest, _ = e2e
    t_values = range(0, 4)
    s_values = range(1, 10)
    for method in METHODS:
        grid = sweep_params(manifest, method, t_values, s_values)
        assert grid.valid.all()
        for a, t in enumerate(t_values):
            for b, s in enumerate(s_values):
                cfg = DaaIConfig(t=t, s=s) if method == METHOD_I else DaaSConfig(t=t, s=s)
                train, failed = score_manifest(manifest, method, cfg, split="train")
                assert failed == []
                threshold = calibrate_threshold(train)
                preds = ["backdoor" if x.score <= threshold else "benign" for x in train]
                assert grid.thresholds[a, b] == threshold
                assert grid.f1[a, b] == f1_score(preds, [x.label for x in train])
    report(9, "4x9 grid, both methods, every cell equals its single-configuration run")
