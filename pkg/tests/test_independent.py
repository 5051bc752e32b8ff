import math

import numpy as np
import pytest

from dynattn import (
    ConfigOutOfRange,
    DaaIConfig,
    IndexOutOfRange,
    InvalidAxisValue,
    SynthParams,
    Trajectory,
    classify_i,
    daa_i_score,
    default_roles,
    evolve_rate,
    evolve_rates,
    gen_trajectory,
    relative_series,
)

from conftest import random_trajectory
from oracles import oracle_daa_i


def traj_from_rates(per_token_rates):
    """L tokens whose 1x1 maps walk upward with the given per-step increments."""
    rates = np.asarray(per_token_rates, dtype=np.float64)  # (T, L)
    n_steps, n_tokens = rates.shape
    maps = np.zeros((n_steps + 1, n_tokens, 1, 1))
    maps[1:, :, 0, 0] = np.cumsum(rates, axis=0)
    return Trajectory(maps=maps, roles=default_roles(n_tokens), eos_index=n_tokens)


def test_config_validation():
    with pytest.raises(ConfigOutOfRange):
        DaaIConfig(t=-1)
    with pytest.raises(ConfigOutOfRange):
        DaaIConfig(s=0)
    with pytest.raises(ConfigOutOfRange):
        DaaIConfig(alpha=float("nan"))
    cfg = DaaIConfig()
    assert (cfg.t, cfg.s, cfg.alpha) == (3, 2, -0.0011)


def test_evolve_rate_identical_frames_zero():
    maps = np.tile(np.random.default_rng(0).uniform(0, 1, size=(1, 3, 2, 2)), (4, 1, 1, 1))
    traj = Trajectory(maps=maps, roles=default_roles(3), eos_index=3)
    for token in range(1, 4):
        for step in range(3):
            assert evolve_rate(traj, token, step) == 0.0


def test_evolve_rate_hand_value():
    maps = np.zeros((2, 2, 2, 2))
    maps[0, 0] = [[1.0, 0.0], [0.0, 1.0]]
    maps[1, 0] = [[1.1, 0.0], [0.0, 1.1]]
    maps[:, 1] = 1.0
    traj = Trajectory(maps=maps, roles=default_roles(2), eos_index=2)
    assert evolve_rate(traj, 1, 0) == pytest.approx(0.1 * math.sqrt(2.0), abs=1e-12)


def test_evolve_rate_scaling():
    rng = np.random.default_rng(21)
    base = rng.uniform(0, 1, size=(3, 3))
    delta = rng.uniform(0, 1, size=(3, 3))
    for k in (0.5, 2.0, 7.25):
        maps = np.stack([np.stack([base, np.ones((3, 3))]), np.stack([base + k * delta, np.ones((3, 3))])])
        traj = Trajectory(maps=maps, roles=default_roles(2), eos_index=2)
        unit = np.sqrt(np.sum(delta * delta))
        assert evolve_rate(traj, 1, 0) == pytest.approx(k * unit, rel=1e-12)


def test_evolve_rate_bounds():
    traj = traj_from_rates([[1.0, 1.0]])
    with pytest.raises(IndexOutOfRange):
        evolve_rate(traj, 0, 0)
    with pytest.raises(IndexOutOfRange):
        evolve_rate(traj, 3, 0)
    with pytest.raises(IndexOutOfRange):
        evolve_rate(traj, 1, 1)


def test_evolve_rates_matches_scalar():
    rng = np.random.default_rng(3)
    traj = random_trajectory(rng)
    rates = evolve_rates(traj)
    assert rates.shape == (traj.n_steps, traj.n_tokens)
    for step in range(traj.n_steps):
        for token in range(1, traj.n_tokens + 1):
            assert rates[step, token - 1] == pytest.approx(evolve_rate(traj, token, step), abs=1e-15)


def test_score_identical_frames_zero():
    maps = np.ones((5, 3, 2, 2))
    traj = Trajectory(maps=maps, roles=default_roles(3), eos_index=3)
    assert daa_i_score(traj, DaaIConfig(t=0, s=3)) == 0.0


def test_score_hand_value():
    # EOS rate 1.0, lone non-EOS rate 2.0, two steps: (1-2)+(1-2) = -2
    traj = traj_from_rates([[2.0, 1.0], [2.0, 1.0]])
    assert daa_i_score(traj, DaaIConfig(t=0, s=1)) == pytest.approx(-2.0, abs=1e-12)


def test_score_window_bound():
    traj = traj_from_rates([[1.0, 1.0], [1.0, 1.0]])  # steps 0..1
    daa_i_score(traj, DaaIConfig(t=0, s=1))
    with pytest.raises(ConfigOutOfRange):
        daa_i_score(traj, DaaIConfig(t=0, s=2))
    with pytest.raises(ConfigOutOfRange):
        daa_i_score(traj, DaaIConfig(t=1, s=1))


def test_score_permutation_invariance():
    rng = np.random.default_rng(17)
    for _ in range(20):
        traj = random_trajectory(rng, n_tokens=5)
        perm = np.concatenate([rng.permutation(4), [4]])  # EOS stays last
        permuted = Trajectory(
            maps=traj.maps[:, perm], roles=traj.roles, eos_index=traj.eos_index
        )
        cfg = DaaIConfig(t=0, s=traj.n_steps - 1)
        assert daa_i_score(permuted, cfg) == pytest.approx(daa_i_score(traj, cfg), abs=1e-12)


def test_score_additivity():
    rng = np.random.default_rng(29)
    for _ in range(20):
        traj = random_trajectory(rng, n_frames=6)  # steps 0..4
        total = daa_i_score(traj, DaaIConfig(t=0, s=3))
        parts = daa_i_score(traj, DaaIConfig(t=0, s=1)) + daa_i_score(traj, DaaIConfig(t=2, s=1))
        assert total == pytest.approx(parts, abs=1e-12)
        rel = relative_series(evolve_rates(traj), traj.eos_index - 1)
        assert total == pytest.approx(float(rel[0:4].sum()), abs=1e-12)


def test_score_brute_force_oracle():
    rng = np.random.default_rng(101)
    for _ in range(60):
        traj = random_trajectory(rng)
        t = int(rng.integers(0, traj.n_steps - 1))
        s = int(rng.integers(1, traj.n_steps - t))
        got = daa_i_score(traj, DaaIConfig(t=t, s=s))
        want = oracle_daa_i(traj.maps.tolist(), t, s)
        assert math.isfinite(got)
        assert got == pytest.approx(want, abs=1e-12)


def test_score_synthetic_signs():
    for seed in (1, 2, 3):
        backdoor = gen_trajectory(SynthParams(eos_rate_factor=0.5, seed=seed), "backdoor")
        benign = gen_trajectory(SynthParams(eos_rate_factor=1.5, seed=seed), "benign")
        cfg = DaaIConfig()
        assert daa_i_score(backdoor, cfg) < 0
        assert daa_i_score(benign, cfg) > 0


def test_token_choice_variants():
    traj = traj_from_rates([[2.0, 3.0, 1.0], [2.0, 3.0, 1.0]])
    cfg = DaaIConfig(t=0, s=1)
    assert daa_i_score(traj, cfg, token_choice="eos") == pytest.approx(2 * (1.0 - 2.5), abs=1e-12)
    assert daa_i_score(traj, cfg, token_choice="bos") == pytest.approx(2 * (2.0 - 2.0), abs=1e-12)
    assert daa_i_score(traj, cfg, token_choice="all") == pytest.approx(2 * 2.0, abs=1e-12)
    with pytest.raises(InvalidAxisValue):
        daa_i_score(traj, cfg, token_choice="middle")


def test_classify_inclusive():
    assert classify_i(-0.0011, -0.0011) == "backdoor"
    assert classify_i(0.0, -0.0011) == "benign"
    assert classify_i(-0.5, -0.0011) == "backdoor"
