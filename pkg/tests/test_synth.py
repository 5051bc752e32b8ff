import math

import numpy as np
import pytest

from dynattn import (
    DaaIConfig,
    InvalidParams,
    SynthParams,
    daa_i_score,
    evolve_rate,
    gen_dataset,
    gen_trajectory,
    load_manifest,
    save_trajectory,
)
from dynattn.synth import TARGET_DISTANCE
from dynattn.trajectory import ROLE_BOS, ROLE_EOS

NOISELESS = SynthParams(noise_sigma=0.0)


def test_params_defaults():
    p = SynthParams()
    assert (p.n_tokens, p.map_dim, p.n_steps) == (8, 16, 20)
    assert (p.eos_rate_factor, p.base_rate, p.noise_sigma) == (1.0, 0.05, 0.05)


def test_params_validation():
    bad = [
        dict(n_tokens=1),
        dict(map_dim=1),
        dict(n_steps=5),
        dict(eos_rate_factor=0.0),
        dict(eos_rate_factor=-0.5),
        dict(eos_rate_factor=math.nan),
        dict(base_rate=0.0),
        dict(base_rate=1.5),
        dict(base_rate=0.5, eos_rate_factor=3.0),  # combined rate above 1
        dict(noise_sigma=-0.1),
        dict(warmup=-1),
        dict(seed=-1),
        dict(seed=2**64),
    ]
    for kwargs in bad:
        with pytest.raises(InvalidParams):
            SynthParams(**kwargs)


def test_label_must_match_rate_regime():
    with pytest.raises(InvalidParams, match="inconsistent"):
        gen_trajectory(SynthParams(eos_rate_factor=1.2), "backdoor")
    with pytest.raises(InvalidParams, match="inconsistent"):
        gen_trajectory(SynthParams(eos_rate_factor=0.5), "benign")
    with pytest.raises(InvalidParams, match="label"):
        gen_trajectory(SynthParams(), "poisoned")


def test_trajectory_shape_and_invariants():
    traj = gen_trajectory(SynthParams(seed=3), "benign")
    assert traj.maps.shape == (21, 8, 16, 16)
    assert traj.eos_index == 8
    assert traj.roles[-1] == ROLE_EOS and traj.roles[0] == ROLE_BOS
    assert np.all(traj.maps >= 0.0)
    assert traj.sample_id == "synth-benign-3"


def test_equal_rates_give_near_zero_score():
    # with rho = 1 every token relaxes identically and start-target distances
    # are equal by construction, so the relative term cancels
    for seed in (0, 1, 2, 3, 4):
        traj = gen_trajectory(SynthParams(noise_sigma=0.0, seed=seed), "benign")
        assert abs(daa_i_score(traj, DaaIConfig())) < 1e-6


def test_backdoor_rate_negative_at_every_window():
    params = SynthParams(n_tokens=3, eos_rate_factor=0.5, noise_sigma=0.0, seed=5)
    traj = gen_trajectory(params, "backdoor")
    n_steps = traj.n_steps
    for t in range(n_steps - 1):
        for s in range(1, n_steps - t):
            assert daa_i_score(traj, DaaIConfig(t=t, s=s)) < 0.0


def test_noiseless_rates_match_geometric_decay():
    # relaxation keeps target - M shrinking by (1 - rate) per step, so the
    # step-t rate is rate * (1-rate)^(warmup+t) * start-target distance
    params = SynthParams(n_tokens=4, map_dim=3, eos_rate_factor=0.5, noise_sigma=0.0, seed=9)
    traj = gen_trajectory(params, "backdoor")
    for token in range(1, 5):
        rate = params.base_rate * (params.eos_rate_factor if token == 4 else 1.0)
        for step in (0, 1, 7, params.n_steps - 1):
            want = rate * (1.0 - rate) ** (params.warmup + step) * TARGET_DISTANCE
            assert evolve_rate(traj, token, step) == pytest.approx(want, rel=1e-11)


def test_score_monotone_in_rate_factor():
    grid = [0.25, 0.5, 0.75, 1.0, 1.5]
    for seed in (0, 1, 2):
        scores = []
        for rho in grid:
            params = SynthParams(eos_rate_factor=rho, noise_sigma=0.0, seed=seed)
            label = "backdoor" if rho < 1.0 else "benign"
            scores.append(daa_i_score(gen_trajectory(params, label), DaaIConfig()))
        assert all(a < b for a, b in zip(scores, scores[1:])), scores


def test_same_seed_is_byte_identical(tmp_path):
    params = SynthParams(n_tokens=3, map_dim=4, n_steps=6, seed=21)
    a = gen_trajectory(params, "benign")
    b = gen_trajectory(params, "benign")
    assert np.array_equal(a.maps, b.maps)
    save_trajectory(a, tmp_path / "a.daat")
    save_trajectory(b, tmp_path / "b.daat")
    assert (tmp_path / "a.daat").read_bytes() == (tmp_path / "b.daat").read_bytes()


def test_dataset_split_counts(tmp_path):
    template = SynthParams(n_tokens=2, map_dim=2, n_steps=6, seed=1)
    manifest = gen_dataset(100, 100, template, tmp_path)
    assert len(manifest.entries) == 200
    assert len(list(tmp_path.glob("*.daat"))) == 200
    train = manifest.subset("train")
    test = manifest.subset("test")
    assert (len(train.entries), len(test.entries)) == (140, 60)
    for split, count in ((train, 70), (test, 30)):
        assert len(split.subset(label="benign").entries) == count
        assert len(split.subset(label="backdoor").entries) == count
    assert {e.scenario for e in manifest.entries} == {"synthetic"}


def test_dataset_round_trip(small_dataset):
    reloaded = load_manifest(small_dataset.root / "manifest.jsonl")
    assert reloaded.entries == small_dataset.entries
    for entry in reloaded.entries:
        traj = reloaded.load(entry)  # loader revalidates all invariants
        assert traj.sample_id == entry.path.removesuffix(".daat")


def test_dataset_generation_is_deterministic(tmp_path):
    template = SynthParams(n_tokens=2, map_dim=2, n_steps=6, seed=77)
    m1 = gen_dataset(3, 3, template, tmp_path / "one")
    m2 = gen_dataset(3, 3, template, tmp_path / "two")
    assert [e.path for e in m1.entries] == [e.path for e in m2.entries]
    for entry in m1.entries:
        assert m1.resolve(entry).read_bytes() == m2.resolve(entry).read_bytes()


def test_dataset_argument_errors(tmp_path):
    template = SynthParams(n_tokens=2, map_dim=2, n_steps=6)
    with pytest.raises(InvalidParams):
        gen_dataset(0, 5, template, tmp_path)
    with pytest.raises(InvalidParams):
        gen_dataset(5, 0, template, tmp_path)
    with pytest.raises(InvalidParams):
        gen_dataset(2, 2, template, tmp_path, train_fraction=1.0)
