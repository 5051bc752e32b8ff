import numpy as np
import pytest

from dynattn import SynthParams, Trajectory, default_roles, gen_dataset


def random_trajectory(rng, n_tokens=None, n_frames=None, map_dim=None):
    """Small random trajectory with EOS last, entries in [0, 2)."""
    n_tokens = n_tokens or int(rng.integers(2, 6))
    n_frames = n_frames or int(rng.integers(3, 8))
    map_dim = map_dim or int(rng.integers(1, 5))
    maps = rng.uniform(0.0, 2.0, size=(n_frames, n_tokens, map_dim, map_dim))
    return Trajectory(
        maps=maps,
        roles=default_roles(n_tokens),
        eos_index=n_tokens,
        sample_id=f"rand-{rng.integers(1 << 30)}",
        prompt="",
    )


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """30 + 30 samples at the default noise level; train split has 42 entries."""
    out = tmp_path_factory.mktemp("synth_small")
    return gen_dataset(30, 30, SynthParams(seed=11), out)
