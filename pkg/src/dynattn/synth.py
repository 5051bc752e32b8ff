"""Synthetic attention-trajectory generator.

Each token's map relaxes exponentially from a random start toward a random
target at per-step rate base_rate, except the EOS token which relaxes at
base_rate * eos_rate_factor.  Factors below 1 emulate the slow-dissipating
EOS attention of backdoor samples; factors of 1 or above emulate benign ones.

Geometry: starts cluster tightly around one random base map and every target
sits at the same Frobenius distance from its start (random direction).  With
equal rates this makes all per-token evolve-rate norms agree to rounding, and
with unequal rates it moves the EOS map measurably closer to (or farther from)
the rest of the cluster, which is what the detectors measure.  Recording
begins a couple of relaxation steps past the start (warmup) so the geometry
differential is present from the first recorded frame onward.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidParams
from .trajectory import (
    LABEL_BACKDOOR,
    LABEL_BENIGN,
    LABELS,
    SPLIT_TEST,
    SPLIT_TRAIN,
    DatasetManifest,
    ManifestEntry,
    Trajectory,
    default_roles,
    save_manifest,
    save_trajectory,
)

START_BASE_LOW = 26.0
START_BASE_HIGH = 34.0
START_JITTER = 0.05
TARGET_DISTANCE = 24.0

DEFAULT_RHO_BENIGN = 1.2
DEFAULT_RHO_BACKDOOR = 0.6


@dataclass(frozen=True)
class SynthParams:
    n_tokens: int = 8
    map_dim: int = 16
    n_steps: int = 20
    eos_rate_factor: float = 1.0
    base_rate: float = 0.05
    noise_sigma: float = 0.05
    seed: int = 0
    warmup: int = 2  # relaxation steps taken before frame 0 is recorded

    def __post_init__(self):
        if self.n_tokens < 2:
            raise InvalidParams(f"n_tokens={self.n_tokens} must be >= 2")
        if self.map_dim < 2:
            raise InvalidParams(f"map_dim={self.map_dim} must be >= 2")
        if self.n_steps < 6:
            raise InvalidParams(f"n_steps={self.n_steps} must be >= 6")
        if not (np.isfinite(self.eos_rate_factor) and self.eos_rate_factor > 0):
            raise InvalidParams(f"eos_rate_factor={self.eos_rate_factor} must be > 0")
        if not (np.isfinite(self.base_rate) and 0 < self.base_rate <= 1):
            raise InvalidParams(f"base_rate={self.base_rate} must be in (0, 1]")
        if self.base_rate * self.eos_rate_factor > 1:
            raise InvalidParams("base_rate * eos_rate_factor must stay <= 1 (monotone relaxation)")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise InvalidParams(f"noise_sigma={self.noise_sigma} must be >= 0")
        if not (isinstance(self.warmup, (int, np.integer)) and self.warmup >= 0):
            raise InvalidParams(f"warmup={self.warmup!r} must be a non-negative integer")
        if not (isinstance(self.seed, (int, np.integer)) and 0 <= int(self.seed) < 2**64):
            raise InvalidParams(f"seed={self.seed!r} must be a 64-bit non-negative integer")


def _label_for_factor(rho: float) -> str:
    return LABEL_BACKDOOR if rho < 1.0 else LABEL_BENIGN


def gen_trajectory(params: SynthParams, label: str, sample_id: str = "", prompt: str = "") -> Trajectory:
    """One labeled trajectory, deterministic per (params, label).

    The label must match the rate-factor regime: backdoor needs
    eos_rate_factor < 1, benign needs >= 1.
    """
    if label not in LABELS:
        raise InvalidParams(f"label {label!r} not in {LABELS}")
    if label != _label_for_factor(params.eos_rate_factor):
        raise InvalidParams(
            f"label {label!r} inconsistent with eos_rate_factor={params.eos_rate_factor}"
        )
    n, d, steps = params.n_tokens, params.map_dim, params.n_steps
    rng = np.random.default_rng(params.seed)

    base = rng.uniform(START_BASE_LOW, START_BASE_HIGH, size=(d, d))
    starts = base + rng.normal(0.0, START_JITTER, size=(n, d, d))
    dirs = rng.normal(0.0, 1.0, size=(n, d, d))
    dirs /= np.sqrt(np.sum(dirs * dirs, axis=(1, 2)))[:, None, None]
    targets = starts + TARGET_DISTANCE * dirs

    rates = np.full(n, params.base_rate)
    rates[n - 1] = params.base_rate * params.eos_rate_factor  # EOS is last
    latent = starts
    for _ in range(params.warmup):
        # frame 0 is recorded a little past the start, so the rate differential
        # already shows in the first frame's map geometry
        latent = latent + rates[:, None, None] * (targets - latent)
    maps = np.empty((steps + 1, n, d, d))
    maps[0] = latent
    for t in range(steps):
        maps[t + 1] = maps[t] + rates[:, None, None] * (targets - maps[t])
    if params.noise_sigma > 0:
        maps = maps + rng.normal(0.0, params.noise_sigma, size=maps.shape)
    maps = np.maximum(maps, 0.0)

    return Trajectory(
        maps=maps,
        roles=default_roles(n),
        eos_index=n,
        sample_id=sample_id or f"synth-{label}-{params.seed}",
        prompt=prompt or f"synthetic {label} sample (rho={params.eos_rate_factor:g})",
    )


def _derive_seed(root_seed: int, counter: int) -> int:
    return int(np.random.SeedSequence([int(root_seed), counter]).generate_state(1, np.uint64)[0])


def gen_dataset(
    n_benign: int,
    n_backdoor: int,
    template: SynthParams,
    out_dir,
    rho_benign: float = DEFAULT_RHO_BENIGN,
    rho_backdoor: float = DEFAULT_RHO_BACKDOOR,
    scenario: str = "synthetic",
    train_fraction: float = 0.7,
) -> DatasetManifest:
    """Write DAAT files plus manifest.jsonl with a stratified 70/30 split.

    Per-sample seeds derive from the template seed by counter, so generation
    is a pure function of the arguments.
    """
    if n_benign < 1 or n_backdoor < 1:
        raise InvalidParams("need at least one sample per class")
    if not 0.0 < train_fraction < 1.0:
        raise InvalidParams(f"train_fraction={train_fraction} must be in (0, 1)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    counter = 0
    for label, count, rho in (
        (LABEL_BENIGN, n_benign, rho_benign),
        (LABEL_BACKDOOR, n_backdoor, rho_backdoor),
    ):
        n_train = int(round(train_fraction * count))
        for k in range(count):
            params = replace(template, eos_rate_factor=rho, seed=_derive_seed(template.seed, counter))
            counter += 1
            name = f"{label}-{k:04d}"
            traj = gen_trajectory(params, label, sample_id=name)
            save_trajectory(traj, out_dir / f"{name}.daat")
            entries.append(
                ManifestEntry(
                    path=f"{name}.daat",
                    label=label,
                    scenario=scenario,
                    split=SPLIT_TRAIN if k < n_train else SPLIT_TEST,
                )
            )
    manifest = DatasetManifest(entries=tuple(entries), root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
