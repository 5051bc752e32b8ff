"""Spatially independent detector (DAA-I).

Per-token Frobenius evolve rates between consecutive frames, the EOS-relative
windowed score, and the inclusive threshold rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigOutOfRange, IndexOutOfRange, InvalidAxisValue
from .trajectory import LABEL_BACKDOOR, LABEL_BENIGN, METRIC_FROBENIUS, Trajectory, map_distance

TOKEN_EOS = "eos"
TOKEN_BOS = "bos"
TOKEN_ALL = "all"
TOKEN_CHOICES = (TOKEN_EOS, TOKEN_BOS, TOKEN_ALL)


@dataclass(frozen=True)
class DaaIConfig:
    """Window start t, span s, decision threshold alpha.

    The score sums s+1 per-step terms for steps t .. t+s, so a trajectory
    must satisfy t+s <= T-1 to be scorable.  Defaults are the shipped
    "paper-sd14" preset values.
    """

    t: int = 3
    s: int = 2
    alpha: float = -0.0011

    def __post_init__(self):
        if self.t < 0:
            raise ConfigOutOfRange(f"start step t={self.t} must be >= 0")
        if self.s < 1:
            raise ConfigOutOfRange(f"span s={self.s} must be >= 1")
        if not np.isfinite(self.alpha):
            raise ConfigOutOfRange(f"alpha={self.alpha} must be finite")


def evolve_rate(traj: Trajectory, token: int, step: int) -> float:
    """Frobenius norm of one token's map change at one step (1-based token)."""
    if not 1 <= token <= traj.n_tokens:
        raise IndexOutOfRange(f"token position {token} outside [1, {traj.n_tokens}]")
    if not 0 <= step <= traj.n_steps - 1:
        raise IndexOutOfRange(f"step {step} outside [0, {traj.n_steps - 1}]")
    return map_distance(traj.maps[step + 1, token - 1], traj.maps[step, token - 1], METRIC_FROBENIUS)


def evolve_rates(traj: Trajectory, start: int = 0, stop: int | None = None) -> np.ndarray:
    """(stop-start, L) matrix of evolve rates for steps start .. stop-1."""
    n_steps = traj.n_steps
    if stop is None:
        stop = n_steps
    if not (0 <= start < stop <= n_steps):
        raise IndexOutOfRange(f"step range [{start}, {stop}) outside [0, {n_steps})")
    seg = traj.maps[start : stop + 1]
    d = seg[1:] - seg[:-1]
    return np.sqrt(np.sum(d * d, axis=(2, 3)))


def relative_series(values: np.ndarray, distinguished: int | None) -> np.ndarray:
    """Per-row relative term: values[:, d] minus the mean over the other columns.

    distinguished is a 0-based column; None averages all columns instead
    (the all-token variant used by the token_choice ablation).
    """
    values = np.asarray(values, dtype=np.float64)
    if distinguished is None:
        return values.mean(axis=1)
    others = np.delete(values, distinguished, axis=1)
    return values[:, distinguished] - others.mean(axis=1)


def _distinguished_column(traj: Trajectory, token_choice: str) -> int | None:
    if token_choice == TOKEN_EOS:
        return traj.eos_index - 1
    if token_choice == TOKEN_BOS:
        from .trajectory import ROLE_BOS

        pos = np.flatnonzero(traj.roles == ROLE_BOS)
        if pos.size == 0:
            raise InvalidAxisValue(f"trajectory {traj.sample_id!r} has no BOS-tagged token")
        return int(pos[0])
    if token_choice == TOKEN_ALL:
        return None
    raise InvalidAxisValue(f"token_choice {token_choice!r} not in {TOKEN_CHOICES}")


def daa_i_score(traj: Trajectory, cfg: DaaIConfig, token_choice: str = TOKEN_EOS) -> float:
    """Sum over steps t..t+s of the EOS evolve rate minus the mean of the others."""
    last = cfg.t + cfg.s
    if last > traj.n_steps - 1:
        raise ConfigOutOfRange(
            f"window [{cfg.t}, {last}] needs frame {last + 1}; trajectory has steps 0..{traj.n_steps - 1}"
        )
    rates = evolve_rates(traj, cfg.t, last + 1)
    rel = relative_series(rates, _distinguished_column(traj, token_choice))
    return float(np.sum(rel))


def classify_i(score: float, alpha: float) -> str:
    """Backdoor iff score <= alpha (inclusive)."""
    return LABEL_BACKDOOR if score <= alpha else LABEL_BENIGN
