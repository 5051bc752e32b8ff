"""Graph-dynamical detector (DAA-S).

Builds a similarity graph over token attention maps at every denoising step,
integrates the coupled linear state equation

    dX/dtau = F X + c A(tau) X

with an adaptive Runge-Kutta-Fehlberg 4(5) scheme, and scores samples by the
EOS node's state deltas relative to the other nodes.  Also provides the
Lyapunov-derivative diagnostics used to certify stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigOutOfRange,
    IndexOutOfRange,
    LengthMismatch,
    NonFiniteState,
    ShapeMismatch,
    SolverStalled,
)
from .independent import (
    TOKEN_ALL,
    TOKEN_BOS,
    TOKEN_CHOICES,
    TOKEN_EOS,
    _distinguished_column,
    relative_series,
)
from .trajectory import LABEL_BACKDOOR, LABEL_BENIGN, METRIC_FROBENIUS, METRIC_ONE_NORM, Trajectory, resolve_metric

DEGENERATE_SPREAD = 1e-12  # below this min-max spread all pairs count as maximally similar

INITIAL_STEP = 1e-2
MIN_STEP = 1e-12
SAFETY = 0.9
SHRINK_MIN = 0.2
GROWTH_MAX = 5.0
TOLERANCE_MARGIN = 0.1  # accepted-step estimates stay this far inside atol/rtol

INITIAL_ONES = "ones"
INITIAL_ZEROS = "zeros"


# ---------------------------------------------------------------------------
# graph construction


def edge_weights(frame: np.ndarray, metric=METRIC_FROBENIUS) -> np.ndarray:
    """Min-max normalized similarity weights for one frame's token maps.

    The closest pair of maps gets weight 1, the farthest 0; the diagonal is 0.
    If all pairwise distances agree to within 1e-12 every off-diagonal weight
    is 1 (identical maps are maximally similar).
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] < 2:
        raise ShapeMismatch(f"frame must be (L>=2, D, D), got {frame.shape}")
    n = frame.shape[0]
    if metric in (METRIC_FROBENIUS, METRIC_ONE_NORM):
        flat = frame.reshape(n, -1)
        diff = flat[:, None, :] - flat[None, :, :]
        if metric == METRIC_FROBENIUS:
            dist = np.sqrt(np.sum(diff * diff, axis=2))
        else:
            dist = np.sum(np.abs(diff), axis=2)
    else:
        fn = resolve_metric(metric)
        dist = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                dist[i, j] = dist[j, i] = fn(frame[i], frame[j])
    iu = np.triu_indices(n, k=1)
    dmin = float(dist[iu].min())
    dmax = float(dist[iu].max())
    if dmax - dmin < DEGENERATE_SPREAD:
        w = np.ones((n, n))
    else:
        w = (dmax - dist) / (dmax - dmin)
    np.fill_diagonal(w, 0.0)
    return w


def laplacian(weights: np.ndarray) -> np.ndarray:
    """Coupling matrix: off-diagonal W_ij, diagonal minus the column sums.

    Row and column sums are both zero (W is symmetric).
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"weights must be square, got {w.shape}")
    a = w.copy()
    np.fill_diagonal(a, 0.0)
    col_sums = a.sum(axis=0)
    np.fill_diagonal(a, -col_sums)
    return a


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class StabilityParams:
    """Per-node decay vector gamma (all strictly negative) and coupling c > 0."""

    gamma: np.ndarray
    c: float

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.float64)
        if gamma.ndim != 1 or gamma.size == 0:
            raise ConfigOutOfRange(f"gamma must be a non-empty vector, got shape {gamma.shape}")
        if not np.isfinite(gamma).all() or (gamma >= 0).any():
            raise ConfigOutOfRange("every gamma entry must be finite and strictly negative")
        if not (np.isfinite(self.c) and self.c > 0):
            raise ConfigOutOfRange(f"coupling c={self.c} must be finite and > 0")
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)


@dataclass(frozen=True)
class DaaSConfig:
    """Window (t, s), threshold, dynamics parameters and solver tolerances.

    gamma_eos is bound to the EOS position through the trajectory's eos_index,
    never through list order.  Defaults are the shipped "paper-sd14" preset.
    """

    t: int = 1
    s: int = 5
    alpha: float = -0.0053
    c: float = 1.0
    gamma_base: float = -1.0
    gamma_eos: float = -10.0
    metric: str = METRIC_FROBENIUS
    initial_state: str = INITIAL_ONES
    rtol: float = 1e-7
    atol: float = 1e-9

    def __post_init__(self):
        if self.t < 0:
            raise ConfigOutOfRange(f"start step t={self.t} must be >= 0")
        if self.s < 1:
            raise ConfigOutOfRange(f"span s={self.s} must be >= 1")
        if not np.isfinite(self.alpha):
            raise ConfigOutOfRange(f"alpha={self.alpha} must be finite")
        if not (np.isfinite(self.c) and self.c > 0):
            raise ConfigOutOfRange(f"coupling c={self.c} must be > 0")
        if not (np.isfinite(self.gamma_base) and self.gamma_base < 0):
            raise ConfigOutOfRange(f"gamma_base={self.gamma_base} must be < 0")
        if not (np.isfinite(self.gamma_eos) and self.gamma_eos < 0):
            raise ConfigOutOfRange(f"gamma_eos={self.gamma_eos} must be < 0")
        if isinstance(self.initial_state, str) and self.initial_state not in (INITIAL_ONES, INITIAL_ZEROS):
            raise ConfigOutOfRange(f"initial_state policy {self.initial_state!r} unknown")
        if self.rtol <= 0 or self.atol <= 0:
            raise ConfigOutOfRange("solver tolerances must be positive")

    def stability(self, n_tokens: int, eos_index: int) -> StabilityParams:
        if not 1 <= eos_index <= n_tokens:
            raise IndexOutOfRange(f"eos_index {eos_index} outside [1, {n_tokens}]")
        gamma = np.full(n_tokens, self.gamma_base)
        gamma[eos_index - 1] = self.gamma_eos
        return StabilityParams(gamma=gamma, c=self.c)

    def initial_vector(self, n_tokens: int) -> np.ndarray:
        if isinstance(self.initial_state, str):
            if self.initial_state == INITIAL_ONES:
                return np.ones(n_tokens)
            return np.zeros(n_tokens)
        x0 = np.asarray(self.initial_state, dtype=np.float64)
        if x0.shape != (n_tokens,):
            raise LengthMismatch(f"initial state shape {x0.shape} does not match L={n_tokens}")
        if not np.isfinite(x0).all():
            raise ConfigOutOfRange("initial state must be finite")
        return x0.copy()


# ---------------------------------------------------------------------------
# RKF4(5) integration

# Classical Fehlberg tableau.
_RKF_C = (0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2)
_RKF_A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
_RKF_B5 = (16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55)
_RKF_B4 = (25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0)
_RKF_E = tuple(b5 - b4 for b5, b4 in zip(_RKF_B5, _RKF_B4))


@dataclass(frozen=True)
class SolverStats:
    n_accepted: int
    n_rejected: int
    max_error_ratio: float  # largest accepted margin-scaled error estimate


@dataclass(frozen=True)
class StateTrace:
    """Node states sampled at integer steps: states[t, i] = x_{i+1}(t)."""

    states: np.ndarray
    stats: SolverStats

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 2:
            raise ShapeMismatch(f"states must be 2-D, got {states.shape}")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.states.shape[1]


def _growth(ratio: float) -> float:
    # ratio is the margin-scaled RMS error estimate; < 1 means accepted.
    if ratio == 0.0:
        return GROWTH_MAX
    return min(GROWTH_MAX, max(SHRINK_MIN, SAFETY * ratio ** -0.2))


def _integrate_piecewise(laps, gamma, c, x0, rtol, atol):
    """Integrate over len(laps) unit intervals, lap k active on [k, k+1).

    Steps are advanced with the 5th-order combination; the embedded 4th/5th
    difference drives acceptance and step-size control.  Steps never cross an
    interval boundary, so the returned samples sit exactly at integer tau.
    """
    x = np.array(x0, dtype=np.float64)
    samples = np.empty((len(laps) + 1, x.size))
    samples[0] = x
    h_prop = INITIAL_STEP
    n_acc = 0
    n_rej = 0
    max_ratio = 0.0

    for k, lap in enumerate(laps):
        ca = c * lap

        def f(y):
            return gamma * y + ca @ y

        tau = 0.0  # local time within [k, k+1)
        while tau < 1.0:
            remaining = 1.0 - tau
            clamped = h_prop >= remaining
            h = remaining if clamped else h_prop

            ks = [f(x)]
            for i in range(1, 6):
                y = x + h * sum(a * kj for a, kj in zip(_RKF_A[i], ks))
                ks.append(f(y))
            x_new = x + h * sum(b * kj for b, kj in zip(_RKF_B5, ks) if b != 0.0)
            err = h * sum(e * kj for e, kj in zip(_RKF_E, ks) if e != 0.0)

            if not np.isfinite(x_new).all():
                raise NonFiniteState(f"non-finite state near tau = {k + tau:.6g}")
            # the estimate gauges the discarded 4th-order result, so local
            # errors of the propagated 5th-order solution run well below it;
            # the margin keeps their accumulation inside the documented band
            scale = TOLERANCE_MARGIN * (atol + rtol * np.maximum(np.abs(x), np.abs(x_new)))
            ratio = float(np.sqrt(np.mean((err / scale) ** 2)))

            if ratio <= 1.0:
                n_acc += 1
                max_ratio = max(max_ratio, ratio)
                x = x_new
                tau = 1.0 if clamped else tau + h
                if not clamped:
                    # a step shortened only to land on the breakpoint carries
                    # no information about the cruise step size
                    h_prop = h * _growth(ratio)
            else:
                n_rej += 1
                h_prop = h * _growth(ratio)
                if h_prop < MIN_STEP:
                    raise SolverStalled(f"step size {h_prop:.3e} underflow near tau = {k + tau:.6g}")
        samples[k + 1] = x

    return samples, SolverStats(n_accepted=n_acc, n_rejected=n_rej, max_error_ratio=max_ratio)


def integrate_states(traj: Trajectory, cfg: DaaSConfig, t_end: int | None = None) -> StateTrace:
    """Integrate the state equation over tau in [0, t_end] (default the full horizon).

    A(tau) is piecewise-constant: the Laplacian of frame k's similarity graph
    holds on [k, k+1).  States are sampled exactly at integer tau.
    """
    horizon = traj.n_steps
    if t_end is None:
        t_end = horizon
    if not 1 <= t_end <= horizon:
        raise ConfigOutOfRange(f"t_end={t_end} outside [1, {horizon}]")
    laps = [laplacian(edge_weights(traj.maps[k], cfg.metric)) for k in range(t_end)]
    stability = cfg.stability(traj.n_tokens, traj.eos_index)
    x0 = cfg.initial_vector(traj.n_tokens)
    samples, stats = _integrate_piecewise(laps, stability.gamma, stability.c, x0, cfg.rtol, cfg.atol)
    return StateTrace(states=samples, stats=stats)


# ---------------------------------------------------------------------------
# scoring


def daa_s_score(
    trace: StateTrace,
    cfg: DaaSConfig,
    eos_index: int,
    token_choice: str = TOKEN_EOS,
    bos_index: int = 1,
) -> float:
    """Sum over steps t..t+s of the EOS state delta minus the mean of the others."""
    n = trace.n_samples
    last = cfg.t + cfg.s
    if last + 1 > n - 1:
        raise ConfigOutOfRange(
            f"window [{cfg.t}, {last}] needs state sample {last + 1}; trace has 0..{n - 1}"
        )
    if not 1 <= eos_index <= trace.n_tokens:
        raise IndexOutOfRange(f"eos_index {eos_index} outside [1, {trace.n_tokens}]")
    if token_choice == TOKEN_EOS:
        col = eos_index - 1
    elif token_choice == TOKEN_BOS:
        if not 1 <= bos_index <= trace.n_tokens:
            raise IndexOutOfRange(f"bos_index {bos_index} outside [1, {trace.n_tokens}]")
        col = bos_index - 1
    elif token_choice == TOKEN_ALL:
        col = None
    else:
        raise ConfigOutOfRange(f"token_choice {token_choice!r} not in {TOKEN_CHOICES}")
    deltas = trace.states[1:] - trace.states[:-1]
    rel = relative_series(deltas, col)
    return float(np.sum(rel[cfg.t : last + 1]))


def score_trajectory_s(traj: Trajectory, cfg: DaaSConfig, token_choice: str = TOKEN_EOS) -> float:
    """Integrate just far enough for the configured window and score."""
    t_end = min(traj.n_steps, cfg.t + cfg.s + 1)
    trace = integrate_states(traj, cfg, t_end=t_end)
    if token_choice == TOKEN_BOS:
        col = _distinguished_column(traj, TOKEN_BOS)
        return daa_s_score(trace, cfg, traj.eos_index, token_choice=TOKEN_BOS, bos_index=col + 1)
    return daa_s_score(trace, cfg, traj.eos_index, token_choice=token_choice)


def classify_s(score: float, alpha: float) -> str:
    """Backdoor iff score <= alpha (inclusive)."""
    return LABEL_BACKDOOR if score <= alpha else LABEL_BENIGN


# ---------------------------------------------------------------------------
# Lyapunov diagnostics


def lyapunov_derivative(x, gamma, lap, c) -> float:
    """dV/dt of V = X'X: the quadratic form X'(F'+F)X + c X'(A'+A)X, literally."""
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    lap = np.asarray(lap, dtype=np.float64)
    if x.ndim != 1 or gamma.shape != x.shape:
        raise ShapeMismatch(f"state {x.shape} and gamma {gamma.shape} must be equal-length vectors")
    if lap.shape != (x.size, x.size):
        raise ShapeMismatch(f"laplacian shape {lap.shape} does not match state length {x.size}")
    f = np.diag(gamma)
    return float(x @ ((f.T + f) @ x) + c * (x @ ((lap.T + lap) @ x)))


def lyapunov_profile(traj: Trajectory, cfg: DaaSConfig, t_end: int | None = None) -> np.ndarray:
    """dV/dt evaluated at each integer step with that step's own Laplacian.

    Returns t_end+1 values (default T+1, one per recorded frame).
    """
    horizon = traj.n_steps
    if t_end is None:
        t_end = horizon
    if not 1 <= t_end <= horizon:
        raise ConfigOutOfRange(f"t_end={t_end} outside [1, {horizon}]")
    laps = [laplacian(edge_weights(traj.maps[k], cfg.metric)) for k in range(t_end + 1)]
    stability = cfg.stability(traj.n_tokens, traj.eos_index)
    x0 = cfg.initial_vector(traj.n_tokens)
    samples, _ = _integrate_piecewise(laps[:t_end], stability.gamma, stability.c, x0, cfg.rtol, cfg.atol)
    out = np.empty(t_end + 1)
    for k in range(t_end + 1):
        out[k] = lyapunov_derivative(samples[k], stability.gamma, laps[k], stability.c)
    return out
