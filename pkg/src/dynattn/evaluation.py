"""Threshold calibration, F1/AUC/ROC evaluation, (t, s) parameter sweeps and
ablation drivers.

The decision rule everywhere is "backdoor iff score <= threshold", so lower
scores indicate backdoor; AUC is reported as the probability that a random
backdoor sample scores below a random benign one (ties count one half).
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigOutOfRange,
    InvalidAxisValue,
    LengthMismatch,
    SingleClassDataset,
)
from .independent import (
    TOKEN_CHOICES,
    TOKEN_EOS,
    DaaIConfig,
    _distinguished_column,
    daa_i_score,
    evolve_rates,
    relative_series,
)
from .system import DaaSConfig, integrate_states, score_trajectory_s
from .trajectory import (
    LABEL_BACKDOOR,
    LABEL_BENIGN,
    LABELS,
    DatasetManifest,
    ManifestEntry,
    SPLIT_TRAIN,
    SPLIT_TEST,
    resolve_metric,
)

METHOD_I = "daa_i"
METHOD_S = "daa_s"
METHODS = (METHOD_I, METHOD_S)

ABLATION_AXES = ("gamma_eos", "coupling", "token_choice", "metric")


@dataclass(frozen=True)
class ScoredSample:
    sample_id: str
    score: float
    label: str
    scenario: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ConfigOutOfRange(f"score for {self.sample_id!r} is not finite")
        if self.label not in LABELS:
            raise ConfigOutOfRange(f"label {self.label!r} not in {LABELS}")


@dataclass(frozen=True)
class ScenarioStats:
    n: int
    tp: int
    fp: int
    tn: int
    fn: int
    f1: float


@dataclass(frozen=True)
class EvalReport:
    f1: float
    auc: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    per_scenario: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.f1 <= 1.0 or not 0.0 <= self.auc <= 1.0:
            raise ConfigOutOfRange("f1 and auc must lie in [0, 1]")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _confusion(predictions, labels):
    tp = fp = tn = fn = 0
    for pred, lab in zip(predictions, labels):
        if lab == LABEL_BACKDOOR:
            if pred == LABEL_BACKDOOR:
                tp += 1
            else:
                fn += 1
        else:
            if pred == LABEL_BACKDOOR:
                fp += 1
            else:
                tn += 1
    return tp, fp, tn, fn


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_score(predictions, labels) -> float:
    """F1 on the backdoor class; 0 when precision + recall is 0."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    tp, fp, _, fn = _confusion(predictions, labels)
    return _f1_from_counts(tp, fp, fn)


def _split_scores(scored):
    backdoor = np.array([s.score for s in scored if s.label == LABEL_BACKDOOR])
    benign = np.array([s.score for s in scored if s.label == LABEL_BENIGN])
    if backdoor.size == 0 or benign.size == 0:
        raise SingleClassDataset("need both benign and backdoor samples")
    return backdoor, benign


def auc(scored) -> float:
    """Rank-based probability that a random backdoor sample scores below a
    random benign one; tied pairs contribute one half."""
    backdoor, benign = _split_scores(scored)
    scores = np.concatenate([backdoor, benign])
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    midranks = starts + (counts + 1) / 2.0  # 1-based
    ranks = midranks[inverse]
    n_b = backdoor.size
    n_g = benign.size
    rank_sum_benign = float(ranks[n_b:].sum())
    u_benign = rank_sum_benign - n_g * (n_g + 1) / 2.0
    return u_benign / (n_b * n_g)


def roc_points(scored) -> np.ndarray:
    """(fpr, tpr) pairs for the rule "backdoor iff score <= threshold", one per
    distinct score plus the (0, 0) origin, sorted by threshold."""
    backdoor, benign = _split_scores(scored)
    n_b = backdoor.size
    n_g = benign.size
    scores = np.concatenate([backdoor, benign])
    is_backdoor = np.zeros(scores.size, dtype=bool)
    is_backdoor[:n_b] = True
    order = np.argsort(scores, kind="stable")
    pts = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and scores[order[j]] == scores[order[i]]:
            if is_backdoor[order[j]]:
                tp += 1
            else:
                fp += 1
            j += 1
        pts.append((fp / n_g, tp / n_b))
        i = j
    return np.array(pts)


def calibrate_threshold(scored) -> float:
    """Threshold maximizing F1 for "backdoor iff score <= threshold".

    Candidates are the midpoints of consecutive distinct sorted scores,
    bracketed below by -inf (predict nothing) and above by the maximum score
    (predict everything).  Ties go to the smaller threshold, which yields the
    fewest false positives.
    """
    _split_scores(scored)  # both classes must be present
    labels = [s.label for s in scored]
    uniq = np.unique([s.score for s in scored])
    candidates = [-math.inf]
    candidates.extend(((uniq[i] + uniq[i + 1]) / 2.0 for i in range(uniq.size - 1)))
    candidates.append(float(uniq[-1]))
    best_t = candidates[0]
    best_f1 = -1.0
    for cand in candidates:
        preds = [LABEL_BACKDOOR if s.score <= cand else LABEL_BENIGN for s in scored]
        f1 = f1_score(preds, labels)
        if f1 > best_f1:
            best_f1 = f1
            best_t = cand
    return best_t


def evaluate(scored, threshold: float) -> EvalReport:
    """Apply the threshold, compute F1 / AUC / confusion counts and a
    per-scenario breakdown."""
    labels = [s.label for s in scored]
    preds = [LABEL_BACKDOOR if s.score <= threshold else LABEL_BENIGN for s in scored]
    tp, fp, tn, fn = _confusion(preds, labels)
    per_scenario = {}
    for scen in sorted({s.scenario for s in scored}):
        idx = [k for k, s in enumerate(scored) if s.scenario == scen]
        stp, sfp, stn, sfn = _confusion([preds[k] for k in idx], [labels[k] for k in idx])
        per_scenario[scen] = ScenarioStats(
            n=len(idx), tp=stp, fp=sfp, tn=stn, fn=sfn, f1=_f1_from_counts(stp, sfp, sfn)
        )
    return EvalReport(
        f1=_f1_from_counts(tp, fp, fn),
        auc=auc(scored),
        threshold=threshold,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        per_scenario=per_scenario,
    )


# ---------------------------------------------------------------------------
# scoring fan-out


def _score_one(traj, method: str, cfg, token_choice: str) -> float:
    if method == METHOD_I:
        return daa_i_score(traj, cfg, token_choice=token_choice)
    return score_trajectory_s(traj, cfg, token_choice=token_choice)


def score_manifest(
    manifest: DatasetManifest,
    method: str,
    cfg,
    split: str | None = None,
    token_choice: str = TOKEN_EOS,
    workers: int = 1,
):
    """Score every manifest entry (optionally one split) with one detector.

    Returns (scored, failures); failures are (entry, message) pairs for files
    that would not load or score.  Entry order is preserved regardless of the
    worker count.
    """
    if method not in METHODS:
        raise ConfigOutOfRange(f"method {method!r} not in {METHODS}")
    entries = manifest.entries if split is None else manifest.subset(split).entries

    def work(entry: ManifestEntry):
        traj = manifest.load(entry)
        score = _score_one(traj, method, cfg, token_choice)
        return ScoredSample(
            sample_id=traj.sample_id or entry.path,
            score=score,
            label=entry.label,
            scenario=entry.scenario,
        )

    scored = []
    failures = []
    if workers <= 1:
        for entry in entries:
            try:
                scored.append(work(entry))
            except Exception as exc:  # noqa: BLE001 - per-file isolation
                failures.append((entry, f"{type(exc).__name__}: {exc}"))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(work, entry) for entry in entries]
        for entry, fut in zip(entries, futures):
            try:
                scored.append(fut.result())
            except Exception as exc:  # noqa: BLE001
                failures.append((entry, f"{type(exc).__name__}: {exc}"))
    return scored, failures


# ---------------------------------------------------------------------------
# parameter sweep


@dataclass(frozen=True)
class SweepResult:
    method: str
    t_values: tuple
    s_values: tuple
    f1: np.ndarray  # shape (len(t_values), len(s_values)); NaN where invalid
    thresholds: np.ndarray
    valid: np.ndarray
    n_train: int


def _relative_full(traj, method: str, cfg, token_choice: str) -> np.ndarray:
    """Per-step relative series over the full horizon; window scores are
    contiguous slice sums of this, bit-identical to single-run scoring."""
    col = _distinguished_column(traj, token_choice)
    if method == METHOD_I:
        return relative_series(evolve_rates(traj), col)
    trace = integrate_states(traj, cfg)
    deltas = trace.states[1:] - trace.states[:-1]
    return relative_series(deltas, col)


def sweep_params(
    manifest: DatasetManifest,
    method: str,
    t_range,
    s_range,
    cfg=None,
    token_choice: str = TOKEN_EOS,
) -> SweepResult:
    """Grid of train-split F1 over (t, s): each valid cell is calibrated on the
    train split independently.  Cells whose window does not fit inside the
    shortest trajectory carry NaN and valid=False."""
    if method not in METHODS:
        raise ConfigOutOfRange(f"method {method!r} not in {METHODS}")
    if cfg is None:
        cfg = DaaIConfig() if method == METHOD_I else DaaSConfig()
    t_values = tuple(t_range)
    s_values = tuple(s_range)
    if not t_values or not s_values:
        raise ConfigOutOfRange("t_range and s_range must be non-empty")
    if min(t_values) < 0 or min(s_values) < 1:
        raise ConfigOutOfRange("need t >= 0 and s >= 1")

    train = manifest.subset(SPLIT_TRAIN)
    if not train.entries:
        raise ConfigOutOfRange("manifest has no train split")
    rels = []
    labels = []
    scenarios = []
    ids = []
    max_last = None
    for entry in train.entries:
        traj = manifest.load(entry)
        rels.append(_relative_full(traj, method, cfg, token_choice))
        labels.append(entry.label)
        scenarios.append(entry.scenario)
        ids.append(traj.sample_id or entry.path)
        horizon = rels[-1].shape[0] - 1  # largest usable t+s
        max_last = horizon if max_last is None else min(max_last, horizon)

    shape = (len(t_values), len(s_values))
    f1 = np.full(shape, np.nan)
    thresholds = np.full(shape, np.nan)
    valid = np.zeros(shape, dtype=bool)
    for a, t in enumerate(t_values):
        for b, s in enumerate(s_values):
            if t + s > max_last:
                continue
            scored = [
                ScoredSample(sample_id=i, score=float(np.sum(r[t : t + s + 1])), label=l, scenario=c)
                for i, r, l, c in zip(ids, rels, labels, scenarios)
            ]
            thr = calibrate_threshold(scored)
            preds = [LABEL_BACKDOOR if x.score <= thr else LABEL_BENIGN for x in scored]
            f1[a, b] = f1_score(preds, labels)
            thresholds[a, b] = thr
            valid[a, b] = True
    return SweepResult(
        method=method,
        t_values=t_values,
        s_values=s_values,
        f1=f1,
        thresholds=thresholds,
        valid=valid,
        n_train=len(train.entries),
    )


def write_sweep_csv(result: SweepResult, path) -> Path:
    """Table layout: one row per t, one column per s; invalid cells say NA."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"{result.method} f1"] + [f"s={s}" for s in result.s_values])
        for a, t in enumerate(result.t_values):
            row = [f"t={t}"]
            for b in range(len(result.s_values)):
                row.append(f"{result.f1[a, b]:.6g}" if result.valid[a, b] else "NA")
            w.writerow(row)
    return path


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class AblationRow:
    axis: str
    value: object
    method: str
    threshold: float
    report: EvalReport


def _ablation_configs(axis: str, value, base_i: DaaIConfig, base_s: DaaSConfig):
    """Substitute one axis value; returns (cfg_i, cfg_s, token_choice, methods)."""
    if axis == "gamma_eos":
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value < 0):
            raise InvalidAxisValue(f"gamma_eos must be a negative real, got {value!r}")
        return base_i, DaaSConfig(**{**_as_kwargs(base_s), "gamma_eos": float(value)}), TOKEN_EOS, (METHOD_S,)
    if axis == "coupling":
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            raise InvalidAxisValue(f"coupling must be a positive real, got {value!r}")
        return base_i, DaaSConfig(**{**_as_kwargs(base_s), "c": float(value)}), TOKEN_EOS, (METHOD_S,)
    if axis == "token_choice":
        if value not in TOKEN_CHOICES:
            raise InvalidAxisValue(f"token_choice {value!r} not in {TOKEN_CHOICES}")
        return base_i, base_s, value, (METHOD_I, METHOD_S)
    if axis == "metric":
        try:
            resolve_metric(value)
        except Exception as exc:
            raise InvalidAxisValue(f"unknown similarity metric {value!r}") from exc
        return base_i, DaaSConfig(**{**_as_kwargs(base_s), "metric": value}), TOKEN_EOS, (METHOD_S,)
    raise InvalidAxisValue(f"axis {axis!r} not in {ABLATION_AXES}")


def _as_kwargs(cfg) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def run_ablation(
    manifest: DatasetManifest,
    axis: str,
    values,
    methods=None,
    base_i: DaaIConfig | None = None,
    base_s: DaaSConfig | None = None,
    workers: int = 1,
):
    """Recalibrate on train and evaluate on test once per axis value.

    gamma_eos / coupling / metric touch only DAA-S; token_choice applies to
    both detectors unless `methods` narrows it.
    """
    base_i = base_i or DaaIConfig()
    base_s = base_s or DaaSConfig()
    rows = []
    for value in values:
        cfg_i, cfg_s, token_choice, default_methods = _ablation_configs(axis, value, base_i, base_s)
        selected = default_methods if methods is None else tuple(methods)
        for method in selected:
            if method not in METHODS:
                raise InvalidAxisValue(f"method {method!r} not in {METHODS}")
            cfg = cfg_i if method == METHOD_I else cfg_s
            train_scored, train_fail = score_manifest(
                manifest, method, cfg, split=SPLIT_TRAIN, token_choice=token_choice, workers=workers
            )
            test_scored, test_fail = score_manifest(
                manifest, method, cfg, split=SPLIT_TEST, token_choice=token_choice, workers=workers
            )
            if train_fail or test_fail:
                bad = (train_fail + test_fail)[0]
                raise InvalidAxisValue(f"sample {bad[0].path} failed to score: {bad[1]}")
            threshold = calibrate_threshold(train_scored)
            rows.append(
                AblationRow(
                    axis=axis,
                    value=value,
                    method=method,
                    threshold=threshold,
                    report=evaluate(test_scored, threshold),
                )
            )
    return rows


def write_ablation_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "method", "threshold", "f1", "auc", "tp", "fp", "tn", "fn"])
        for r in rows:
            w.writerow(
                [
                    r.axis,
                    r.value,
                    r.method,
                    f"{r.threshold:.9g}",
                    f"{r.report.f1:.6g}",
                    f"{r.report.auc:.6g}",
                    r.report.tp,
                    r.report.fp,
                    r.report.tn,
                    r.report.fn,
                ]
            )
    return path


def write_roc_csv(scored, path) -> Path:
    path = Path(path)
    pts = roc_points(scored)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        for fpr, tpr in pts:
            w.writerow([f"{fpr:.9g}", f"{tpr:.9g}"])
    return path
