"""Command-line front end.

Exit codes: 0 all samples processed, 1 partial per-file failures,
2 usage or configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from time import perf_counter

from .errors import DynattnError, InvalidFieldValue
from .evaluation import (
    METHOD_I,
    METHOD_S,
    METHODS,
    ScoredSample,
    calibrate_threshold,
    evaluate,
    run_ablation,
    score_manifest,
    sweep_params,
    write_ablation_csv,
    write_roc_csv,
    write_sweep_csv,
)
from .independent import TOKEN_CHOICES, TOKEN_EOS, classify_i, daa_i_score
from .presets import PRESET_PAPER_SD14, get_preset
from .rer import average_series, export_rer_heatmaps, pca_project, rer_series
from .synth import DEFAULT_RHO_BACKDOOR, DEFAULT_RHO_BENIGN, SynthParams, gen_dataset
from .system import classify_s, lyapunov_profile, score_trajectory_s
from .trajectory import (
    LABEL_BACKDOOR,
    LABEL_BENIGN,
    SPLIT_TEST,
    SPLIT_TRAIN,
    load_manifest,
    load_trajectory,
)

ENV_OUT = "DYNATTN_OUT"
METHOD_BOTH = "both"

log = logging.getLogger("dynattn")


def _parse_range(text: str):
    """Accept "a:b" (inclusive) or a comma list of integers."""
    text = text.strip()
    if ":" in text:
        lo, hi = text.split(":", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty range {text!r}")
        return list(range(lo, hi + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynattn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, method_both=True):
        choices = (*METHODS, METHOD_BOTH) if method_both else METHODS
        p.add_argument("--method", choices=choices, default=METHOD_BOTH if method_both else METHOD_I)
        p.add_argument("--preset", default=PRESET_PAPER_SD14)
        p.add_argument("--t", type=int, default=None, help="window start override")
        p.add_argument("--s", type=int, default=None, help="window span override")
        p.add_argument("--alpha", type=float, default=None, help="threshold override")
        p.add_argument("--c", type=float, default=None, help="coupling strength (DAA-S)")
        p.add_argument("--gamma-eos", type=float, default=None, help="EOS decay rate (DAA-S)")
        p.add_argument("--metric", default=None, help="similarity metric (DAA-S)")
        p.add_argument("--token-choice", choices=TOKEN_CHOICES, default=TOKEN_EOS)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=None)

    p = sub.add_parser("score", help="score DAAT files or a manifest, JSONL stream out")
    p.add_argument("inputs", nargs="+", help="DAAT files, or one manifest (.jsonl)")
    p.add_argument("--threshold-file", default=None, help="thresholds JSON from `calibrate`")
    add_common(p)

    p = sub.add_parser("calibrate", help="fit thresholds on the train split")
    p.add_argument("manifest")
    add_common(p)

    p = sub.add_parser("evaluate", help="evaluate on the test split or a score stream")
    p.add_argument("manifest", nargs="?", default=None)
    p.add_argument("--scores", default=None, help="JSONL stream from `score`")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--threshold-file", default=None)
    add_common(p)

    p = sub.add_parser("sweep", help="F1 grid over (t, s) on the train split")
    p.add_argument("manifest")
    p.add_argument("--t-range", type=_parse_range, default="0:3")
    p.add_argument("--s-range", type=_parse_range, default="1:9")
    add_common(p)

    p = sub.add_parser("ablate", help="rescore with one parameter axis substituted")
    p.add_argument("manifest")
    p.add_argument("--axis", required=True, choices=("gamma_eos", "coupling", "token_choice", "metric"))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    add_common(p)

    p = sub.add_parser("viz", help="figure-data export (CSV, optional raster)")
    p.add_argument("input", help="DAAT file (rer_heatmap, lyapunov) or manifest (pca_traj)")
    p.add_argument("--kind", required=True, choices=("rer_heatmap", "pca_traj", "lyapunov"))
    p.add_argument("--raster", action="store_true", help="also write PNG (needs matplotlib)")
    add_common(p)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--n-benign", type=int, default=100)
    p.add_argument("--n-backdoor", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tokens", type=int, default=8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--rho-benign", type=float, default=DEFAULT_RHO_BENIGN)
    p.add_argument("--rho-backdoor", type=float, default=DEFAULT_RHO_BACKDOOR)
    p.add_argument("--out", default=None)
    return parser


def _out_dir(args, default=".") -> Path:
    out = getattr(args, "out", None) or os.environ.get(ENV_OUT) or default
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def configs_from(args):
    """Preset configs with any explicit flag overrides applied."""
    preset = get_preset(args.preset)
    cfg_i, cfg_s = preset.daa_i, preset.daa_s
    shared = {}
    if args.t is not None:
        shared["t"] = args.t
    if args.s is not None:
        shared["s"] = args.s
    if args.alpha is not None:
        shared["alpha"] = args.alpha
    if shared:
        cfg_i = dataclasses.replace(cfg_i, **shared)
        cfg_s = dataclasses.replace(cfg_s, **shared)
    s_only = {}
    if args.c is not None:
        s_only["c"] = args.c
    if args.gamma_eos is not None:
        s_only["gamma_eos"] = args.gamma_eos
    if args.metric is not None:
        s_only["metric"] = args.metric
    if s_only:
        cfg_s = dataclasses.replace(cfg_s, **s_only)
    return cfg_i, cfg_s


def _methods_from(args):
    return METHODS if args.method == METHOD_BOTH else (args.method,)


def _load_thresholds(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    out = {}
    for method in METHODS:
        if method in data:
            out[method] = float(data[method]["threshold"])
    if not out:
        raise InvalidFieldValue(f"threshold file {path} holds no method entries")
    return out


def _score_inputs(args):
    """Expand CLI inputs into (path, metadata) pairs."""
    items = []
    if len(args.inputs) == 1 and str(args.inputs[0]).endswith(".jsonl"):
        manifest = load_manifest(args.inputs[0])
        for entry in manifest.entries:
            items.append(
                (manifest.resolve(entry), {"label": entry.label, "scenario": entry.scenario, "split": entry.split})
            )
    else:
        items = [(Path(p), {}) for p in args.inputs]
    return items


def cmd_score(args) -> int:
    cfg_i, cfg_s = configs_from(args)
    if args.threshold_file:
        thresholds = _load_thresholds(args.threshold_file)
        if METHOD_I in thresholds:
            cfg_i = dataclasses.replace(cfg_i, alpha=thresholds[METHOD_I])
        if METHOD_S in thresholds:
            cfg_s = dataclasses.replace(cfg_s, alpha=thresholds[METHOD_S])
    methods = _methods_from(args)
    items = _score_inputs(args)

    def work(item):
        path, meta = item
        traj = load_trajectory(path)
        rec = {"sample_id": traj.sample_id or Path(path).stem, "path": str(path), **meta}
        if METHOD_I in methods:
            t0 = perf_counter()
            score = daa_i_score(traj, cfg_i, token_choice=args.token_choice)
            rec["daa_i_score"] = score
            rec["daa_i_verdict"] = classify_i(score, cfg_i.alpha)
            rec["daa_i_ms"] = round((perf_counter() - t0) * 1e3, 3)
        if METHOD_S in methods:
            t0 = perf_counter()
            score = score_trajectory_s(traj, cfg_s, token_choice=args.token_choice)
            rec["daa_s_score"] = score
            rec["daa_s_verdict"] = classify_s(score, cfg_s.alpha)
            rec["daa_s_ms"] = round((perf_counter() - t0) * 1e3, 3)
        return rec

    records = []
    failures = 0
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            futures = [pool.submit(work, item) for item in items]
        outcomes = [(item, fut) for item, fut in zip(items, futures)]
    else:
        outcomes = None

    def results():
        nonlocal failures
        if outcomes is None:
            for item in items:
                try:
                    yield work(item)
                except DynattnError as exc:
                    failures += 1
                    yield {"path": str(item[0]), "error": f"{type(exc).__name__}: {exc}"}
                except OSError as exc:
                    failures += 1
                    yield {"path": str(item[0]), "error": str(exc)}
        else:
            for item, fut in outcomes:
                try:
                    yield fut.result()
                except (DynattnError, OSError) as exc:
                    failures += 1
                    yield {"path": str(item[0]), "error": f"{type(exc).__name__}: {exc}"}

    lines = [json.dumps(rec) for rec in results()]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if failures:
        log.warning("%d of %d inputs failed", failures, len(items))
    return 1 if failures else 0


def cmd_calibrate(args) -> int:
    cfg_i, cfg_s = configs_from(args)
    manifest = load_manifest(args.manifest)
    result = {}
    for method in _methods_from(args):
        cfg = cfg_i if method == METHOD_I else cfg_s
        scored, failed = score_manifest(
            manifest, method, cfg, split=SPLIT_TRAIN, token_choice=args.token_choice, workers=args.workers
        )
        if failed:
            for entry, msg in failed:
                log.error("%s: %s", entry.path, msg)
            return 1
        threshold = calibrate_threshold(scored)
        report = evaluate(scored, threshold)
        result[method] = {
            "threshold": threshold,
            "f1_train": report.f1,
            "auc_train": report.auc,
            "n_train": report.total,
        }
    out = _out_dir(args)
    path = out / "thresholds.json"
    path.write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    sys.stdout.write(json.dumps(result) + "\n")
    log.info("wrote %s", path)
    return 0


def _report_dict(report) -> dict:
    return {
        "f1": report.f1,
        "auc": report.auc,
        "threshold": report.threshold,
        "tp": report.tp,
        "fp": report.fp,
        "tn": report.tn,
        "fn": report.fn,
        "per_scenario": {
            k: {"n": v.n, "tp": v.tp, "fp": v.fp, "tn": v.tn, "fn": v.fn, "f1": v.f1}
            for k, v in report.per_scenario.items()
        },
    }


def _scored_from_stream(path, method):
    key = f"{method}_score"
    scored = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "error" in rec:
                log.warning("line %d: skipping error record for %s", line_no, rec.get("path"))
                continue
            if key not in rec or "label" not in rec:
                raise InvalidFieldValue(f"line {line_no}: record lacks {key!r} or 'label'")
            scored.append(
                ScoredSample(
                    sample_id=rec.get("sample_id", f"line-{line_no}"),
                    score=float(rec[key]),
                    label=rec["label"],
                    scenario=rec.get("scenario", ""),
                )
            )
    return scored


def cmd_evaluate(args) -> int:
    cfg_i, cfg_s = configs_from(args)
    thresholds = _load_thresholds(args.threshold_file) if args.threshold_file else {}
    result = {}
    for method in _methods_from(args):
        cfg = cfg_i if method == METHOD_I else cfg_s
        if args.scores:
            scored = _scored_from_stream(args.scores, method)
        else:
            if not args.manifest:
                raise InvalidFieldValue("evaluate needs a manifest or --scores")
            manifest = load_manifest(args.manifest)
            scored, failed = score_manifest(
                manifest, method, cfg, split=SPLIT_TEST, token_choice=args.token_choice, workers=args.workers
            )
            if failed:
                for entry, msg in failed:
                    log.error("%s: %s", entry.path, msg)
                return 1
        if args.threshold is not None:
            threshold = args.threshold
        elif method in thresholds:
            threshold = thresholds[method]
        else:
            threshold = cfg.alpha
        report = evaluate(scored, threshold)
        result[method] = _report_dict(report)
        if args.out:
            write_roc_csv(scored, _out_dir(args) / f"roc_{method}.csv")
    sys.stdout.write(json.dumps(result) + "\n")
    return 0


def cmd_sweep(args) -> int:
    cfg_i, cfg_s = configs_from(args)
    manifest = load_manifest(args.manifest)
    out = _out_dir(args)
    t_range = args.t_range if isinstance(args.t_range, list) else _parse_range(args.t_range)
    s_range = args.s_range if isinstance(args.s_range, list) else _parse_range(args.s_range)
    for method in _methods_from(args):
        cfg = cfg_i if method == METHOD_I else cfg_s
        result = sweep_params(manifest, method, t_range, s_range, cfg=cfg, token_choice=args.token_choice)
        path = write_sweep_csv(result, out / f"sweep_{method}.csv")
        log.info("wrote %s", path)
    return 0


def cmd_ablate(args) -> int:
    cfg_i, cfg_s = configs_from(args)
    manifest = load_manifest(args.manifest)
    if args.axis in ("gamma_eos", "coupling"):
        values = [float(v) for v in args.values.split(",") if v.strip()]
    else:
        values = [v.strip() for v in args.values.split(",") if v.strip()]
    methods = None if args.method == METHOD_BOTH else (args.method,)
    rows = run_ablation(
        manifest, args.axis, values, methods=methods, base_i=cfg_i, base_s=cfg_s, workers=args.workers
    )
    path = write_ablation_csv(rows, _out_dir(args) / f"ablation_{args.axis}.csv")
    log.info("wrote %s", path)
    sys.stdout.write(
        "".join(
            f"{r.axis}={r.value} {r.method}: f1={r.report.f1:.4f} auc={r.report.auc:.4f}\n" for r in rows
        )
    )
    return 0


def cmd_viz(args) -> int:
    cfg_i, cfg_s = configs_from(args)
    out = _out_dir(args)
    if args.kind == "rer_heatmap":
        series = rer_series(load_trajectory(args.input))
        paths = export_rer_heatmaps(series, out / "rer_heatmaps", raster=args.raster)
        log.info("wrote %d grids under %s", len(paths["grids"]), out / "rer_heatmaps")
        return 0
    if args.kind == "lyapunov":
        traj = load_trajectory(args.input)
        profile = lyapunov_profile(traj, cfg_s)
        path = out / "lyapunov.csv"
        with path.open("w", encoding="utf-8") as fh:
            fh.write("step,dvdt\n")
            for step, value in enumerate(profile):
                fh.write(f"{step},{value:.9g}\n")
        log.info("wrote %s", path)
        return 0
    # pca_traj: one averaged polyline per class
    manifest = load_manifest(args.input)
    by_label = {LABEL_BENIGN: [], LABEL_BACKDOOR: []}
    for entry in manifest.entries:
        if entry.label in by_label:
            by_label[entry.label].append(rer_series(manifest.load(entry)))
    averages = [
        average_series(series, sample_id=label) for label, series in by_label.items() if series
    ]
    projections = pca_project(averages)
    for proj in projections:
        path = out / f"pca_{proj.sample_id}.csv"
        with path.open("w", encoding="utf-8") as fh:
            fh.write("step,pc1,pc2\n")
            for step, (x, y) in enumerate(proj.trajectory):
                fh.write(f"{step},{x:.9g},{y:.9g}\n")
        log.info("wrote %s", path)
    return 0


def cmd_synth(args) -> int:
    template = SynthParams(
        n_tokens=args.tokens,
        map_dim=args.dim,
        n_steps=args.steps,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    out = _out_dir(args, default="synth_out")
    manifest = gen_dataset(
        args.n_benign,
        args.n_backdoor,
        template,
        out,
        rho_benign=args.rho_benign,
        rho_backdoor=args.rho_backdoor,
    )
    sys.stdout.write(f"{len(manifest.entries)} samples under {out}\n")
    return 0


_DISPATCH = {
    "score": cmd_score,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "viz": cmd_viz,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        return _DISPATCH[args.command](args)
    except DynattnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
