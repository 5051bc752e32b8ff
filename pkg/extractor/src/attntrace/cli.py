"""Command-line front end.

Exit codes: 0 all prompts extracted; 1 labeled batch finished with row
failures; 2 configuration, model, or prompt-file errors.
"""

from __future__ import annotations

import argparse
import sys

from .config import AGG_POLICIES, MAP_DIMS, ExtractionConfig
from .errors import AttntraceError
from .extract import batch_extract, extract, load_pipeline, resolve_pipeline_factory


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attntrace",
        description="capture per-step cross-attention maps from a diffusion pipeline into DAAT files",
    )
    parser.add_argument("--prompts", required=True, help="prompt list file")
    parser.add_argument("--out", required=True, help="output directory")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", default=None, help="checkpoint id for the diffusers loader")
    source.add_argument("--pipeline", default=None, help="module:callable returning a pipeline")
    parser.add_argument(
        "--labeled",
        action="store_true",
        help="treat --prompts as a TSV table (prompt/label/scenario[/split]) and write a manifest",
    )
    parser.add_argument("--steps", type=int, default=50, help="denoising steps T; emits T+1 frames")
    parser.add_argument("--guidance", type=float, default=7.5, help="classifier-free guidance scale")
    parser.add_argument("--seed", type=int, default=0, help="base seed; prompt i uses seed+i")
    parser.add_argument("--map-dim", type=int, default=16, choices=MAP_DIMS)
    parser.add_argument("--agg", default="mean", choices=AGG_POLICIES, help="layer pooling policy")
    parser.add_argument("--device", default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExtractionConfig(
            model_id=args.model or "",
            prompt_file=args.prompts,
            out_dir=args.out,
            steps=args.steps,
            guidance_scale=args.guidance,
            seed=args.seed,
            map_dim=args.map_dim,
            aggregation=args.agg,
            device=args.device,
        )
        if args.pipeline is not None:
            pipe = resolve_pipeline_factory(args.pipeline)
        else:
            pipe = load_pipeline(args.model, args.device)
        if args.labeled:
            manifest_path, written, failures = batch_extract(pipe, config)
            for row, reason in failures:
                print(f"row {row} failed: {reason}", file=sys.stderr)
            print(f"{len(written)} files, {len(failures)} failures, manifest {manifest_path}")
            return 1 if failures else 0
        paths = extract(pipe, config)
        for path in paths:
            print(f"wrote {path}")
        print(f"{len(paths)} files under {config.out_dir}")
        return 0
    except AttntraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
