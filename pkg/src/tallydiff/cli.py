"""Command-line surface: train, gen, bench, ablate, make-data."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .scenes import PromptSpec, default_vocabulary

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STAGE = 3


def parse_prompt(text: str, vocab) -> PromptSpec:
    """Parse ``name=count[,name=count...]`` into a prompt."""
    targets: dict[int, int] = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, num = part.partition("=")
        if not num:
            raise ValueError(f"expected name=count, got {part!r}")
        cls = vocab.by_name(name.strip()).class_id
        if cls in targets:
            raise ValueError(f"class {name!r} listed twice")
        targets[cls] = int(num)
    return PromptSpec(targets=targets)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tallydiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the toy denoiser")
    p_train.add_argument("--config", required=True, help="training config JSON")
    p_train.add_argument("--dataset", required=True, help="dataset directory")
    p_train.add_argument("--out", help="override checkpoint output path")

    p_gen = sub.add_parser("gen", help="generate one image with count correction")
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--prompt", required=True, help='e.g. "circle=3,square=1"')
    p_gen.add_argument("--seed", required=True, type=int)
    p_gen.add_argument("--config", help="run config JSON (flags override)")
    p_gen.add_argument("--out", help="run directory")
    p_gen.add_argument("--no-correction", action="store_true")
    p_gen.add_argument("--t-mid", type=int)
    p_gen.add_argument("--sigma-scale", type=float)
    p_gen.add_argument("--smooth-sigma", type=float)
    p_gen.add_argument("--top-percent", type=float)
    p_gen.add_argument("--inner-iters", type=int)
    p_gen.add_argument("--strategy", choices=["topk", "bottomk", "random", "all"])

    p_bench = sub.add_parser("bench", help="paired baseline/corrected benchmark")
    p_bench.add_argument("--checkpoint", required=True)
    p_bench.add_argument("--dataset", required=True, choices=["single", "multi"])
    p_bench.add_argument("--n", type=int, help="limit to the first N prompts")
    p_bench.add_argument("--seed", required=True, type=int, help="benchmark builder seed")
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--workers", type=int, default=1)
    p_bench.add_argument("--config", help="run config JSON for both variants")

    p_abl = sub.add_parser("ablate", help="loss-strategy / guidance-window / t-mid ablations")
    p_abl.add_argument("--checkpoint", required=True)
    p_abl.add_argument("--kind", required=True, choices=["loss", "window", "tmid"])
    p_abl.add_argument("--n", type=int, default=100)
    p_abl.add_argument("--seed", required=True, type=int)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--workers", type=int, default=1)
    p_abl.add_argument("--strategies", default="topk,random")
    p_abl.add_argument("--pairs", default="0:40,10:40,20:40", help="gsteps:total pairs")
    p_abl.add_argument("--t-values", default="1,5,10,20,30,39")
    p_abl.add_argument("--config", help="run config JSON")

    p_data = sub.add_parser("make-data", help="render a training dataset")
    p_data.add_argument("--out", required=True)
    p_data.add_argument("--size", required=True, type=int)
    p_data.add_argument("--seed", required=True, type=int)
    p_data.add_argument("--count-min", type=int, default=1)
    p_data.add_argument("--count-max", type=int, default=10)
    p_data.add_argument("--multi-fraction", type=float, default=0.4)
    return parser


def _run_config(args, prompt: PromptSpec | None):
    from .pipeline import RunConfig

    if args.config:
        base = RunConfig.from_file(args.config)
        cfg = replace(base, checkpoint=args.checkpoint)
    else:
        cfg = RunConfig(
            prompt=prompt or PromptSpec(targets={0: 1}),
            seed=0,
            checkpoint=args.checkpoint,
        )
    if prompt is not None:
        cfg = replace(cfg, prompt=prompt)
    g = cfg.guidance
    overrides = {}
    for flag, name in [
        ("t_mid", "t_mid"), ("sigma_scale", "sigma_scale"), ("smooth_sigma", "smooth_sigma"),
        ("top_percent", "top_percent"), ("inner_iters", "inner_iters"), ("strategy", "strategy"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        cfg = replace(cfg, guidance=replace(g, **overrides))
    return cfg


def cli_entry(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK

    try:
        if args.command == "train":
            from .training import TrainConfig, train_denoiser

            cfg = TrainConfig.from_file(args.config)
            if args.out:
                cfg.out_path = args.out
            path = train_denoiser(args.dataset, cfg)
            print(f"checkpoint written to {path}")
            return EXIT_OK

        if args.command == "gen":
            from .pipeline import generate

            vocab = default_vocabulary()
            prompt = parse_prompt(args.prompt, vocab)
            cfg = _run_config(args, prompt)
            cfg = replace(
                cfg,
                seed=args.seed,
                correction_enabled=not args.no_correction,
                out_dir=args.out or f"runs/gen_seed{args.seed}",
            )
            record = generate(cfg)
            print(json.dumps(record.summary(), indent=2))
            print(f"run artifacts in {record.out_dir}")
            return EXIT_OK

        if args.command == "bench":
            from .bench import build_multi_benchmark, build_single_benchmark, run_benchmark
            from .pipeline import load_model

            vocab = load_model(args.checkpoint).vocab
            if args.dataset == "single":
                spec = build_single_benchmark(vocab, seed=args.seed)
            else:
                spec = build_multi_benchmark(vocab, seed=args.seed)
            if args.n:
                spec = spec.subset(args.n)
            cfg = _run_config(args, None)
            comparison = run_benchmark(spec, cfg, cfg, out_dir=args.out, workers=args.workers)
            print(comparison.table())
            return EXIT_OK

        if args.command == "ablate":
            from .bench import (
                ablate_guidance_window,
                ablate_loss_strategy,
                build_single_benchmark,
                probe_tmid_sufficiency,
            )
            from .pipeline import load_model

            vocab = load_model(args.checkpoint).vocab
            spec = build_single_benchmark(vocab, seed=args.seed).subset(args.n)
            cfg = _run_config(args, None)
            if args.kind == "loss":
                results = ablate_loss_strategy(
                    spec, args.strategies.split(","), cfg, out_dir=args.out, workers=args.workers
                )
                for name, res in results.items():
                    print(f"{name}: acc={res.acc:.1f} mae={res.mae:.3f}")
            elif args.kind == "window":
                pairs = [tuple(int(v) for v in p.split(":")) for p in args.pairs.split(",")]
                results = ablate_guidance_window(spec, pairs, cfg, out_dir=args.out, workers=args.workers)
                for (g, t), res in results.items():
                    print(f"guidance={g}/{t}: acc={res.acc:.1f} mae={res.mae:.3f}")
            else:
                t_values = [int(v) for v in args.t_values.split(",")]
                curve = probe_tmid_sufficiency(
                    spec, t_values, cfg, out_path=Path(args.out) / "tmid_agreement.csv"
                )
                for t, frac in curve:
                    print(f"t={t}: agreement={frac:.3f}")
            return EXIT_OK

        if args.command == "make-data":
            from .data import build_dataset

            out = build_dataset(
                args.out,
                size=args.size,
                seed=args.seed,
                count_range=(args.count_min, args.count_max),
                multi_class_fraction=args.multi_fraction,
            )
            print(f"dataset written to {out}")
            return EXIT_OK
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_USAGE


def main() -> None:
    sys.exit(cli_entry())


if __name__ == "__main__":
    main()
