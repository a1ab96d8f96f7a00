"""Command-line surface: data generation, training, sampling, benchmark.

Exit codes: 0 success, 1 validation or usage error, 2 internal invariant
breach. Every subcommand takes --config/--seed/--out; paths it writes stay
under --out.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import ppm
from .bench import run_bench
from .checkpoint import save_checkpoint
from .config import Config, load_config, write_default
from .dataset import TrainData, build_bench_manifest, generate_dataset, load_bench_manifest
from .encoders import PATCH
from .errors import InvariantError, ValidationError
from .grammar import build_caption, pad_caption, subject_phrase, tokenize
from .model import Model
from .render import IMAGE_SIZE, render_crop
from .rng import Rng
from .training import gradient_report, load_model, model_to_checkpoint, run_stages


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    cfg.validate()
    return cfg


def _progress(step, stage, flow, total):
    print(f"step {step} stage {stage} flow {flow:.4f} total {total:.4f}", flush=True)


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    seed = cfg.data.seed if args.seed is None else args.seed
    counts = {"single": cfg.data.n_single, "multi": cfg.data.n_multi,
              "concat": cfg.data.n_concat, "cross": cfg.data.n_cross}
    info = generate_dataset(args.out, Rng(seed), counts,
                            generic_prob=cfg.data.generic_prob,
                            bench_fraction=cfg.data.holdout,
                            drop_size_prob=cfg.data.drop_size_prob)
    total = sum(counts.values())
    print(f"wrote {total} samples under {args.out} "
          f"({len(info['bench_identities'])} identities held out)")
    return 0


def _run_training(args, stages) -> int:
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    data = TrainData(args.data)
    if args.resume:
        model = load_model(args.resume)
    else:
        model = Model(cfg.model, cfg.train.seed)
    _, step = run_stages(model, cfg, data, args.out, stages,
                         ablate_attention=getattr(args, "ablate_attention", False),
                         progress=_progress)
    print(f"finished at step {step}; checkpoints and metrics.csv under {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    return _run_training(args, [0])


def cmd_train(args) -> int:
    try:
        stages = [int(s) for s in args.stages.split(",") if s != ""]
    except ValueError:
        raise ValidationError(f"bad --stages value {args.stages!r}") from None
    if any(s not in (0, 1, 2, 3) for s in stages) or not stages:
        raise ValidationError(f"--stages must name stages 0..3, got {args.stages!r}")
    return _run_training(args, stages)


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    model = load_model(args.checkpoint)
    seed = cfg.train.seed if args.seed is None else args.seed
    steps = args.steps or cfg.train.sample_steps

    bundles, refs = [], []
    if args.ref:
        idents = []
        for spec in args.ref:
            parts = spec.split(":")
            if len(parts) != 3:
                raise ValidationError(f"--ref wants shape:color:size, got {spec!r}")
            idents.append(tuple(parts))
        phrases = [subject_phrase(s, c, z, generic=True) for s, c, z in idents]
        tokens, spans = build_caption(phrases, args.bg)
        crops = [ppm.to_float(render_crop(*ident)) for ident in idents]
        ids, mask = pad_caption(tokenize(tokens))
        enc = model.encode_text(ids, mask)
        bundles = model.build_bundles(
            enc, [(i, s, c) for i, s, c in zip(idents, spans, crops)])
        refs = Model.ref_latents(crops)
    elif args.prompt:
        ids, mask = pad_caption(tokenize(args.prompt.split()))
        enc = model.encode_text(ids, mask)
    else:
        raise ValidationError("sample needs --prompt or at least one --ref")

    grid = (IMAGE_SIZE // PATCH, IMAGE_SIZE // PATCH)
    noise = Model.draw_noise(Rng(seed), grid, dtype=model.store.dtype)
    img = model.sample(enc, grid, steps, noise, bundles=bundles, ref_latents=refs)
    path = args.out if args.out.endswith(".ppm") else os.path.join(args.out, "sample.ppm")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    ppm.write_ppm(path, ppm.to_uint8(img))
    print(f"wrote {path}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    seed = cfg.bench.seed if args.seed is None else args.seed
    model = load_model(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    manifest_path = os.path.join(args.out, "manifest.jsonl")
    data = TrainData(args.data)
    build_bench_manifest(manifest_path, Rng(seed), data.bench_identities,
                         {"single": cfg.bench.n_single, "dual": cfg.bench.n_dual,
                          "triple": cfg.bench.n_triple})
    entries = load_bench_manifest(manifest_path)
    report = run_bench(model, entries, args.out, seed=seed,
                       steps=cfg.bench.sample_steps, use_refs=not args.no_refs)
    for line in report.table_lines():
        print(line)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else None
    report = gradient_report(cfg.model if cfg else None, seed=args.seed or 0,
                             coords=args.coords)
    ok = True
    for name in ("flow", "region", "attention", "total"):
        err = report[name]
        ok = ok and err < 1e-3
        print(f"{name}: max rel err {err:.3e}")
    print("gradcheck " + ("passed" if ok else "FAILED") + " (gate 1e-3)")
    return 0 if ok else 1


def cmd_report(args) -> int:
    found = False
    metrics = os.path.join(args.out, "metrics.csv")
    if os.path.exists(metrics):
        found = True
        with open(metrics) as fh:
            lines = fh.read().splitlines()
        last_by_stage = {}
        for line in lines[1:]:
            stage = line.split(",")[1]
            last_by_stage[stage] = line
        print(lines[0])
        for stage in sorted(last_by_stage):
            print(last_by_stage[stage])
    table = os.path.join(args.out, "report.txt")
    if os.path.exists(table):
        found = True
        with open(table) as fh:
            print(fh.read(), end="")
    if not found:
        raise ValidationError(f"nothing to report under {args.out} "
                              "(no metrics.csv or report.txt)")
    return 0


def cmd_write_config(args) -> int:
    write_default(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="moddit",
        description="Train and evaluate a per-token modulated flow model "
                    "on a synthetic shapes world.")
    sub = p.add_subparsers(dest="command", metavar="command")

    def common(sp, out_help, out_required=True):
        sp.add_argument("--config", help="INI config path (defaults used if omitted)")
        sp.add_argument("--seed", type=int, help="override the config's seed")
        sp.add_argument("--out", required=out_required, help=out_help)

    sp = sub.add_parser("gen-data", help="write the synthetic training corpus")
    common(sp, "dataset output directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain", help="stage-0 dense text-to-image training")
    common(sp, "run directory for checkpoints and metrics")
    sp.add_argument("--data", required=True, help="dataset directory from gen-data")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="run training stages (default all four)")
    common(sp, "run directory for checkpoints and metrics")
    sp.add_argument("--data", required=True, help="dataset directory from gen-data")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--stages", default="0,1,2,3", help="comma-separated stage list")
    sp.add_argument("--ablate-attention", action="store_true",
                    help="drop the attention preservation loss (ablation mode)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="sample one image from a checkpoint")
    common(sp, "output image path (.ppm) or directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", help="caption tokens separated by spaces")
    sp.add_argument("--ref", action="append",
                    help="subject reference shape:color:size (repeatable)")
    sp.add_argument("--bg", default="white", help="background for --ref prompts")
    sp.add_argument("--steps", type=int, help="sampler steps")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("bench", help="run the benchmark suites")
    common(sp, "benchmark output directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset directory (bench identities)")
    sp.add_argument("--no-refs", action="store_true",
                    help="score the base branch (zero-offset baseline)")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference audit of every loss")
    common(sp, "unused", out_required=False)
    sp.add_argument("--coords", type=int, default=2,
                    help="coordinates checked per probed tensor")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("report", help="print run and benchmark summaries")
    common(sp, "run or benchmark directory to summarize")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("write-config", help="write the default config file")
    common(sp, "config path to write")
    sp.set_defaults(func=cmd_write_config)

    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except InvariantError as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return 2
