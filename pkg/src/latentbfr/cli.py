"""Command-line entry point: ``latentbfr <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError
from .config import ConfigError, PipelineConfig, load_config

log = logging.getLogger("latentbfr")

TRAIN_COMMANDS = {
    "train-vqvae": "vqvae",
    "train-embedder": "embedder",
    "train-diffusion": "diffusion",
    "train-irn": "irn",
    "train-mask": "mask",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file (unknown keys are rejected)")
    p.add_argument("--seed", type=int, help="base seed for the data, init and sampler streams")
    p.add_argument("--steps", type=int, help="training steps for train-* commands, sampler steps otherwise")
    p.add_argument("--guidance-scale", type=float, help="identity guidance scale (gamma)")
    p.add_argument("--no-mask", action="store_true", help="apply guidance without the latent mask")
    p.add_argument("--no-guidance", action="store_true", help="unguided sampling")
    p.add_argument("--out", type=Path, help="run directory (default: out_dir from the config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentbfr", description="Latent diffusion face restoration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stage in TRAIN_COMMANDS.items():
        _common(sub.add_parser(name, help=f"train the {stage} stage"))
    p = sub.add_parser("run", help="train every stage, restore the eval pairs, write the manifest")
    _common(p)
    p = sub.add_parser("restore", help="restore degraded PNGs (default: the eval pairs)")
    _common(p)
    p.add_argument("--input", type=Path, help="directory of degraded PNGs")
    p = sub.add_parser("evaluate", help="MetricReport (JSON + per-image CSV) for restored vs reference PNGs")
    _common(p)
    p.add_argument("--restored", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p = sub.add_parser("degrade", help="write clean/degraded pairs and a JSON manifest")
    _common(p)
    p.add_argument("--input", type=Path, help="directory of clean PNGs (default: toy eval corpus)")
    p = sub.add_parser("ablate", help="evaluate every ablation arm on the eval pairs")
    _common(p)
    p = sub.add_parser("reproduce", help="rerun a pipeline from its manifest and compare hashes")
    _common(p)
    p.add_argument("manifest", type=Path)
    p = sub.add_parser("make-corpus", help="write the procedural toy face corpus as PNGs")
    _common(p)
    p.add_argument("--identities", type=int, default=16)
    p.add_argument("--per-identity", type=int, default=4)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seeds"] = {"data": args.seed, "init": args.seed, "sampler": args.seed}
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    # the mask is trained for a specific gamma, so the scale is a config value for train-mask
    if args.command == "train-mask" and args.guidance_scale is not None:
        overrides["guidance"] = {"scale": args.guidance_scale}
    return load_config(args.config, overrides)


def _restore_options(args):
    from .pipeline import RestoreOptions

    return RestoreOptions(guidance=not args.no_guidance, use_mask=not args.no_mask,
                          scale=args.guidance_scale, num_steps=args.steps)


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cmd_train(args, cfg):
    from .pipeline import Run

    run = Run(cfg)
    stage = TRAIN_COMMANDS[args.command]
    digest = run.train(stage, args.steps)
    print(f"{stage}: {run.checkpoint_path(stage)} sha256={digest}")


def cmd_run(args, cfg):
    from .pipeline import Run

    manifest = Run(cfg).run_all()
    print(json.dumps(manifest["metrics"].get("eval", {}), indent=1, sort_keys=True))


def cmd_restore(args, cfg):
    from .pipeline import Run, StageError, load_image_dir, write_png

    run = Run(cfg)
    if args.input is not None:
        try:
            corpus = load_image_dir(args.input, cfg.resolution)
        except FileNotFoundError as exc:
            raise StageError("restore", str(exc)) from None
        degraded, names = corpus.images, corpus.names
    else:
        pool = run.pairs("eval")
        degraded, names = pool.degraded, pool.names
    restored = run.restore(degraded, names, _restore_options(args))
    dest = run.out / "restored"
    for img, name in zip(restored, names):
        write_png(img, dest / name)
    print(f"restored {len(names)} images -> {dest}")


def cmd_evaluate(args, cfg):
    from .pipeline import Run, StageError, load_image_dir

    run = Run(cfg)
    try:
        restored = load_image_dir(args.restored, cfg.resolution)
        reference = load_image_dir(args.reference, cfg.resolution)
    except FileNotFoundError as exc:
        raise StageError("evaluate", str(exc)) from None
    ref = dict(zip(reference.names, reference.images))
    missing = [n for n in restored.names if n not in ref]
    if missing:
        raise StageError("evaluate", f"no reference for {missing[:3]}")
    refs = torch.stack([ref[n] for n in restored.names])
    report = run.evaluate(restored.images, refs, restored.names)
    run.out.mkdir(parents=True, exist_ok=True)
    report.to_json(run.out / "report.json")
    report.to_csv(run.out / "report.csv")
    print(json.dumps(report.aggregates, indent=1, sort_keys=True))


def cmd_degrade(args, cfg):
    from .pipeline import Run, StageError, build_pairs, load_image_dir, write_png

    run = Run(cfg)
    if args.input is not None:
        try:
            corpus = load_image_dir(args.input, cfg.resolution)
        except FileNotFoundError as exc:
            raise StageError("degrade", str(exc)) from None
    else:
        corpus = run.corpus("eval")
    pool = build_pairs(cfg, corpus, "eval")
    dest = run.out / "pairs"
    entries = []
    for clean, deg, p, name in zip(pool.clean, pool.degraded, pool.params, pool.names):
        write_png(clean, dest / "clean" / name)
        write_png(deg, dest / "degraded" / name)
        entries.append({"name": name, "params": p.to_json()})
    (dest / "pairs.json").write_text(json.dumps({"resolution": cfg.resolution, "pairs": entries}, indent=1))
    print(f"wrote {len(entries)} pairs -> {dest}")


def cmd_ablate(args, cfg):
    from .pipeline import Run, ablation_table

    run = Run(cfg)
    reports = run.ablate(scale=args.guidance_scale, num_steps=args.steps)
    rows = ablation_table(reports)
    run.out.mkdir(parents=True, exist_ok=True)
    (run.out / "ablation.json").write_text(json.dumps(
        {arm: {"aggregates": r.aggregates, "records": r.records} for arm, r in reports.items()},
        indent=1, sort_keys=True))
    _write_rows(run.out / "ablation.csv", rows)
    for row in rows:
        print(f"{row['arm']:16s} psnr {row['mean_psnr']:6.2f}  ssim {row['mean_ssim']:.3f}  "
              f"feat {row['mean_feat_dist']:.4f}  ids {row['mean_ids']:.4f}")


def cmd_reproduce(args, cfg):
    from .pipeline import StageError, rerun_from_manifest

    out = args.out or Path(cfg.out_dir)
    result = rerun_from_manifest(args.manifest, out)
    print(json.dumps({"compared": result["compared"], "mismatched": result["mismatched"]}, indent=1))
    if result["mismatched"]:
        raise StageError("reproduce", f"hash mismatch for {result['mismatched']}")


def cmd_make_corpus(args, cfg):
    from .toydata import make_corpus, write_corpus

    corpus = make_corpus(args.identities, args.per_identity, cfg.resolution, cfg.seeds.data)
    dest = Path(cfg.out_dir)
    names = write_corpus(corpus, dest)
    print(f"wrote {len(names)} images -> {dest}")


COMMANDS = {
    **{name: cmd_train for name in TRAIN_COMMANDS},
    "run": cmd_run,
    "restore": cmd_restore,
    "evaluate": cmd_evaluate,
    "degrade": cmd_degrade,
    "ablate": cmd_ablate,
    "reproduce": cmd_reproduce,
    "make-corpus": cmd_make_corpus,
}


def main(argv: list[str] | None = None) -> int:
    from .pipeline import StageError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error [config] {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # yaml syntax errors and the like
        print(f"error [config] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, ValueError, OSError) as exc:
        print(f"error [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
