"""Command-line entry point: generate / train / eval / ablate.

Every command reads one flat JSON config, writes a resolved copy of it to
the output directory, and is deterministic given that config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter

from . import synthvid, training
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ContractError, FormatError, NumericError
from .model import ABLATION_MODES, ActionModel
from .training import ClipProvider, per_class_delta

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def _write_csv(path, header, rows):
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def _prepare_out(cfg: ExperimentConfig, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8", newline="\n") as f:
        f.write(cfg.to_json())


def _load_manifest(cfg: ExperimentConfig):
    path = cfg.manifest or os.path.join(cfg.out_dir, "manifest.tsv")
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    return synthvid.read_manifest(path)


def _provider(cfg: ExperimentConfig, depth_mode: str | None = None) -> ClipProvider:
    # pixel caching is redundant here: the training loop caches the frozen
    # activations per clip, so each clip is only rendered once anyway
    return ClipProvider(cfg.gen_config(), cfg.frames, cfg.stride,
                        depth_mode=depth_mode or cfg.depth_mode, cache=False)


def cmd_generate(cfg: ExperimentConfig) -> int:
    _prepare_out(cfg, cfg.out_dir)
    train, val = synthvid.build_dataset(cfg.gen_config(), cfg.n_per_class,
                                        cfg.split_ratio, cfg.data_seed)
    synthvid.write_manifest(os.path.join(cfg.out_dir, "manifest.tsv"), train, val)
    counts = Counter(c for c, _ in train + val)
    summary = {
        "num_clips": len(train) + len(val),
        "num_train": len(train),
        "num_val": len(val),
        "class_counts": {str(c): counts[c] for c in sorted(counts)},
        "data_seed": cfg.data_seed,
    }
    with open(os.path.join(cfg.out_dir, "summary.json"), "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train / {len(val)} val records to {cfg.out_dir}/manifest.tsv")
    return EXIT_OK


def _train_one(cfg: ExperimentConfig, mode: str, provider, train_recs, val_recs,
               quiet: bool = False, acts_cache: dict | None = None):
    model = ActionModel(cfg.model_config(mode), seed=cfg.seed)
    tcfg = cfg.train_config()
    log = None if quiet else (lambda msg: print(f"[{mode}] {msg}"))
    metrics, opt = training.train(model, provider, train_recs, val_recs, tcfg, log=log,
                                  acts_cache=acts_cache)
    return model, opt, tcfg, metrics


def cmd_train(cfg: ExperimentConfig, resume: str | None = None) -> int:
    _prepare_out(cfg, cfg.out_dir)
    train_recs, val_recs = _load_manifest(cfg)
    provider = _provider(cfg)
    tcfg = cfg.train_config()
    if resume is not None:
        model, meta, records = training.load_checkpoint(resume, cfg.model_config())
        opt = training.restore_optimizer(model, records, tcfg)
        metrics, opt = training.train(model, provider, train_recs, val_recs, tcfg,
                                      optimizer=opt, start_epoch=meta["next_epoch"],
                                      log=lambda m: print(f"[{cfg.mode}] {m}"))
    else:
        model, opt, tcfg, metrics = _train_one(cfg, cfg.mode, provider, train_recs, val_recs)
    _write_csv(os.path.join(cfg.out_dir, "metrics.csv"),
               ["epoch", "train_loss", "val_top1", "seconds"],
               [[m.epoch, m.train_loss, m.top1, m.seconds] for m in metrics])
    _write_csv(os.path.join(cfg.out_dir, "per_class.csv"),
               ["epoch"] + [f"class_{c}" for c in range(cfg.num_classes)],
               [[m.epoch] + m.per_class for m in metrics])
    training.save_checkpoint(os.path.join(cfg.out_dir, "checkpoint.ckpt"),
                             model, opt, tcfg, next_epoch=tcfg.epochs)
    if metrics:
        print(f"final val top-1: {metrics[-1].top1:.4f}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, depth_mode: str | None,
             split: str) -> int:
    _prepare_out(cfg, cfg.out_dir)
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    train_recs, val_recs = _load_manifest(cfg)
    records = {"train": train_recs, "val": val_recs, "all": train_recs + val_recs}[split]
    model, meta, _ = training.load_checkpoint(checkpoint)
    provider = _provider(cfg, depth_mode=depth_mode)
    rec = training.evaluate(model, provider, records, cfg.train_config())
    _write_csv(os.path.join(cfg.out_dir, "eval.csv"),
               ["split", "depth_mode", "top1"] + [f"class_{c}" for c in range(model.cfg.num_classes)],
               [[split, depth_mode or cfg.depth_mode, rec.top1] + rec.per_class])
    print(f"top-1 ({split}, depth={depth_mode or cfg.depth_mode}): {rec.top1:.4f}")
    for c, acc in enumerate(rec.per_class):
        print(f"  class {c}: {acc:.4f}")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, quiet: bool = False) -> int:
    _prepare_out(cfg, cfg.out_dir)
    train_recs, val_recs = _load_manifest(cfg)
    provider = _provider(cfg)
    results = {}
    # the frozen backbone is seeded identically in every mode, so the
    # activation cache is shared across the three trainings
    acts_cache: dict = {}
    for mode in ABLATION_MODES:
        _, _, _, metrics = _train_one(cfg, mode, provider, train_recs, val_recs,
                                      quiet=quiet, acts_cache=acts_cache)
        results[mode] = metrics[-1]
    _write_csv(os.path.join(cfg.out_dir, "ablation.csv"), ["mode", "val_top1"],
               [[mode, results[mode].top1] for mode in ABLATION_MODES])
    deltas = per_class_delta(results["rgb_depth_mamba"], results["rgb_only"])
    _write_csv(os.path.join(cfg.out_dir, "per_class_delta.csv"),
               ["class_id", "acc_rgb_only", "acc_fused", "delta"],
               [[r["class_id"], r["acc_rgb_only"], r["acc_fused"], r["delta"]] for r in deltas])
    print("mode,val_top1")
    for mode in ABLATION_MODES:
        print(f"{mode},{results[mode].top1:.4f}")
    print("largest per-class gains (full vs rgb_only):")
    for r in deltas:
        print(f"  class {r['class_id']}: {r['acc_rgb_only']:.3f} -> {r['acc_fused']:.3f} "
              f"({r['delta']:+.3f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthact",
        description="RGB+depth video action recognition experiments on synthetic clips")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON experiment config")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help="training seed override")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to resume from")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--manifest", help="manifest path (overrides config)")
            p.add_argument("--depth-mode", choices=synthvid.DEPTH_MODES)
            p.add_argument("--split", choices=("train", "val", "all"), default="val")
        if name == "ablate":
            p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.out:
            overrides["out_dir"] = args.out
        if args.seed is not None:
            overrides["seed"] = args.seed
        if getattr(args, "manifest", None):
            overrides["manifest"] = args.manifest
        cfg = load_config(args.config, overrides)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.depth_mode, args.split)
        return cmd_ablate(cfg, quiet=args.quiet)
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
