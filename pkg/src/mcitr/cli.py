"""Command-line interface.

Commands: train, evaluate, extract, bench, sweep, make-synthetic. Every
command takes an optional YAML config (--config) plus dotted-key overrides
(`--loss.gamma 90`, `--data.root path`). Exit codes: 0 success, 2 config
error, 3 runtime failure. The resolved config is dumped alongside every
artifact so any run can be replayed from its dump.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import yaml

from . import evaluator, feature_store, trainer
from .config import (ConfigError, RunConfig, config_from_dict, config_to_dict,
                     dump_config, load_config)
from .feature_store import DatasetError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SWEEP_AXES = {
    "gamma": "loss.gamma",
    "epsilon": "loss.epsilon",
    "lambda": "loss.lambda",
    "queue_size": "moco.queue_size",
    "batch_size": "train.batch_size",
}


def _parse_overrides(extras: list[str]) -> dict[str, str]:
    """Turn leftover `--a.b.c value` / `--a.b.c=value` tokens into a mapping."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument `{tok}`")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extras):
                raise ConfigError(f"missing value for override `--{body}`")
            key, value = body, extras[i + 1]
            i += 2
        if not key:
            raise ConfigError("empty override key")
        out[key] = value
    return out


def _config_from_args(args, extras: list[str]) -> RunConfig:
    return load_config(getattr(args, "config", None), _parse_overrides(extras))


def _config_from_checkpoint(payload: dict, extras: list[str]) -> RunConfig:
    from .config import apply_overrides, validate_config
    data = dict(payload["config"])
    apply_overrides(data, _parse_overrides(extras))
    cfg = config_from_dict(data)
    validate_config(cfg)
    return cfg


def _write_lines(path: Path | None, lines: list[str]) -> None:
    for line in lines:
        print(line)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")


def cmd_train(args, extras) -> int:
    cfg = _config_from_args(args, extras)
    print("# resolved config")
    print(yaml.safe_dump(config_to_dict(cfg), sort_keys=True).rstrip())
    result = trainer.run(cfg, resume=args.resume, force_resume=args.force)
    print(f"best_epoch={result.best_epoch}")
    print(f"best_rsum={result.best_rsum:.4f}")
    print(f"best_checkpoint={result.best_checkpoint}")
    print(f"last_checkpoint={result.last_checkpoint}")
    return EXIT_OK


def cmd_evaluate(args, extras) -> int:
    payload = trainer.load_checkpoint(args.checkpoint)
    cfg = _config_from_checkpoint(payload, extras)
    root = args.data_root or cfg.data.root
    if not root:
        raise ConfigError("data.root is required (pass --data-root or an override)")
    data = feature_store.load_split(root, args.split)
    trainer.check_data_matches_config(cfg, data)
    img_enc, txt_enc = trainer.load_query_encoders(payload, cfg)
    metrics = trainer.evaluate_encoders(img_enc, txt_enc, data, cfg,
                                        protocol=args.protocol)
    out = Path(args.out) if args.out else None
    _write_lines(out, metrics.lines())
    if out is not None:
        dump_config(cfg, out.with_suffix(".config.yaml"))
    return EXIT_OK


def cmd_extract(args, extras) -> int:
    payload = trainer.load_checkpoint(args.checkpoint)
    cfg = _config_from_checkpoint(payload, extras)
    root = args.data_root or cfg.data.root
    if not root:
        raise ConfigError("data.root is required (pass --data-root or an override)")
    data = feature_store.load_split(root, args.split)
    trainer.check_data_matches_config(cfg, data)
    img_enc, txt_enc = trainer.load_query_encoders(payload, cfg)
    img_emb, cap_emb = evaluator.extract_embeddings(
        img_enc, txt_enc, data, dtype=trainer.DTYPES[cfg.precision])
    manifest = data.manifest
    caption_image_ids = [img for img, caps in manifest.entries for _ in caps]
    dump = evaluator.EmbeddingDump(
        image_ids=manifest.image_ids(),
        caption_ids=manifest.caption_ids(),
        caption_image_ids=caption_image_ids,
        image_embeddings=img_emb,
        caption_embeddings=cap_emb,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluator.save_embeddings(out, dump)
    dump_config(cfg, out.with_suffix(".config.yaml"))
    print(f"embeddings={out}")
    print(f"images={len(dump.image_ids)} captions={len(dump.caption_ids)} dim={dump.dim}")
    return EXIT_OK


def cmd_bench(args, extras) -> int:
    if bool(args.embeddings) == bool(args.checkpoint):
        raise ConfigError("pass exactly one of --embeddings or --checkpoint")
    rsum = None
    if args.embeddings:
        dump = evaluator.load_embeddings(args.embeddings)
        report = evaluator.benchmark_inference(
            embeddings=dump, repeats=args.repeats, label=args.label)
        metrics = evaluator.evaluate_protocol(
            dump.image_embeddings, dump.caption_embeddings,
            dump.image_to_caption_indices())
        rsum = metrics.rsum
    else:
        payload = trainer.load_checkpoint(args.checkpoint)
        cfg = _config_from_checkpoint(payload, extras)
        root = args.data_root or cfg.data.root
        if not root:
            raise ConfigError("data.root is required (pass --data-root or an override)")
        data = feature_store.load_split(root, args.split)
        trainer.check_data_matches_config(cfg, data)
        img_enc, txt_enc = trainer.load_query_encoders(payload, cfg)
        label = args.label if args.label != "default" else cfg.model.enhancement
        report = evaluator.benchmark_inference(
            image_encoder=img_enc, text_encoder=txt_enc, data=data,
            repeats=args.repeats, label=label,
            dtype=trainer.DTYPES[cfg.precision])
        metrics = trainer.evaluate_encoders(img_enc, txt_enc, data, cfg)
        rsum = metrics.rsum
    lines = report.lines()
    if rsum is not None:
        lines.append(f"r_sum={rsum:.4f}")
    _write_lines(Path(args.out) if args.out else None, lines)
    if args.plot_data:
        plot_path = Path(args.plot_data)
        plot_path.parent.mkdir(parents=True, exist_ok=True)
        new_file = not plot_path.exists()
        with open(plot_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new_file:
                writer.writerow(["method", "encoding_s", "matching_s",
                                 "total_s", "r_sum"])
            writer.writerow([report.label, f"{report.encoding_s:.6f}",
                             f"{report.matching_s:.6f}", f"{report.total_s:.6f}",
                             "" if rsum is None else f"{rsum:.4f}"])
    return EXIT_OK


def cmd_sweep(args, extras) -> int:
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {sorted(SWEEP_AXES)}")
    key = SWEEP_AXES[args.axis]
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("no sweep values given")
    overrides = _parse_overrides(extras)
    rows = []
    base_cfg = load_config(args.config, overrides)
    for value in values:
        per_run = dict(overrides)
        per_run[key] = value
        per_run["name"] = f"{base_cfg.name}-{args.axis}-{value}"
        cfg = load_config(args.config, per_run)
        result = trainer.run(cfg)
        payload = trainer.load_checkpoint(result.best_checkpoint)
        data = feature_store.load_split(cfg.data.root, args.split)
        trainer.check_data_matches_config(cfg, data)
        img_enc, txt_enc = trainer.load_query_encoders(payload, cfg)
        metrics = trainer.evaluate_encoders(img_enc, txt_enc, data, cfg,
                                            protocol=args.protocol)
        rows.append((value, metrics))
        print(f"done {args.axis}={value} r_sum={metrics.rsum:.2f}")

    header = (f"{args.axis:>12} | cap_r@1 cap_r@5 cap_r@10 | "
              "img_r@1 img_r@5 img_r@10 |    r_sum")
    print(header)
    print("-" * len(header))
    for value, m in rows:
        print(f"{value:>12} | {m.cap_r1:7.2f} {m.cap_r5:7.2f} {m.cap_r10:8.2f} | "
              f"{m.img_r1:7.2f} {m.img_r5:7.2f} {m.img_r10:8.2f} | {m.rsum:8.2f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([args.axis, "caption_r@1", "caption_r@5", "caption_r@10",
                             "image_r@1", "image_r@5", "image_r@10", "r_sum"])
            for value, m in rows:
                writer.writerow([value, m.cap_r1, m.cap_r5, m.cap_r10,
                                 m.img_r1, m.img_r5, m.img_r10, m.rsum])
    return EXIT_OK


def cmd_make_synthetic(args, extras) -> int:
    if extras:
        raise ConfigError(f"unexpected arguments: {extras}")
    try:
        root = feature_store.make_synthetic_corpus(
            args.out,
            n_images=args.n_images,
            K=args.k,
            d_i=args.d_i,
            d_t=args.d_t,
            d_ic=args.d_ic,
            d_latent=args.d_latent,
            seed=args.seed,
            val_images=args.val_images,
            test_images=args.test_images,
            max_length=args.max_length,
            fold_count=args.folds,
            dtype=args.dtype,
            with_clip=not args.no_clip,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"dataset={root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcitr",
        description="Train and evaluate the momentum-queue image-text retriever.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and select by validation rsum")
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--force", action="store_true",
                   help="resume even if the config hash differs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--protocol", default="full",
                   choices=["full", "full5k", "flickr1k", "cocofold1k"])
    p.add_argument("--out", default=None, help="metrics file (one metric per line)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract", help="dump embeddings for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="output .npz path")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("bench", help="measure encoding/matching inference times")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--embeddings", default=None, help="cached embedding dump (.npz)")
    p.add_argument("--data-root", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--label", default="default")
    p.add_argument("--out", default=None, help="timing report file")
    p.add_argument("--plot-data", default=None,
                   help="CSV to append (method, times, r_sum) rows to")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="train/evaluate across one hyperparameter axis")
    p.add_argument("--config", default=None)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--split", default="test")
    p.add_argument("--protocol", default="full",
                   choices=["full", "full5k", "flickr1k", "cocofold1k"])
    p.add_argument("--out", default=None, help="CSV table path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-synthetic", help="generate a paired synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=64)
    p.add_argument("--k", type=int, default=36)
    p.add_argument("--d-i", type=int, default=64)
    p.add_argument("--d-t", type=int, default=48)
    p.add_argument("--d-ic", type=int, default=32)
    p.add_argument("--d-latent", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-images", type=int, default=8)
    p.add_argument("--test-images", type=int, default=25)
    p.add_argument("--max-length", type=int, default=12)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.add_argument("--no-clip", action="store_true")
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
    except SystemExit as exc:      # argparse reports usage errors itself
        return int(exc.code or 0)
    try:
        return args.func(args, extras)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
