"""Command-line interface.

Subcommands: train, eval, predict, gradcheck, ablation, synth,
export-augmented.  Exit codes are a stable contract: 0 success,
1 verification failure, 2 usage/config/data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import checkpoint as CK
from . import data as D
from . import model as M
from . import synthetic
from . import training as TR
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    NumericError,
    TapeError,
    UnsupportedKernelError,
)
from .rng import DeterministicRng
from .runconfig import RunSettings, parse_run_config
from .verify import PASS_THRESHOLD, run_gradcheck_suite

_USAGE_ERRORS = (ConfigError, DataError, CheckpointError, DimensionError,
                 UnsupportedKernelError, ContractError, TapeError)

CONFIG_HELP = """\
config file keys (all optional; flat `key = value` lines, `#` starts a comment):
  model.variant          cnn_only | cnn_lstm | cnn_bilstm_attn  (default cnn_bilstm_attn)
  model.seq_len          sequence length fed to the recurrent stage  (default 1)
  model.feat_dim         features per sequence step  (default 2048)
  model.lstm_hidden      LSTM hidden units per direction  (default 128)
  model.attention_width  self-attention window size  (default 256)
  train.learning_rate    base learning rate  (default 0.0001)
  train.decay            inverse-time lr decay per step  (default 0.000001)
  train.l2_lambda        L2 penalty on weights  (default 0.01)
  train.dropout          dropout rate  (default 0.5)
  train.batch_size       samples per optimizer step  (default 8)
  train.max_epochs       epoch cap  (default 100)
  train.patience         epochs without train-loss improvement before stopping  (default 10)
  data.manifest          path,label CSV, resolved relative to the config file
  data.train_count       train split size  (default 65)
  seed                   64-bit run seed  (default 1)
  out_dir                output directory  (default out)
"""


def _require_manifest(settings: RunSettings):
    if settings.manifest is None:
        raise ConfigError("config does not set data.manifest")
    return D.load_manifest(settings.manifest)


def _epoch_logger(prefix, max_epochs):
    def log(rec: TR.EpochRecord):
        line = (f"{prefix}epoch {rec.epoch}/{max_epochs} "
                f"train_loss={rec.train_loss:.4f} "
                f"train_acc={rec.train_accuracy:.4f}")
        if rec.val_loss is not None:
            line += (f" val_loss={rec.val_loss:.4f}"
                     f" val_acc={rec.val_accuracy:.4f}")
        print(line)
    return log


def _train_footer(records):
    if not records:
        return []
    final = records[-1]
    best = min(records, key=lambda r: r.train_loss)
    return [
        f"train accuracy (final epoch {final.epoch}): "
        f"{100.0 * final.train_accuracy:.2f}",
        f"train accuracy (best-loss epoch {best.epoch}): "
        f"{100.0 * best.train_accuracy:.2f}",
    ]


def cmd_train(args) -> int:
    settings = parse_run_config(args.config)
    seed = settings.seed if args.seed is None else args.seed
    out_dir = settings.out_dir if args.out is None else args.out
    entries = _require_manifest(settings)
    split = D.split_dataset(entries, settings.train_count, seed)
    model_cfg = settings.model_config()
    train_cfg = settings.train_config(seed)
    print(f"training {model_cfg.variant.value}: {len(split.train)} train / "
          f"{len(split.test)} test, seed {seed}")
    print(f"split sha256={D.split_hash(split)}")
    ckpt, records = TR.train(model_cfg, train_cfg, split,
                             log=_epoch_logger("", train_cfg.max_epochs))
    os.makedirs(out_dir, exist_ok=True)
    CK.save_checkpoint(ckpt, os.path.join(out_dir, "model.csq"))
    metrics, misclassified = TR.evaluate(ckpt, split.test)
    TR.emit_reports(records, [(model_cfg.variant.value, metrics)],
                    misclassified, out_dir,
                    footer_lines=_train_footer(records))
    print(f"checkpoint: {os.path.join(out_dir, 'model.csq')}")
    print(f"test accuracy={TR._pct(metrics.accuracy)} "
          f"sensitivity={TR._pct(metrics.sensitivity)} "
          f"specificity={TR._pct(metrics.specificity)}")
    return 0


def cmd_eval(args) -> int:
    ckpt = CK.load_checkpoint(args.checkpoint)
    entries = D.load_manifest(args.manifest)
    metrics, misclassified = TR.evaluate(ckpt, entries)
    TR.emit_reports(None, [(ckpt.config.variant.value, metrics)],
                    misclassified, args.out)
    print(f"accuracy={TR._pct(metrics.accuracy)} "
          f"sensitivity={TR._pct(metrics.sensitivity)} "
          f"specificity={TR._pct(metrics.specificity)}")
    print(f"TP={metrics.tp} FP={metrics.fp} FN={metrics.fn} TN={metrics.tn}")
    return 0


def cmd_predict(args) -> int:
    ckpt = CK.load_checkpoint(args.checkpoint)
    entry = D.ManifestEntry(args.image, 0, os.path.abspath(args.image))
    sample = D.load_image(entry, ckpt.config.input_size)
    label, prob = M.predict(ckpt.params, ckpt.config, sample.pixels)
    print(f"label={label} prob_ischemic={prob!r}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(args.module)
    failures = []
    for name, res in results.items():
        status = "ok" if res.max_rel_error < PASS_THRESHOLD else "FAIL"
        worst = f" (worst: {res.worst_param})" if res.worst_param else ""
        print(f"{name}: max_rel_error={res.max_rel_error:.3e} {status}{worst}")
        if res.max_rel_error >= PASS_THRESHOLD:
            failures.append((name, res))
    if failures:
        names = ", ".join(f"{n} at {r.worst_param}" for n, r in failures)
        print(f"gradient check FAILED: {names}", file=sys.stderr)
        return 1
    print(f"all {len(results)} gradient checks passed "
          f"(threshold {PASS_THRESHOLD:g})")
    return 0


def cmd_ablation(args) -> int:
    settings = parse_run_config(args.config)
    seed = settings.seed if args.seed is None else args.seed
    out_dir = settings.out_dir if args.out is None else args.out
    entries = _require_manifest(settings)
    split = D.split_dataset(entries, settings.train_count, seed)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for variant in M.Variant:
        model_cfg = settings.model_config(variant.value)
        train_cfg = settings.train_config(seed)
        print(f"[{variant.value}] split sha256={D.split_hash(split)}")
        ckpt, records = TR.train(
            model_cfg, train_cfg, split,
            log=_epoch_logger(f"[{variant.value}] ", train_cfg.max_epochs))
        CK.save_checkpoint(
            ckpt, os.path.join(out_dir, f"model_{variant.value}.csq"))
        metrics, _ = TR.evaluate(ckpt, split.test)
        rows.append((variant.value, metrics))
    table = TR.format_metrics_table(rows)
    TR.atomic_write_text(os.path.join(out_dir, "metrics.txt"), table)
    print(table, end="")
    return 0


def cmd_synth(args) -> int:
    manifest = synthetic.generate_texture_dataset(
        args.out, n_ischemic=args.ischemic, n_non_ischemic=args.non_ischemic,
        seed=args.seed, fmt=args.format)
    print(f"manifest: {manifest}")
    return 0


def cmd_export_augmented(args) -> int:
    entries = D.load_manifest(args.manifest)
    aug_cfg = D.AugmentationConfig()
    rng = DeterministicRng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for idx, entry in enumerate(entries):
        sample = D.load_image(entry)
        for copy in range(args.copies):
            out_sample = D.augment(sample, aug_cfg,
                                   rng.substream("export", idx, copy))
            u8 = ((out_sample.pixels.values + 1.0) * 127.5)
            u8 = u8.round().clip(0, 255).astype("uint8")
            stem = os.path.splitext(os.path.basename(entry.path))[0]
            name = f"{stem}_aug{copy}.{args.format}"
            path = os.path.join(args.out, name)
            if args.format == "png":
                D.write_png(path, u8)
            else:
                D.write_r96a(path, u8)
            rows.append(f"{name},{entry.label}")
    manifest = os.path.join(args.out, "manifest.csv")
    TR.atomic_write_text(manifest, "path,label\n" + "\n".join(rows) + "\n")
    print(f"wrote {len(rows)} augmented patches, manifest: {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardioseq",
        description="Deterministic from-scratch toolkit for binary cardiac "
                    "histopathology patch classification.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser(
        "train", help="train a model from a run config",
        epilog=CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True, help="run config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override out_dir from the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=".",
                   help="directory for metrics.txt / misclassified.csv "
                        "(default: current directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify a single 96x96 patch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser(
        "gradcheck",
        help="finite-difference verification of every backward pass")
    p.add_argument("--module", choices=("all", "layers", "model"),
                   default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser(
        "ablation",
        help="train and compare all three variants on a shared split",
        epilog=CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override out_dir from the config")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser(
        "synth", help="generate the synthetic two-class texture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--ischemic", type=int, default=51,
                   help="number of label-1 patches (default 51)")
    p.add_argument("--non-ischemic", type=int, default=43,
                   help="number of label-0 patches (default 43)")
    p.add_argument("--format", choices=("png", "r96a"), default="png")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "export-augmented",
        help="materialize augmented copies of every manifest image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--copies", type=int, default=4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--format", choices=("png", "r96a"), default="png")
    p.set_defaults(func=cmd_export_augmented)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric abort: {exc}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
