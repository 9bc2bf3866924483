"""Command-line entry point: ``qdaed <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

from . import checkpoint as ckpt_io
from ._accel import set_threads
from .accounting import account, account_student, format_table
from .distill import DistillConfig, load_teacher_logits, save_teacher, teacher_train, write_teacher_logits
from .errors import ConfigError, QdaedError
from .features import extract_from_wav_manifest, read_manifest, validate_manifest
from .metrics import format_report, write_curves_csv
from .pipeline import PipelineConfig, run_pipeline
from .synth import SynthConfig, synth_dataset
from .trainer import (
    QuantMode,
    TrainConfig,
    evaluate_checkpoint,
    export,
    quantize_pm,
    student_from_checkpoint,
    train,
)


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> parser for the flat ``key = value`` run-config file
CONFIG_KEYS = {
    "manifest": str,
    "teacher_logits": str,
    "out": str,
    "out_train": str,
    "seed": int,
    "hidden": int,
    "lr": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "quant": str,
    "distill": _bool,
    "temperature": float,
    "alpha_kd": float,
    "clip_norm": float,
    "cell_bits": int,
    "forget_bias": float,
    "threads": int,
}


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return out


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path)


def _merged(args):
    """Config-file values overridden by any flag the user actually passed."""
    cfg = load_config(args.config) if args.config else {}
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _train_config(cfg):
    quant = QuantMode.parse(cfg.get("quant", "none"))
    distill = None
    if cfg.get("distill", False):
        distill = DistillConfig(temperature=cfg.get("temperature", 2.0), alpha_kd=cfg.get("alpha_kd", 0.5))
    else:
        stray = sorted({"temperature", "alpha_kd"} & cfg.keys())
        if stray:
            raise ConfigError(f"{stray} given but distillation is not enabled")
    fields = {k: cfg[k] for k in ("hidden", "lr", "batch_size", "max_epochs", "patience", "seed",
                                 "clip_norm", "cell_bits", "forget_bias") if k in cfg}
    return TrainConfig(quant=quant, distill=distill, **fields)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    if args.clips is not None:
        if any(v is not None for v in (args.train, args.val, args.test)):
            raise ConfigError("use either --clips or --train/--val/--test")
        cfg = SynthConfig.from_total(args.clips, clip_seconds=args.seconds)
    else:
        base = SynthConfig()
        cfg = SynthConfig(
            n_train=args.train if args.train is not None else base.n_train,
            n_val=args.val if args.val is not None else base.n_val,
            n_test=args.test if args.test is not None else base.n_test,
            clip_seconds=args.seconds,
        )
    path = synth_dataset(args.seed, args.out, cfg)
    print(f"wrote {cfg.total} clips; manifest {path}")


def cmd_features(args):
    path = extract_from_wav_manifest(args.wav_manifest, args.out)
    print(f"manifest {path}")


def cmd_teacher(args):
    manifest = read_manifest(args.manifest)
    params, logits, info = teacher_train(manifest, args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out_logits)), exist_ok=True)
    write_teacher_logits(args.out_logits, logits)
    if args.out_checkpoint:
        save_teacher(params, info, args.out_checkpoint)
    print(f"teacher best validation average EER {100 * info['best_val_eer']:.2f}% (epoch {info['best_epoch']})")
    print(f"logits for {len(logits)} clips -> {args.out_logits}")


def cmd_train(args):
    cfg = _merged(args)
    for key in ("manifest", "out"):
        if key not in cfg:
            raise ConfigError(f"--{key.replace('_', '-')} is required (flag or config key)")
    tcfg = _train_config(cfg)
    if cfg.get("teacher_logits") and tcfg.distill is None:
        raise ConfigError("--teacher-logits given but distillation is not enabled (add --distill)")
    if tcfg.distill is not None and not cfg.get("teacher_logits"):
        raise ConfigError("distillation needs --teacher-logits")
    manifest = read_manifest(cfg["manifest"])
    teacher = None
    if tcfg.distill is not None:
        teacher = load_teacher_logits(cfg["teacher_logits"], classes=len(manifest.records[0].labels))
    if args.threads is None:
        set_threads(cfg.get("threads"))

    def progress(h):
        print(f"epoch {h['epoch']:3d}  loss {h['loss']:.5f}  val EER {100 * h['val_eer']:.2f}%", flush=True)

    ck = train(tcfg, manifest, teacher, progress=None if args.quiet else progress)
    if cfg.get("out_train"):
        ckpt_io.save(ck, cfg["out_train"])
    out = export(ck)
    os.makedirs(os.path.dirname(os.path.abspath(cfg["out"])), exist_ok=True)
    size = ckpt_io.save(out, cfg["out"])
    log = ck.meta["log"]
    print(f"best epoch {log['best_epoch']} val EER {100 * log['best_val_eer']:.2f}%; wrote {cfg['out']} ({size} bytes)")


def cmd_eval(args):
    if args.validate_only:
        m = validate_manifest(args.manifest)
        print(f"manifest OK: {len(m.records)} records")
        return
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required unless --validate-only")
    ck = ckpt_io.load(args.checkpoint)
    mode = args.mode
    if mode.startswith("pm:"):
        ck = quantize_pm(ck, QuantMode.parse(mode).bits)
        mode = "auto"
    elif mode != "auto":
        QuantMode.parse(mode)
    manifest = read_manifest(args.manifest)
    report, probs, Y = evaluate_checkpoint(ck, manifest, args.split, mode, args.seq_len)
    text = format_report(report)
    print(text, end="")
    if args.report:
        os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
        stem = os.path.splitext(args.report)[0]
        write_curves_csv(stem + ".curves.csv", probs, Y, report.class_names)
        with open(stem + ".json", "w", encoding="utf-8") as fh:
            json.dump(report.as_dict(), fh, indent=1, sort_keys=True)


def cmd_account(args):
    if args.checkpoint:
        ck = ckpt_io.load(args.checkpoint)
        student = student_from_checkpoint(ck)
        bits = ck.meta["quant"]["bits"] if ck.meta["quant"]["mode"] != "none" else None
        columns = [("fp", account_student(student, args.seq_len))]
        if bits:
            columns.append((f"{bits}-bit", account_student(student, args.seq_len, bits)))
    else:
        columns = [("fp", account(args.hidden, args.input_dim, args.classes, args.seq_len))]
        for b in args.bits or ():
            columns.append((f"{b}-bit", account(args.hidden, args.input_dim, args.classes, args.seq_len, b)))
    print(format_table(columns))
    m = columns[0][1]
    print(f"parameters: {m.param_count}  bytes: {m.param_bytes}  FLOPs: {m.flops}")


def cmd_pipeline(args):
    base = PipelineConfig()
    synth = base.synth
    if args.clips is not None:
        synth = SynthConfig.from_total(args.clips)
    tcfg = replace(base.train, hidden=args.hidden, max_epochs=args.epochs, patience=args.patience)
    cfg = replace(base, seeds=tuple(args.seeds), synth=synth, train=tcfg)
    _, _, checks = run_pipeline(args.out, cfg)
    if not all(checks.values()):
        print("some trend checks failed", file=sys.stderr)


# --------------------------------------------------------------------------


def _bits_arg(text):
    try:
        b = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if b not in (4, 8, 16):
        raise argparse.ArgumentTypeError("bit-width must be 4, 8 or 16")
    return b


def build_parser():
    p = argparse.ArgumentParser(prog="qdaed", description="Quantized distilled LSTM audio event detection.")
    p.add_argument("--threads", type=int, default=None, help="bound worker threads (results are unaffected)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labelled dataset with features")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, help="total clips, split 70/10/20")
    s.add_argument("--train", type=int)
    s.add_argument("--val", type=int)
    s.add_argument("--test", type=int)
    s.add_argument("--seconds", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="extract features for a manifest of WAV files")
    s.add_argument("--wav-manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("teacher", help="train the built-in teacher and write its logits")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-logits", required=True)
    s.add_argument("--out-checkpoint")
    s.set_defaults(func=cmd_teacher)

    s = sub.add_parser("train", help="train a student and export it")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--teacher-logits", dest="teacher_logits")
    s.add_argument("--distill", action="store_const", const=True, default=None)
    s.add_argument("--temperature", type=float)
    s.add_argument("--alpha-kd", dest="alpha_kd", type=float)
    s.add_argument("--quant", help="none | qat:N | pm:N with N in {4, 8, 16}")
    s.add_argument("--hidden", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--max-epochs", dest="max_epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--cell-bits", dest="cell_bits", type=int)
    s.add_argument("--out")
    s.add_argument("--out-train", dest="out_train", help="also save the training checkpoint (with optimizer state)")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--mode", default="auto", help="auto | none | qat:N | pm:N")
    s.add_argument("--seq-len", dest="seq_len", type=int)
    s.add_argument("--report")
    s.add_argument("--validate-only", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("account", help="parameter, size and FLOP accounting")
    s.add_argument("--checkpoint")
    s.add_argument("--hidden", type=int, default=256)
    s.add_argument("--input-dim", dest="input_dim", type=int, default=64)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--seq-len", dest="seq_len", type=int, default=998)
    s.add_argument("--bits", type=_bits_arg, nargs="*")
    s.set_defaults(func=cmd_account)

    s = sub.add_parser("pipeline", help="synth, teacher, all student variants, evaluation and trend report")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--clips", type=int)
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--epochs", type=int, default=PipelineConfig().train.max_epochs)
    s.add_argument("--patience", type=int, default=PipelineConfig().train.patience)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        set_threads(args.threads)
        args.func(args)
    except ConfigError as exc:
        print(f"qdaed: config error: {exc}", file=sys.stderr)
        return 2
    except (QdaedError, OSError) as exc:
        print(f"qdaed: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
