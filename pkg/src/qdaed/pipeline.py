"""End-to-end desk-scale experiment: synthesize, train teacher, train the
student variants, quantize, evaluate, and summarise the trends.

Variants per seed:

``vanilla``  full-precision student, hard labels only
``kd``       full-precision distilled student
``qat:N``    distilled student trained with N-bit fake quantization
``pm:N``     ``kd`` quantized to N bits after training
"""

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint as ckpt_io
from .distill import DistillConfig, pool, save_teacher, teacher_forward, teacher_train, write_teacher_logits
from .features import read_manifest
from .metrics import average_eer, format_report, write_curves_csv
from .synth import SynthConfig, synth_dataset
from .tensor import sigmoid
from .trainer import QuantMode, TrainConfig, evaluate_checkpoint, export, quantize_pm, train

QAT_BITS = (4, 8, 16)
PM_BITS = (4, 8)


@dataclass(frozen=True)
class PipelineConfig:
    seeds: tuple = (0, 1, 2)
    synth: SynthConfig = SynthConfig()
    train: TrainConfig = TrainConfig(hidden=64, max_epochs=40, patience=10)
    distill: DistillConfig = DistillConfig()
    qat_bits: tuple = QAT_BITS
    pm_bits: tuple = PM_BITS


def variant_names(cfg):
    return ["vanilla", "kd", *(f"qat:{b}" for b in cfg.qat_bits), *(f"pm:{b}" for b in cfg.pm_bits)]


def _fname(variant):
    return variant.replace(":", "")


def run_seed(seed, out_dir, cfg, log=print):
    os.makedirs(out_dir, exist_ok=True)
    data_dir = os.path.join(out_dir, "data")
    manifest_path = synth_dataset(seed, data_dir, cfg.synth)
    manifest = read_manifest(manifest_path)
    log(f"[seed {seed}] dataset at {manifest_path}")

    teacher_params, logits, info = teacher_train(manifest, seed)
    write_teacher_logits(os.path.join(out_dir, "teacher_logits.tsv"), logits)
    save_teacher(teacher_params, info, os.path.join(out_dir, "teacher.qdck"))
    log(f"[seed {seed}] teacher best val EER {info['best_val_eer']:.4f}")

    base = replace(cfg.train, seed=seed)
    runs = {
        "vanilla": (base, None),
        "kd": (replace(base, distill=cfg.distill), logits),
    }
    for b in cfg.qat_bits:
        runs[f"qat:{b}"] = (replace(base, distill=cfg.distill, quant=QuantMode("qat", b)), logits)

    exported = {}
    for name, (tcfg, teacher) in runs.items():
        ck = train(tcfg, manifest, teacher)
        exported[name] = export(ck)
        log(f"[seed {seed}] {name}: best epoch {ck.meta['log']['best_epoch']}, val EER {ck.meta['log']['best_val_eer']:.4f}")
    for b in cfg.pm_bits:
        exported[f"pm:{b}"] = quantize_pm(exported["kd"], b)

    results = {}
    for name in variant_names(cfg):
        ck = exported[name]
        stem = os.path.join(out_dir, _fname(name))
        size = ckpt_io.save(ck, stem + ".qdck")
        report, probs, Y = evaluate_checkpoint(ck, manifest, "test")
        with open(stem + ".report.txt", "w", encoding="utf-8") as fh:
            fh.write(format_report(report))
        write_curves_csv(stem + ".curves.csv", probs, Y)
        results[name] = {"avg_eer": report.avg_eer, "avg_auc": report.avg_auc, "eer": report.eer,
                         "auc": report.auc, "checkpoint_bytes": size}
    # reference score of the teacher on the same split
    _, Xte, Yte = manifest.load_split("test")
    results["teacher"] = {"avg_eer": average_eer(sigmoid(teacher_forward(teacher_params, pool(Xte))), Yte)}
    with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=1, sort_keys=True)
    return results


def summarise(per_seed, cfg):
    """Mean test average-EER per variant and the four directional checks."""
    names = [*variant_names(cfg), "teacher"]
    mean = {n: float(np.mean([per_seed[s][n]["avg_eer"] for s in per_seed])) for n in names}
    checks = {}
    if "vanilla" in mean and "kd" in mean:
        checks["distillation_helps"] = mean["kd"] < mean["vanilla"]
    if "qat:4" in mean and "pm:4" in mean:
        checks["qat4_beats_pm4"] = mean["qat:4"] < mean["pm:4"]
    if "qat:8" in mean:
        checks["qat8_within_2pts"] = 100 * (mean["qat:8"] - mean["kd"]) <= 2.0
    if "qat:16" in mean:
        checks["qat16_within_1pt"] = 100 * (mean["qat:16"] - mean["kd"]) <= 1.0
    return mean, checks


def format_trend(mean, checks, seeds):
    lines = [f"mean test average EER (%) over seeds {list(seeds)}"]
    width = max(len(n) for n in mean)
    for name, v in mean.items():
        lines.append(f"  {name.ljust(width)}  {100 * v:6.2f}")
    lines.append("checks")
    for name, ok in checks.items():
        lines.append(f"  {name}: {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"


def run_pipeline(out_dir, cfg=None, log=print):
    cfg = cfg or PipelineConfig()
    per_seed = {}
    for seed in cfg.seeds:
        per_seed[seed] = run_seed(seed, os.path.join(out_dir, f"seed{seed}"), cfg, log)
    mean, checks = summarise(per_seed, cfg)
    text = format_trend(mean, checks, cfg.seeds)
    with open(os.path.join(out_dir, "trend.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(out_dir, "trend.json"), "w", encoding="utf-8") as fh:
        json.dump({"mean_avg_eer": mean, "checks": checks}, fh, indent=1, sort_keys=True)
    log(text)
    return per_seed, mean, checks
