"""Student training (plain, distilled, quantization-aware), post-training
quantization, export and checkpoint conversion.

In ``qat`` mode the optimizer holds full-precision shadow weights; every
forward pass fake-quantizes them (range recomputed from the current values)
and the backward pass is straight-through. Export packs the codes under the
final weight ranges, so an exported model reproduces the quantized forward
pass of training exactly. ``pm`` trains in full precision and quantizes only
at export.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt_io
from .accounting import account_student
from .distill import DistillConfig, class_weights, loss_and_grad, soft_targets
from .errors import ArgumentError, ConfigError, TrainingError
from .lstm import FP, Student, backward_batch, forward_batch, init_student, predict_proba
from .metrics import average_eer, score_report
from .optim import Adam, clip_by_global_norm
from .quantization import CELL_STATE_BITS, PackedIntTensor, PassthroughQuantizer, Quantizer, pack_tensor, unpack
from .tensor import SeededRng

SUPPORTED_BITS = (4, 8, 16)
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class QuantMode:
    kind: str = "none"  # none | qat | pm
    bits: int = None

    def __post_init__(self):
        if self.kind not in ("none", "qat", "pm"):
            raise ConfigError(f"unknown quantization mode {self.kind!r}")
        if self.kind == "none":
            if self.bits is not None:
                raise ConfigError("mode 'none' takes no bit-width")
        elif self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"unsupported bit-width {self.bits!r}; choose one of {SUPPORTED_BITS}")

    @classmethod
    def parse(cls, text):
        text = str(text).strip().lower()
        if text in ("none", "fp", ""):
            return cls()
        kind, _, bits = text.partition(":")
        try:
            n = int(bits)
        except ValueError as exc:
            raise ConfigError(f"cannot parse quantization mode {text!r} (expected none, qat:N or pm:N)") from exc
        return cls(kind, n)

    def __str__(self):
        return self.kind if self.kind == "none" else f"{self.kind}:{self.bits}"


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 256
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    quant: QuantMode = field(default_factory=QuantMode)
    distill: DistillConfig = None
    clip_norm: float = 5.0
    cell_bits: int = CELL_STATE_BITS
    forget_bias: float = 1.0
    # run the qat code path with every quantizer replaced by the identity
    qat_passthrough: bool = False

    def __post_init__(self):
        if self.hidden < 1 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("hidden, batch_size, max_epochs and patience must be positive")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")

    def to_meta(self):
        d = asdict(self)
        d["quant"] = str(self.quant)
        if self.distill is not None:
            d["distill"] = {
                "temperature": self.distill.temperature,
                "alpha_kd": self.distill.alpha_kd,
                "class_weights": None if self.distill.class_weights is None else list(self.distill.class_weights),
            }
        return d


def training_quantizer(cfg):
    if cfg.quant.kind != "qat":
        return FP
    if cfg.qat_passthrough:
        return PassthroughQuantizer()
    return Quantizer(cfg.quant.bits, cell_bits=cfg.cell_bits)


def _snapshot(student, opt):
    return (
        {k: v.copy() for k, v in student.tensors().items()},
        opt.t,
        {k: v.copy() for k, v in opt.m.items()},
        {k: v.copy() for k, v in opt.v.items()},
    )


def train(cfg, manifest, teacher=None, progress=None):
    """Train a student; returns the best-validation training :class:`Checkpoint`."""
    if (cfg.distill is None) != (teacher is None):
        raise ConfigError("teacher logits are required exactly when distillation is configured")
    train_ids, Xtr, Ytr = manifest.load_split("train")
    _, Xva, Yva = manifest.load_split("val")
    C = Ytr.shape[1]
    w = class_weights(Ytr)
    dcfg = None
    Yt = None
    if cfg.distill is not None:
        dcfg = cfg.distill
        if dcfg.class_weights is None:
            dcfg = replace(dcfg, class_weights=w)
        elif len(dcfg.class_weights) != C:
            raise ConfigError(f"{len(dcfg.class_weights)} class weights for {C} classes")
        Yt = soft_targets(teacher.matrix(train_ids), dcfg.temperature)
        w = dcfg.class_weights

    student = init_student(cfg.hidden, Xtr.shape[2], C, cfg.seed, cfg.forget_bias)
    q = training_quantizer(cfg)
    params = student.tensors()
    opt = Adam(params, lr=cfg.lr)

    history = []
    best_eer = math.inf
    best = None
    best_epoch = -1
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = SeededRng(cfg.seed, stream=100_000 + epoch).permutation(Xtr.shape[0])
        losses = []
        for step, start in enumerate(range(0, order.shape[0], cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            logits, cache = forward_batch(student, Xtr[idx], q, keep_cache=True)
            yt = None if Yt is None else Yt[idx]
            loss, dlogits = loss_and_grad(logits, Ytr[idx], w, yt, dcfg)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}", epoch, step)
            grads = backward_batch(cache, dlogits)
            grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
            if not math.isfinite(norm):
                raise TrainingError(f"non-finite gradient at epoch {epoch}, step {step}", epoch, step)
            opt.step(grads)
            losses.append(loss)
        val_eer = average_eer(predict_proba(student, Xva, q), Yva)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_eer": val_eer})
        if progress is not None:
            progress(history[-1])
        if val_eer < best_eer:
            best_eer, best, best_epoch, stale = val_eer, _snapshot(student, opt), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    tensors, t, m, v = best
    meta = _student_meta(student, cfg.quant, cfg.cell_bits, exported=False)
    meta["train"] = cfg.to_meta()
    meta["train"]["class_weights"] = list(w)
    meta["log"] = {
        "best_epoch": best_epoch,
        "best_val_eer": best_eer,
        "epochs_run": len(history),
        "val_eer": [h["val_eer"] for h in history],
        "loss": [h["loss"] for h in history],
    }
    meta["optimizer"] = {"name": "adam", "t": t, "lr": cfg.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
    out = dict(tensors)
    for k in tensors:
        out[f"adam.m.{k}"] = m[k]
        out[f"adam.v.{k}"] = v[k]
    return ckpt_io.Checkpoint(meta, out)


def _student_meta(student, quant, cell_bits, exported):
    return {
        "kind": "student",
        "format": CHECKPOINT_FORMAT,
        "model": {"hidden": student.hidden, "input_dim": student.input_dim, "classes": student.classes, "layers": 1},
        "quant": {"mode": quant.kind, "bits": quant.bits, "cell_bits": cell_bits, "exported": exported},
    }


def quant_mode_of(ckpt):
    q = ckpt.meta["quant"]
    return QuantMode(q["mode"], q["bits"])


def is_quantized(ckpt):
    return any(isinstance(t, PackedIntTensor) for t in ckpt.tensors.values())


def _model_tensor_names(ckpt):
    return [k for k in ckpt.tensors if not k.startswith("adam.")]


def student_from_checkpoint(ckpt):
    """Rebuild the :class:`Student`; packed weights are dequantized onto their lattice."""
    if ckpt.kind != "student":
        raise ArgumentError(f"checkpoint holds a {ckpt.kind!r}, not a student")
    tensors = {}
    ranges = {}
    for name in _model_tensor_names(ckpt):
        t = ckpt.tensors[name]
        if isinstance(t, PackedIntTensor):
            tensors[name] = unpack(t)
            ranges[name] = t.qrange
        else:
            tensors[name] = np.array(t, dtype=np.float32)
    return Student.from_tensors(tensors, ranges)


def inference_quantizer(ckpt, mode=None):
    """Quantizer for evaluating ``ckpt``; ``mode`` overrides what the checkpoint declares."""
    q = ckpt.meta["quant"]
    cell_bits = q.get("cell_bits", CELL_STATE_BITS)
    if mode is None or str(mode) == "auto":
        if is_quantized(ckpt) or q["mode"] == "qat":
            return Quantizer(q["bits"], cell_bits=cell_bits)
        return FP
    mode = mode if isinstance(mode, QuantMode) else QuantMode.parse(mode)
    if mode.kind == "none":
        if is_quantized(ckpt):
            raise ArgumentError("a quantized checkpoint cannot be evaluated in full precision")
        return FP
    return Quantizer(mode.bits, cell_bits=cell_bits)


def _pack_student(ckpt, bits, mode_kind):
    student = student_from_checkpoint(ckpt)
    tensors = {}
    for name, arr in student.tensors().items():
        tensors[name] = pack_tensor(arr, bits) if name.startswith("W_") else arr.copy()
    meta = _student_meta(student, QuantMode(mode_kind, bits), ckpt.meta["quant"].get("cell_bits", 16), exported=True)
    for key in ("train", "log", "cmvn"):
        if key in ckpt.meta:
            meta[key] = ckpt.meta[key]
    return ckpt_io.Checkpoint(meta, tensors)


def quantize_pm(ckpt, bits):
    """Post-training quantization of a full-precision checkpoint (no retraining)."""
    if is_quantized(ckpt) or ckpt.meta["quant"]["mode"] == "qat":
        raise ArgumentError("post-training quantization needs a full-precision checkpoint")
    if bits not in SUPPORTED_BITS:
        raise ArgumentError(f"unsupported bit-width {bits}")
    return _pack_student(ckpt, bits, "pm")


def export(ckpt, pm_bits=None):
    """Inference checkpoint: optimizer state dropped, weights packed for quantized modes."""
    mode = quant_mode_of(ckpt)
    if is_quantized(ckpt):
        return ckpt
    if mode.kind == "qat":
        return _pack_student(ckpt, mode.bits, "qat")
    if mode.kind == "pm" or pm_bits is not None:
        return quantize_pm(ckpt, pm_bits if pm_bits is not None else mode.bits)
    return _strip(ckpt, mode)


def _strip(ckpt, mode):
    meta = dict(ckpt.meta)
    meta.pop("optimizer", None)
    meta["quant"] = dict(meta["quant"], mode=mode.kind, bits=mode.bits, exported=True)
    return ckpt_io.Checkpoint(meta, {k: ckpt.tensors[k] for k in _model_tensor_names(ckpt)})


def evaluate_checkpoint(ckpt, manifest, split="test", mode=None, seq_len=None):
    """Score a student checkpoint on one manifest split; returns ``(EvalReport, probs, labels)``."""
    student = student_from_checkpoint(ckpt)
    q = inference_quantizer(ckpt, mode)
    _, X, Y = manifest.load_split(split)
    probs = predict_proba(student, X, q)
    bits = q.spec.bits if isinstance(q, Quantizer) else None
    mm = account_student(student, seq_len or X.shape[1], bits)
    if bits is None:
        mode_name = "fp"
    elif mode is not None and str(mode) != "auto":
        mode_name = str(mode if isinstance(mode, QuantMode) else QuantMode.parse(mode))
    else:
        mode_name = f"{ckpt.meta['quant']['mode']}:{bits}"
    report = score_report(probs, Y, mode_name, split, model_metrics=asdict(mm))
    return report, probs, Y
