"""Multi-label losses, temperature-softened teacher targets, and the teacher.

For one example with student probabilities ``p``, targets ``y'`` and positive
weights ``w``::

    l(p, y') = -sum_c [ w_c y'_c log p_c + (1 - y'_c) log(1 - p_c) ]

The distillation loss mixes a soft term against ``sigmoid(teacher_logits / T)``
(scaled by ``T**2``) with the hard-label term::

    alpha_kd * T**2 * l(p, y_t) + (1 - alpha_kd) * l(p, y)

Only teacher logits are divided by ``T``; the student uses temperature 1.
Batch losses are means over examples.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt_io
from .errors import ArgumentError, ConfigError, DataError, ShapeError
from .tensor import DTYPE, SeededRng, sigmoid

PROB_EPS = 1e-7


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    alpha_kd: float = 0.5
    # None: N_neg / N_pos per class, measured on the training split
    class_weights: tuple = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.alpha_kd <= 1.0:
            raise ConfigError(f"alpha_kd must lie in [0, 1], got {self.alpha_kd}")
        if self.class_weights is not None and any(not w > 0 for w in self.class_weights):
            raise ConfigError(f"class weights must be positive, got {self.class_weights}")


def class_weights(Y):
    """``N_neg(c) / N_pos(c)`` per class over a multi-hot label matrix."""
    Y = np.asarray(Y)
    pos = Y.sum(axis=0)
    neg = Y.shape[0] - pos
    if np.any(pos == 0):
        raise DataError(f"class(es) {np.flatnonzero(pos == 0).tolist()} have no positive training examples")
    return tuple(float(v) for v in neg / pos)


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)


def _check(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"length mismatch: {sorted(shapes)}")


def _per_example(p, target, w):
    p = _clamp(p)
    t = np.asarray(target, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    return -np.sum(w * t * np.log(p) + (1.0 - t) * np.log1p(-p), axis=-1)


def weighted_bce(probs, y, w):
    """Weighted multi-label cross-entropy; a scalar, averaged over a leading batch axis."""
    _check(probs, y)
    if np.shape(w)[-1] != np.shape(probs)[-1]:
        raise ShapeError("class weight length differs from number of classes")
    return float(np.mean(_per_example(probs, y, w)))


def soft_targets(teacher_logits, temperature):
    if not temperature > 0:
        raise ArgumentError("temperature must be positive")
    return sigmoid(np.asarray(teacher_logits, dtype=np.float64) / temperature)


def distill_loss(student_probs, y, y_t, cfg):
    _check(student_probs, y, y_t)
    T2 = cfg.temperature**2
    w = cfg.class_weights
    soft = _per_example(student_probs, y_t, w)
    hard = _per_example(student_probs, y, w)
    return float(np.mean(cfg.alpha_kd * T2 * soft + (1.0 - cfg.alpha_kd) * hard))


def _dlogits(p, target, w):
    """d l / d z for ``p = sigmoid(z)``; zero where the clamp is active."""
    raw = np.asarray(p, dtype=np.float64)
    pc = _clamp(raw)
    t = np.asarray(target, dtype=np.float64)
    g = (1.0 - t) * pc - np.asarray(w, dtype=np.float64) * t * (1.0 - pc)
    return np.where(pc == raw, g, 0.0)


def loss_and_grad(logits, y, w, y_t=None, cfg=None):
    """Batch loss and its gradient w.r.t. the student logits, shape ``(B, C)``.

    Without ``cfg`` this is the plain weighted cross-entropy.
    """
    logits = np.asarray(logits, dtype=np.float64)
    p = sigmoid(logits)
    B = logits.shape[0]
    if cfg is None or y_t is None:
        return weighted_bce(p, y, w), _dlogits(p, y, w) / B
    T2 = cfg.temperature**2
    w = cfg.class_weights
    loss = distill_loss(p, y, y_t, cfg)
    grad = cfg.alpha_kd * T2 * _dlogits(p, y_t, w) + (1.0 - cfg.alpha_kd) * _dlogits(p, y, w)
    return loss, grad / B


# --------------------------------------------------------------------------
# teacher logits files


class TeacherLogits(dict):
    """Mapping clip-id -> float32 logit vector."""

    @property
    def classes(self):
        return len(next(iter(self.values()))) if self else 0

    def matrix(self, clip_ids):
        missing = [c for c in clip_ids if c not in self]
        if missing:
            raise DataError(f"teacher logits missing for clip-id {missing[0]!r} ({len(missing)} missing)")
        return np.stack([self[c] for c in clip_ids]).astype(DTYPE)


def format_logits(logits):
    lines = []
    for clip_id in sorted(logits):
        vals = ",".join(str(np.float32(v)) for v in logits[clip_id])
        lines.append(f"{clip_id}\t{vals}\n")
    return "".join(lines)


def write_teacher_logits(path, logits):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_logits(logits))


def load_teacher_logits(path, clip_ids=None, classes=None):
    out = TeacherLogits()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                clip_id, vals = line.split("\t")
                vec = np.array([float(v) for v in vals.split(",")], dtype=DTYPE)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed teacher-logit record") from exc
            if classes is not None and vec.shape[0] != classes:
                raise ConfigError(f"{path}:{lineno}: {vec.shape[0]} logits for {clip_id!r}, config expects {classes}")
            if out and vec.shape[0] != out.classes:
                raise DataError(f"{path}:{lineno}: inconsistent number of logits")
            out[clip_id] = vec
    if clip_ids is not None:
        for c in clip_ids:
            if c not in out:
                raise DataError(f"teacher logits missing for clip-id {c!r}")
    return out


# --------------------------------------------------------------------------
# built-in pooled-feature teacher


@dataclass(frozen=True)
class TeacherConfig:
    hidden: tuple = (128, 128)
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 30


def teacher_init(input_dim, classes, cfg, seed):
    rng = SeededRng(seed, stream=21)
    sizes = (input_dim, *cfg.hidden, classes)
    params = {}
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{k}"] = rng.uniform(-bound, bound, (fan_out, fan_in))
        params[f"b{k}"] = np.zeros(fan_out, dtype=DTYPE)
    return params


def _n_layers(params):
    return sum(1 for k in params if k.startswith("W"))


def pool(X):
    """Mean over time of ``(N, T, D)`` features."""
    return np.asarray(X, dtype=np.float64).mean(axis=1).astype(DTYPE)


def teacher_forward(params, feats, keep=False):
    acts = [feats]
    a = feats
    L = _n_layers(params)
    for k in range(L):
        z = a @ params[f"W{k}"].T + params[f"b{k}"]
        a = np.tanh(z) if k < L - 1 else z
        acts.append(a)
    return (a, acts) if keep else a


def teacher_backward(params, acts, dlogits):
    grads = {}
    L = _n_layers(params)
    d = dlogits.astype(acts[0].dtype)
    for k in range(L - 1, -1, -1):
        grads[f"W{k}"] = d.T @ acts[k]
        grads[f"b{k}"] = d.sum(axis=0)
        if k:
            d = (d @ params[f"W{k}"]) * (1.0 - acts[k] ** 2)
    return grads


def teacher_train(manifest, seed, cfg=None):
    """Train the pooled-feature teacher with the weighted cross-entropy.

    Returns ``(params, TeacherLogits for every clip, training log)``.
    """
    from .metrics import average_eer
    from .optim import Adam

    cfg = cfg or TeacherConfig()
    if not manifest.records:
        raise ArgumentError("empty manifest")
    train_ids, Xtr, Ytr = manifest.load_split("train")
    _, Xva, Yva = manifest.load_split("val")
    Ptr, Pva = pool(Xtr), pool(Xva)
    w = class_weights(Ytr)
    params = teacher_init(Ptr.shape[1], Ytr.shape[1], cfg, seed)
    opt = Adam(params, lr=cfg.lr)
    best = (np.inf, None, -1)
    log = []
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = SeededRng(seed, stream=50_000 + epoch).permutation(len(train_ids))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits, acts = teacher_forward(params, Ptr[idx], keep=True)
            _, dlog = loss_and_grad(logits, Ytr[idx], w)
            opt.step(teacher_backward(params, acts, dlog))
        val_eer = average_eer(sigmoid(teacher_forward(params, Pva)), Yva)
        log.append(val_eer)
        if val_eer < best[0]:
            best = (val_eer, {k: v.copy() for k, v in params.items()}, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    params = best[1]
    logits = teacher_logits_for(params, manifest)
    return params, logits, {"best_epoch": best[2], "best_val_eer": best[0], "epochs": len(log)}


def teacher_logits_for(params, manifest):
    out = TeacherLogits()
    for split in ("train", "val", "test"):
        if not manifest.split(split):
            continue
        ids, X, _ = manifest.load_split(split)
        for clip_id, vec in zip(ids, teacher_forward(params, pool(X))):
            out[clip_id] = vec.astype(DTYPE)
    return out


def teacher_checkpoint(params, info):
    meta = {"kind": "teacher", "architecture": "mean-pool-mlp", "layers": _n_layers(params), "train": info}
    return ckpt_io.Checkpoint(meta, {k: np.asarray(v, dtype=DTYPE) for k, v in params.items()})


def save_teacher(params, info, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return ckpt_io.save(teacher_checkpoint(params, info), path)
