"""Single-layer LSTM student with a last-timestep classifier head.

The forward pass is written once and parameterised by a quantizer object:
:class:`~qdaed.quantization.PassthroughQuantizer` gives the full-precision
model, :class:`~qdaed.quantization.Quantizer` the quantized one where

* a linear map ``W x + b`` becomes ``Q(W) Q(x) + b`` (bias untouched),
* an elementwise product quantizes both operands,
* sigmoid / tanh outputs are quantized on fixed ``[0, 1]`` / ``[-1, 1]`` ranges,
* the cell state is quantized with 16 bits whatever the student bit-width.

Backward passes treat every quantization node as the identity (straight-through).
Gates are stored per gate as ``W_g`` of shape ``H x (H + D)`` acting on ``[h, x]``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ShapeError, StateError
from .quantization import PassthroughQuantizer, Quantizer
from .tensor import DTYPE, SeededRng, sigmoid, tanh

GATES = ("f", "i", "c", "o")
# internal column order of the stacked gate matrix: sigmoid gates first
_STACK = ("f", "i", "o", "c")
FP = PassthroughQuantizer()


@dataclass
class LstmParams:
    W_f: np.ndarray
    W_i: np.ndarray
    W_c: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        H = self.b_f.shape[0]
        for g in GATES:
            w = getattr(self, f"W_{g}")
            b = getattr(self, f"b_{g}")
            if w.ndim != 2 or w.shape[0] != H or w.shape[1] <= H or b.shape != (H,):
                raise ShapeError(f"inconsistent shapes for gate {g}: W {w.shape}, b {b.shape}")

    @property
    def hidden(self):
        return self.b_f.shape[0]

    @property
    def input_dim(self):
        return self.W_f.shape[1] - self.hidden


@dataclass
class ClassifierHead:
    W: np.ndarray  # C x H
    b: np.ndarray  # C

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"head shapes disagree: W {self.W.shape}, b {self.b.shape}")

    @property
    def classes(self):
        return self.W.shape[0]


@dataclass
class LstmState:
    h: np.ndarray
    C: np.ndarray


@dataclass
class Student:
    lstm: LstmParams
    head: ClassifierHead
    # frozen weight ranges of an exported quantized model, keyed by tensor name
    static_ranges: dict = field(default_factory=dict)

    @property
    def hidden(self):
        return self.lstm.hidden

    @property
    def input_dim(self):
        return self.lstm.input_dim

    @property
    def classes(self):
        return self.head.classes

    def tensors(self):
        """Name -> array, sharing memory with the model (in-place updates stick)."""
        out = {}
        for g in GATES:
            out[f"W_{g}"] = getattr(self.lstm, f"W_{g}")
        for g in GATES:
            out[f"b_{g}"] = getattr(self.lstm, f"b_{g}")
        out["W_head"] = self.head.W
        out["b_head"] = self.head.b
        return out

    @classmethod
    def from_tensors(cls, tensors, static_ranges=None):
        lstm = LstmParams(**{k: tensors[k] for k in (*(f"W_{g}" for g in GATES), *(f"b_{g}" for g in GATES))})
        head = ClassifierHead(tensors["W_head"], tensors["b_head"])
        return cls(lstm, head, dict(static_ranges or {}))

    def copy(self):
        return Student.from_tensors({k: v.copy() for k, v in self.tensors().items()}, self.static_ranges)

    def astype(self, dtype):
        return Student.from_tensors({k: v.astype(dtype) for k, v in self.tensors().items()}, self.static_ranges)


def init_student(hidden, input_dim, classes, seed, forget_bias=1.0):
    rng = SeededRng(seed, stream=11)
    bound = 1.0 / np.sqrt(hidden + input_dim)
    tensors = {}
    for g in GATES:
        tensors[f"W_{g}"] = rng.uniform(-bound, bound, (hidden, hidden + input_dim))
    for g in GATES:
        tensors[f"b_{g}"] = np.zeros(hidden, dtype=DTYPE)
    tensors["b_f"][:] = forget_bias
    hb = 1.0 / np.sqrt(hidden)
    tensors["W_head"] = rng.uniform(-hb, hb, (classes, hidden))
    tensors["b_head"] = np.zeros(classes, dtype=DTYPE)
    return Student.from_tensors(tensors)


def make_quantizer(bits, cell_bits=16):
    """``None`` bits means full precision."""
    if bits is None:
        return FP
    return Quantizer(bits, cell_bits=cell_bits)


# --------------------------------------------------------------------------
# forward


def _stacked(p, ranges, q):
    H = p.hidden
    Wq = {g: q.weight(getattr(p, f"W_{g}"), ranges.get(f"W_{g}")) for g in GATES}
    W = np.concatenate([Wq[g] for g in _STACK], axis=0)
    b = np.concatenate([getattr(p, f"b_{g}") for g in _STACK])
    return W[:, :H], W[:, H:], b


def _cell(z, Cq_prev, q, H):
    """Elementwise half of one LSTM step given gate pre-activations ``z``."""
    s_raw = sigmoid(z[:, : 3 * H])
    g_raw = tanh(z[:, 3 * H :])
    sq = q.sigmoid_out(s_raw)
    gq = q.tanh_out(g_raw)
    f = sq[:, :H]
    i = sq[:, H : 2 * H]
    o = sq[:, 2 * H :]
    C = f * Cq_prev + i * gq
    Cq = q.cell(C)
    tc_raw = tanh(Cq)
    tcq = q.tanh_out(tc_raw)
    h = o * tcq
    return h, Cq, (s_raw, sq, g_raw, gq, tc_raw, tcq)


def _as_batch(v):
    v = np.asarray(v)
    return (v[None, :], True) if v.ndim == 1 else (v, False)


def lstm_step(student_or_params, x_t, state, quantizer=FP):
    """One step on a vector ``x_t`` (or a batch of rows)."""
    params = getattr(student_or_params, "lstm", student_or_params)
    ranges = getattr(student_or_params, "static_ranges", {})
    H, D = params.hidden, params.input_dim
    x, single = _as_batch(x_t)
    h, _ = _as_batch(state.h)
    C, _ = _as_batch(state.C)
    if x.shape[1] != D or h.shape[1] != H or C.shape != h.shape or x.shape[0] != h.shape[0]:
        raise ShapeError(f"step shapes disagree: x {x.shape}, h {h.shape}, C {C.shape} for H={H}, D={D}")
    Wh, Wx, b = _stacked(params, ranges, quantizer)
    z = quantizer.rows(x) @ Wx.T + b + quantizer.rows(h) @ Wh.T
    h_new, C_new, _ = _cell(z, C, quantizer, H)
    if single:
        return LstmState(h_new[0], C_new[0])
    return LstmState(h_new, C_new)


def lstm_step_fp(params, x_t, state):
    return lstm_step(params, x_t, state, FP)


def lstm_step_quant(params, x_t, state, spec, cell_bits=16):
    bits = getattr(spec, "bits", spec)
    if bits not in (4, 8, 16):
        raise ArgumentError(f"quantized LSTM supports 4, 8 or 16 bits, got {bits}")
    return lstm_step(params, x_t, state, Quantizer(bits, cell_bits=cell_bits))


@dataclass
class ForwardCache:
    """Per-step activations of a batch, stored time-major ``(T, B, ...)``."""

    quantizer: object
    Wh: np.ndarray
    Wx: np.ndarray
    Wq_head: np.ndarray
    Xq: np.ndarray
    hq: np.ndarray
    Cq_prev: np.ndarray
    s_raw: np.ndarray
    sq: np.ndarray
    g_raw: np.ndarray
    gq: np.ndarray
    tc_raw: np.ndarray
    tcq: np.ndarray
    hq_last: np.ndarray


def forward_batch(student, X, quantizer=FP, keep_cache=False):
    """Logits for a batch ``X`` of shape ``(B, T, D)``; optionally the BPTT cache."""
    X = np.asarray(X)
    if X.ndim != 3:
        raise ShapeError(f"expected (batch, time, features), got {X.shape}")
    B, T, D = X.shape
    if T < 1:
        raise ArgumentError("sequences must have at least one frame")
    H = student.hidden
    if D != student.input_dim:
        raise ShapeError(f"feature size {D} does not match model input {student.input_dim}")
    q = quantizer
    dtype = student.lstm.W_f.dtype
    Xt = np.ascontiguousarray(X.transpose(1, 0, 2), dtype=dtype)

    Wh, Wx, b = _stacked(student.lstm, student.static_ranges, q)
    Xq = q.rows(Xt.reshape(T * B, D)).reshape(T, B, D)
    XW = (Xq.reshape(T * B, D) @ Wx.T + b).reshape(T, B, 4 * H)

    h = np.zeros((B, H), dtype=dtype)
    C = np.zeros((B, H), dtype=dtype)
    if keep_cache:
        hq_all = np.empty((T, B, H), dtype)
        Cp_all = np.empty((T, B, H), dtype)
        s_raw_all = np.empty((T, B, 3 * H), dtype)
        sq_all = np.empty((T, B, 3 * H), dtype)
        g_raw_all = np.empty((T, B, H), dtype)
        gq_all = np.empty((T, B, H), dtype)
        tc_raw_all = np.empty((T, B, H), dtype)
        tcq_all = np.empty((T, B, H), dtype)
    for t in range(T):
        hq = q.rows(h)
        z = XW[t] + hq @ Wh.T
        C_prev = C
        h, C, acts = _cell(z, C_prev, q, H)
        if keep_cache:
            hq_all[t] = hq
            Cp_all[t] = C_prev
            s_raw_all[t], sq_all[t], g_raw_all[t], gq_all[t], tc_raw_all[t], tcq_all[t] = acts

    head = student.head
    Wq_head = q.weight(head.W, student.static_ranges.get("W_head"))
    hq_last = q.rows(h)
    logits = hq_last @ Wq_head.T + head.b
    if not keep_cache:
        return logits, None
    cache = ForwardCache(
        q, Wh, Wx, Wq_head, Xq, hq_all, Cp_all, s_raw_all, sq_all, g_raw_all, gq_all, tc_raw_all, tcq_all, hq_last
    )
    return logits, cache


def forward_sequence(student, X, quantizer=FP, keep_cache=False):
    """Logits of one ``(T, D)`` sequence; initial state is zero."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ShapeError(f"expected (time, features), got {X.shape}")
    if X.shape[0] < 1:
        raise ArgumentError("empty sequence")
    logits, cache = forward_batch(student, X[None], quantizer, keep_cache)
    return logits[0], cache


def predict_proba(student, X, quantizer=FP, batch_size=256):
    """Per-class sigmoid scores for a ``(N, T, D)`` array, in fixed-size chunks."""
    out = []
    for start in range(0, X.shape[0], batch_size):
        logits, _ = forward_batch(student, X[start : start + batch_size], quantizer)
        out.append(sigmoid(logits))
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------------------
# backward


def backward_batch(cache, dlogits):
    """BPTT gradients for every tensor in :meth:`Student.tensors`.

    ``dlogits`` is the loss gradient w.r.t. the logits, shape ``(B, C)``.
    """
    if cache is None:
        raise StateError("backward needs a cache from forward_batch(..., keep_cache=True)")
    dlogits = np.asarray(dlogits, dtype=cache.Wh.dtype)
    T, B, H = cache.hq.shape
    grads = {}
    grads["W_head"] = dlogits.T @ cache.hq_last
    grads["b_head"] = dlogits.sum(axis=0)
    dh = dlogits @ cache.Wq_head
    dC_next = np.zeros_like(dh)
    dZ_all = np.empty((T, B, 4 * H), dtype=dh.dtype)
    gWh = np.zeros((4 * H, H), dtype=dh.dtype)
    Wh = cache.Wh
    for t in range(T - 1, -1, -1):
        sq = cache.sq[t]
        s_raw = cache.s_raw[t]
        tc_raw = cache.tc_raw[t]
        g_raw = cache.g_raw[t]
        dC = dh * sq[:, 2 * H :] * (1.0 - tc_raw * tc_raw) + dC_next
        dZ = dZ_all[t]
        dZ[:, :H] = dC * cache.Cq_prev[t]
        dZ[:, H : 2 * H] = dC * cache.gq[t]
        dZ[:, 2 * H : 3 * H] = dh * cache.tcq[t]
        dZ[:, : 3 * H] *= s_raw * (1.0 - s_raw)
        dZ[:, 3 * H :] = dC * sq[:, H : 2 * H] * (1.0 - g_raw * g_raw)
        dC_next = dC * sq[:, :H]
        gWh += dZ.T @ cache.hq[t]
        dh = dZ @ Wh
    D = cache.Xq.shape[2]
    flatZ = dZ_all.reshape(T * B, 4 * H)
    gWx = flatZ.T @ cache.Xq.reshape(T * B, D)
    gb = flatZ.sum(axis=0)
    for k, g in enumerate(_STACK):
        rows = slice(k * H, (k + 1) * H)
        grads[f"W_{g}"] = np.concatenate([gWh[rows], gWx[rows]], axis=1)
        grads[f"b_{g}"] = gb[rows].copy()
    return grads


def backward_sequence(cache, loss_grad_on_logits):
    return backward_batch(cache, np.asarray(loss_grad_on_logits)[None, :])
