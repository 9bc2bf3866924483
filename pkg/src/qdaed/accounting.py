"""Parameter, storage and FLOPs accounting for the LSTM student.

Conventions:

* one multiply-accumulate counts as one FLOP;
* each step adds ``13 H`` elementwise FLOPs: 4H bias adds, 3H sigmoids,
  2H tanh, 3H products and H cell-state additions;
* quantization overhead counts 3 ops (scale, round, recover) per
  dynamically quantized value plus 2 ops (min and max search) per value.
  Values quantized dynamically are the matmul inputs ``x_t`` and ``h_{t-1}``
  and the cell state ``C_t`` each step, plus the head input once. Fixed-bound
  activation quantization and the stored weights are not counted.
"""

from dataclasses import dataclass

MB = 1 << 20
GIGA = 1e9
OPS_PER_QUANTIZED_VALUE = 3
OPS_PER_RANGE_VALUE = 2
ELEMENTWISE_PER_HIDDEN_UNIT = 13


@dataclass(frozen=True)
class ModelMetrics:
    param_count: int
    param_bytes: int
    flops: int
    quant_overhead_flops: int
    weight_bits: int = 32

    @property
    def params_millions(self):
        return self.param_count / 1e6

    @property
    def size_mb(self):
        return self.param_bytes / MB

    @property
    def gflops(self):
        return self.flops / GIGA

    @property
    def quant_overhead_gflops(self):
        return self.quant_overhead_flops / GIGA


def count_params(hidden, input_dim, classes):
    lstm = 4 * (hidden * (hidden + input_dim) + hidden)
    head = classes * hidden + classes
    return lstm + head


def account(hidden, input_dim, classes, seq_len, bits=None):
    """Metrics for a 1-layer student; ``bits=None`` means full precision.

    Quantized storage keeps weights at ``bits`` bits (rounded up to whole
    bytes per tensor) and biases at 32 bits.
    """
    H, D, C = int(hidden), int(input_dim), int(classes)
    n_params = count_params(H, D, C)
    if bits is None:
        n_bytes = 4 * n_params
    else:
        weight_tensors = [H * (H + D)] * 4 + [C * H]
        n_biases = 4 * H + C
        n_bytes = sum((n * bits + 7) // 8 for n in weight_tensors) + 4 * n_biases

    per_step = 4 * H * (H + D) + ELEMENTWISE_PER_HIDDEN_UNIT * H
    flops = int(seq_len) * per_step + C * H + C

    overhead = 0
    if bits is not None:
        per_value = OPS_PER_QUANTIZED_VALUE + OPS_PER_RANGE_VALUE
        dynamic_values = int(seq_len) * (D + H + H) + H
        overhead = dynamic_values * per_value
    return ModelMetrics(n_params, n_bytes, flops, overhead, 32 if bits is None else int(bits))


def account_student(student, seq_len, bits=None):
    return account(student.hidden, student.input_dim, student.classes, seq_len, bits)


def format_table(columns):
    """Plain-text table with one column per ``(label, ModelMetrics)`` pair."""
    labels = [label for label, _ in columns]
    rows = [
        ("# params (M)", [f"{m.params_millions:.2f}" for _, m in columns]),
        ("Param size(MB)", [f"{m.size_mb:.2f}" for _, m in columns]),
        ("FLOPs (G)", [f"{m.gflops:.2f}" for _, m in columns]),
        ("Quant overhead FLOPs (G)", [f"{m.quant_overhead_gflops:.4f}" for _, m in columns]),
    ]
    width0 = max(len(r[0]) for r in rows)
    widths = [max(len(lbl), *(len(r[1][j]) for r in rows)) for j, lbl in enumerate(labels)]
    lines = [" " * width0 + " | " + " | ".join(lbl.rjust(w) for lbl, w in zip(labels, widths))]
    lines.append("-" * len(lines[0]))
    for name, vals in rows:
        lines.append(name.ljust(width0) + " | " + " | ".join(v.rjust(w) for v, w in zip(vals, widths)))
    return "\n".join(lines)
