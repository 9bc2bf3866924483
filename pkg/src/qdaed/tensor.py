"""Dense numeric primitives.

Tensors are plain ``numpy.ndarray`` objects of rank 1 or 2 holding float32
(float64 is accepted where a test needs a high-precision recomputation).
Randomness comes from :class:`SeededRng`, a Philox counter-based generator
keyed by ``(seed, stream)``, so sequences do not depend on the platform.
"""

import numpy as np

from .errors import ArgumentError, ShapeError

DTYPE = np.float32


def as_tensor(values, dtype=DTYPE):
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim > 2:
        raise ShapeError(f"tensors have rank <= 2, got shape {arr.shape}")
    return arr


def matmul(a, b):
    """Matrix product with an explicit shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def sigmoid(x):
    """``1 / (1 + exp(-x))``; saturates to 0 without a warning for very negative x."""
    x = np.asarray(x)
    with np.errstate(over="ignore", under="ignore"):
        e = np.exp(-x)
    if e.ndim == 0:
        return 1.0 / (1.0 + e)
    e += 1
    return np.reciprocal(e, out=e)


def tanh(x):
    return np.tanh(x)


_BINARY = {"add": np.add, "mul": np.multiply}
_UNARY = {"sigmoid": sigmoid, "tanh": tanh}


def elementwise(op, *inputs):
    """Apply ``add``/``mul`` (two same-shaped operands) or ``sigmoid``/``tanh`` (one)."""
    if op in _BINARY:
        if len(inputs) != 2:
            raise ArgumentError(f"{op} takes two operands")
        a, b = (np.asarray(x) for x in inputs)
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch for {op}: {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if len(inputs) != 1:
            raise ArgumentError(f"{op} takes one operand")
        return _UNARY[op](np.asarray(inputs[0]))
    raise ArgumentError(f"unknown elementwise op {op!r}")


class SeededRng:
    """Reproducible random stream identified by ``(seed, stream)``.

    Independent workers or stages use distinct ``stream`` ids of the same seed.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, stream):
        """A new generator for a derived stream; does not advance this one."""
        return SeededRng(self.seed, self.stream * 1_000_003 + int(stream) + 1)

    def uniform(self, low=0.0, high=1.0, size=None, dtype=DTYPE):
        return self._gen.uniform(low, high, size).astype(dtype)

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=DTYPE):
        return self._gen.normal(loc, scale, size).astype(dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n):
        return self._gen.permutation(n)

    @property
    def generator(self):
        return self._gen
