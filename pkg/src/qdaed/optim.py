"""Adam over a dict of named float32 arrays, plus global-norm clipping."""

import numpy as np

from .errors import ShapeError


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        """Update ``params`` in place."""
        for k, g in grads.items():
            if g.shape != self.params[k].shape:
                raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter {self.params[k].shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for k in sorted(self.params):
            p = self.params[k]
            g = grads[k].astype(p.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(p.dtype)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t, m, v):
        self.t = int(t)
        for k in self.params:
            self.m[k][...] = m[k]
            self.v[k][...] = v[k]


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(np.square(grads[k], dtype=np.float64))) for k in sorted(grads))))


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm
