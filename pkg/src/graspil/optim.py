"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor


class Adam:
    """Standard Adam with bias correction; betas (0.9, 0.999), eps 1e-8.

    State (first/second moments, step count) is keyed by parameter name so
    it can round-trip through checkpoints.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        """Apply one update from the .grad fields; missing grads are zero."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise DimensionError(f"grad shape {g.shape} != param shape {p.data.shape} for {k!r}")
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flatten optimizer state for checkpointing."""
        out: dict[str, np.ndarray] = {"opt.step": np.array([float(self.step_count)])}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.step_count = int(arrays["opt.step"][0])
        for k in self.params:
            self.m[k] = np.array(arrays[f"opt.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"opt.v.{k}"], dtype=np.float64)
