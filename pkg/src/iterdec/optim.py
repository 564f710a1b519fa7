"""Adam optimizer with an inverse-square-root warmup learning-rate schedule."""

from __future__ import annotations

import numpy as np


class OptimError(Exception):
    """Raised for invalid optimizer usage or corrupt optimizer state."""


def learning_rate(step, d_model, warmup_steps=4000):
    """Schedule lr(step) = d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).

    Steps are counted from 1; the two branches cross at step = warmup_steps,
    where the schedule attains its maximum.
    """
    if step < 1:
        raise OptimError(f"schedule steps start at 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


class Adam:
    """Standard bias-corrected Adam driven by the warmup schedule.

    Each call to :meth:`step` consumes the gradients currently stored on the
    parameters and zeroes them afterwards.  A parameter whose gradient is
    None is treated as having a zero gradient, so its moments decay but a
    fresh parameter stays unchanged.
    """

    def __init__(self, parameters, d_model, warmup_steps=4000,
                 beta1=0.9, beta2=0.98, eps=1e-9, fixed_lr=None):
        self.parameters = list(parameters)
        if not self.parameters:
            raise OptimError("no parameters to optimize")
        self.d_model = d_model
        self.warmup_steps = warmup_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.fixed_lr = fixed_lr
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.parameters]
        self._v = [np.zeros_like(p.data) for p in self.parameters]

    def step(self):
        """Apply one update to every parameter; returns the rate used."""
        self.step_count += 1
        lr = self.fixed_lr
        if lr is None:
            lr = learning_rate(self.step_count, self.d_model, self.warmup_steps)
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.parameters):
            grad = p.grad if p.grad is not None else 0.0
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * grad
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * np.square(grad)
            m_hat = self._m[i] / bias1
            v_hat = self._v[i] / bias2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None
        return lr

    def zero_grad(self):
        for p in self.parameters:
            p.grad = None

    def state_tensors(self):
        """Optimizer state as named arrays, for embedding in checkpoints."""
        out = {}
        for i, p in enumerate(self.parameters):
            out[f"opt.m.{p.name}"] = self._m[i]
            out[f"opt.v.{p.name}"] = self._v[i]
        return out

    def load_state_tensors(self, tensors, step_count):
        """Restore moments and step counter saved by :meth:`state_tensors`."""
        for i, p in enumerate(self.parameters):
            for key, store in ((f"opt.m.{p.name}", self._m), (f"opt.v.{p.name}", self._v)):
                if key not in tensors:
                    raise OptimError(f"missing optimizer state {key!r}")
                if tensors[key].shape != p.data.shape:
                    raise OptimError(
                        f"optimizer state {key!r} has shape {tensors[key].shape}, "
                        f"parameter has {p.data.shape}")
                store[i] = np.asarray(tensors[key], dtype=p.data.dtype)
        self.step_count = int(step_count)
