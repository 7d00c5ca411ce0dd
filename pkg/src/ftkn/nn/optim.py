"""Adam with a one-cycle learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

WARMUP_FRACTION = 0.3
START_DIV = 10.0  # lr at step 0 = peak / START_DIV
FLOOR_DIV = 1000.0  # cosine decays to peak / FLOOR_DIV


def one_cycle_lr(step, total_steps, peak_lr):
    """Linear warm-up over the first 30% of steps, cosine decay to peak/1000."""
    if step > total_steps:
        raise ValueError("step %d beyond schedule of %d steps" % (step, total_steps))
    start = peak_lr / START_DIV
    floor = peak_lr / FLOOR_DIV
    warm = WARMUP_FRACTION * total_steps
    if step < warm:
        return start + (peak_lr - start) * (step / warm)
    span = max(total_steps - warm, 1e-12)
    frac = (step - warm) / span
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamOneCycle:
    """Adam (bias-corrected) whose step size follows the one-cycle schedule.

    State is keyed by parameter identity; `step()` applies one update from
    the gradients currently stored on the parameters.
    """

    def __init__(self, params, total_steps, peak_lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.total_steps = total_steps
        self.peak_lr = peak_lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self):
        return one_cycle_lr(self.step_count, self.total_steps, self.peak_lr)

    def step(self):
        lr = self.lr
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / (1.0 - self.beta1**t)
            v_hat = self._v[i] / (1.0 - self.beta2**t)
            p.tensor.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
