"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_grad(fn, x, h=1e-5):
    """Central-difference gradient of scalar fn w.r.t. array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    denom = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()), 1e-12)
    return np.linalg.norm((analytic - numeric).ravel()) / denom


def check_gradients(build_scalar, arrays, h=1e-5):
    """Check d(scalar)/d(array) for each input against central differences.

    `build_scalar(tensors) -> scalar Tensor` must be a pure function of the
    given leaf tensors. Returns the worst relative error over all inputs.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build_scalar(leaves)
    out.backward()
    worst = 0.0
    for idx, leaf in enumerate(leaves):
        def fn(x, idx=idx):
            probe = [Tensor(a.data) for a in leaves]
            probe[idx] = Tensor(x)
            return build_scalar(probe).item()

        num = numerical_grad(fn, leaf.data.copy(), h=h)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(ana, num))
    return worst
