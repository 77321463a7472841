"""Central-finite-difference checking of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["grad_check"]


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Compare analytic grads of a scalar-valued tensor program against
    central finite differences, one coordinate at a time.

    Returns the max relative error with denominator max(|a|, |b|, 1e-8).
    Inputs should be 64-bit for the differences to be meaningful.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar program, got output shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*inputs).data.reshape(-1)[0])
            flat[i] = orig - eps
            fm = float(f(*inputs).data.reshape(-1)[0])
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst
