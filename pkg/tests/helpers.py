"""Shared test utilities."""

import numpy as np
import torch


def directional_errors(fn, inputs, probes=5, eps=1e-6, seed=0):
    """Relative error between autodiff and central-difference directional derivatives.

    ``fn`` maps a list of float64 tensors to a scalar; one random direction per probe
    perturbs every input at once.
    """
    gen = torch.Generator().manual_seed(seed)
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(x) for g, x in zip(grads, inputs)]
    errors = []
    with torch.no_grad():
        for _ in range(probes):
            dirs = [torch.randn(x.shape, generator=gen, dtype=torch.float64) for x in inputs]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
            plus = float(fn([x + eps * d for x, d in zip(inputs, dirs)]))
            minus = float(fn([x - eps * d for x, d in zip(inputs, dirs)]))
            numeric = (plus - minus) / (2 * eps)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            errors.append(abs(analytic - numeric) / scale)
    return np.array(errors)
