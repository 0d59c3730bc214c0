"""Central-difference oracle shared by the gradient tests."""

import numpy as np
import torch

from sanerf import gradflow as gf


def grad_check(fn, *inputs, h=1e-5, floor=1e-5, seed=0):
    """Largest relative error between autograd and central differences for
    a random projection of ``fn(*inputs)``, over every input."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    xs = [torch.tensor(x, requires_grad=True) for x in inputs]
    out = fn(*xs)
    proj = torch.as_tensor(np.random.default_rng(seed).standard_normal(tuple(out.shape)))
    (out * proj).sum().backward()
    worst = 0.0
    for k, x in enumerate(inputs):

        def scalar(v, k=k):
            args = [torch.tensor(a) for a in inputs]
            args[k] = torch.tensor(v)
            with torch.no_grad():
                return float((fn(*args) * proj).sum())

        fd = gf.finite_difference_grad(scalar, x, h)
        an = xs[k].grad.numpy() if xs[k].grad is not None else np.zeros_like(x)
        worst = max(worst, gf.max_relative_error(an, fd, floor=floor))
    return worst
