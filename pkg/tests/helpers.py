"""Shared test oracles."""

import numpy as np
import torch


def finite_difference_probe(model, loss_fn, n_probes=20, h=1e-6, seed=0):
    """Compare autograd parameter gradients with central differences.

    ``loss_fn(model)`` must return a scalar and be deterministic. Returns
    the worst relative error over ``n_probes`` randomly chosen parameter
    entries.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn(model).backward()
    grads = [p.grad.detach().clone() for p in params]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params], dtype=float)
    worst = 0.0
    for _ in range(n_probes):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        idx = int(rng.integers(params[k].numel()))
        flat = params[k].data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
            up = loss_fn(model).item()
            flat[idx] = orig - h
            down = loss_fn(model).item()
            flat[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = grads[k].view(-1)[idx].item()
        err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, err)
    return worst


def finite_difference_input(fn, x, n_probes=20, h=1e-6, seed=0):
    """Same check for the gradient of ``fn(x)`` with respect to ``x``."""
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach().view(-1)
    rng = np.random.default_rng(seed)
    worst = 0.0
    base = x.detach().clone()
    for _ in range(n_probes):
        idx = int(rng.integers(base.numel()))
        xp, xm = base.clone().view(-1), base.clone().view(-1)
        xp[idx] += h
        xm[idx] -= h
        with torch.no_grad():
            numeric = (fn(xp.view_as(base)).item() - fn(xm.view_as(base)).item()) / (2 * h)
        analytic = grad[idx].item()
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6))
    return worst
