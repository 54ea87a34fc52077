"""Shared test oracles, independent of the library's own verify module."""

import numpy as np

from vnn import autodiff as ad


def fd_gradient(make_loss, param, step=1e-5):
    """Central finite differences of a scalar loss w.r.t. one Tensor.

    ``make_loss`` must rebuild the loss from scratch each call (the graph is
    rebuilt so perturbed data is picked up).
    """
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = make_loss().item()
        flat[i] = orig - step
        minus = make_loss().item()
        flat[i] = orig
        grad[i] = (plus - minus) / (2.0 * step)
    return grad.reshape(param.data.shape)


def max_rel_err(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(make_loss, params, step=1e-5, tol=1e-6):
    """Backward pass vs central differences for every param; returns worst."""
    loss = make_loss()
    ad.zero_grads(params)
    ad.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = fd_gradient(make_loss, p, step=step)
        worst = max(worst, max_rel_err(analytic, numeric))
    assert worst <= tol, f"gradient mismatch: rel err {worst} > {tol}"
    return worst
