"""Central finite-difference check of the U-Net + sigmoid + weighted CE gradients."""

from __future__ import annotations

import numpy as np

from weakseg3d.errors import InvalidArgumentError
from weakseg3d.net.losses import weighted_ce_loss
from weakseg3d.net.unet import UNetConfig, UNetParameters, unet_backward, unet_forward

# gradients smaller than this are compared absolutely (rounding noise in the
# central difference is about eps * |loss| / h ~ 1e-11)
GRAD_FLOOR = 1e-6


def relative_error(a, n, floor=GRAD_FLOOR):
    a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _loss(cfg, params, x, y):
    logits, _ = unet_forward(cfg, params, x, cache=False)
    return weighted_ce_loss(logits, y)[0]


def analytic_gradients(cfg, params, x, y):
    params.zero_grad()
    logits, cache = unet_forward(cfg, params, x)
    loss, g, _ = weighted_ce_loss(logits, y)
    unet_backward(cfg, params, cache, g)
    return loss, {k: v.copy() for k, v in params.grads.items()}


def finite_diff_check(cfg: UNetConfig, params: UNetParameters, x, y, h: float = 1e-5, detail: bool = False):
    """Worst relative error over every parameter; ``params`` must be 64-bit."""
    if h <= 0:
        raise InvalidArgumentError("h must be > 0")
    if params.dtype != np.float64:
        raise InvalidArgumentError("finite-difference check needs float64 parameters")
    x = np.asarray(x, np.float64)
    _, grads = analytic_gradients(cfg, params, x, y)
    worst = 0.0
    per_param = {}
    for name, w in params.values.items():
        flat = w.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            lp = _loss(cfg, params, x, y)
            flat[i] = keep - h
            lm = _loss(cfg, params, x, y)
            flat[i] = keep
            num[i] = (lp - lm) / (2 * h)
        err = float(relative_error(grads[name].reshape(-1), num).max())
        per_param[name] = err
        worst = max(worst, err)
    params.zero_grad()
    return (worst, per_param) if detail else worst
