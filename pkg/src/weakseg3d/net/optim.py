from __future__ import annotations

from weakseg3d.errors import InvalidArgumentError
from weakseg3d.net.unet import UNetParameters

POLY_EXPONENT = 0.9


def sgd_step(params: UNetParameters, lr: float, momentum: float = 0.9) -> None:
    """Heavy-ball SGD in place: ``v = momentum * v + g``, ``w -= lr * v``; clears gradients."""
    if lr < 0:
        raise InvalidArgumentError(f"lr must be >= 0, got {lr}")
    if not (0 <= momentum < 1):
        raise InvalidArgumentError(f"momentum must be in [0, 1), got {momentum}")
    for k, w in params.values.items():
        v = params.momentum[k]
        v *= momentum
        v += params.grads[k]
        if lr:
            w -= lr * v
    params.zero_grad()


def poly_lr(epoch: int, total_epochs: int, lr_start: float, lr_end: float) -> float:
    if total_epochs <= 0:
        raise InvalidArgumentError("total_epochs must be >= 1")
    if not (0 <= epoch < total_epochs):
        raise InvalidArgumentError(f"epoch {epoch} outside [0, {total_epochs})")
    # lr_end + (lr_start - lr_end) * f, written so that f = 1 returns lr_start exactly
    f = (1.0 - epoch / total_epochs) ** POLY_EXPONENT
    return f * lr_start + (1.0 - f) * lr_end
