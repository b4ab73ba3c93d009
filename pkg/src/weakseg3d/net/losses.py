"""Cross-entropy losses on logits, returning the loss and its gradient wrt the logits."""

from __future__ import annotations

import logging

import numpy as np

from weakseg3d.net.layers import sigmoid

log = logging.getLogger(__name__)

P_CLAMP = 1e-7


def _clamped(logits):
    p = sigmoid(logits)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    live = (p >= P_CLAMP) & (p <= 1.0 - P_CLAMP)  # clamp has zero derivative outside
    return p, pc, live


def weighted_ce_single(logits: np.ndarray, y: np.ndarray):
    """Auto-weighted CE for one volume: mean bg term and mean fg term, averaged.

    ``y`` holds 0, 1 or the unlabeled code (255). With one class missing, the other class's
    mean is halved. Returns ``(loss, grad, flags)``.
    """
    p, pc, live = _clamped(logits)
    fg, bg = y == 1, y == 0
    nf, nb = int(fg.sum()), int(bg.sum())
    grad = np.zeros_like(p)
    flags = []
    if nf == 0 and nb == 0:
        flags.append("all_unlabeled")
        return 0.0, grad.astype(logits.dtype), flags
    if nf == 0:
        flags.append("no_foreground")
    if nb == 0:
        flags.append("no_background")
    loss = 0.0
    if nf:
        loss += float(-np.log(pc[fg]).sum(dtype=np.float64)) / nf / 2
        grad[fg] = np.where(live[fg], p[fg] - 1.0, 0.0) / (2 * nf)
    if nb:
        loss += float(-np.log1p(-pc[bg]).sum(dtype=np.float64)) / nb / 2
        grad[bg] = np.where(live[bg], p[bg], 0.0) / (2 * nb)
    return loss, grad.astype(logits.dtype), flags


def weighted_ce_loss(logits: np.ndarray, labels: np.ndarray):
    """Batch mean of per-volume auto-weighted CE; ``logits`` and ``labels`` are (N, 1, D, H, W)."""
    n = logits.shape[0]
    total, grad, flags = 0.0, np.empty_like(logits), []
    for i in range(n):
        li, gi, fi = weighted_ce_single(logits[i], labels[i])
        total += li
        grad[i] = gi / n
        flags.extend(fi)
    for f in sorted(set(flags)):
        log.warning("weighted CE: %s in batch", f)
    return total / n, grad, flags


def ce_loss(logits: np.ndarray, target: np.ndarray):
    """Plain per-voxel binary CE, mean over all voxels in the batch."""
    p, pc, live = _clamped(logits)
    t = np.asarray(target, dtype=bool)
    loss = float(np.where(t, -np.log(pc), -np.log1p(-pc)).mean(dtype=np.float64))
    grad = np.where(live, p - t, 0.0) / p.size
    return loss, grad.astype(logits.dtype)
