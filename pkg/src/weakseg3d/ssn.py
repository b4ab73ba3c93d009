"""
Segmentation network: trained on weak (and later pseudo) labels, predicts P_s and M_s.

Training uses whole volumes as batches, the auto-weighted cross-entropy over
labeled voxels only, SGD with momentum and a poly learning-rate schedule.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from weakseg3d.errors import InvalidArgumentError, InvalidInputError
from weakseg3d.net.layers import sigmoid
from weakseg3d.net.losses import weighted_ce_loss
from weakseg3d.net.optim import poly_lr, sgd_step
from weakseg3d.net.unet import UNetConfig, UNetParameters, unet_backward, unet_forward
from weakseg3d.volume import BinaryMask, ProbabilityVolume, TriLabelMask, VolumeImage

log = logging.getLogger(__name__)


@dataclass
class SSNTrainConfig:
    epochs: int = 30
    lr_start: float = 1e-2
    lr_end: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be >= 1")
        if self.lr_start < 0 or self.lr_end < 0:
            raise InvalidArgumentError("learning rates must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class SSNModel:
    cfg: UNetConfig
    params: UNetParameters
    training_history: list = field(default_factory=list)
    flags: list = field(default_factory=list)


def normalize_image(data: np.ndarray) -> np.ndarray:
    """Per-volume z-score."""
    data = np.asarray(data, dtype=np.float32)
    sd = float(data.std())
    return (data - data.mean()) / (sd if sd > 0 else 1.0)


def _stack(arrs):
    return np.stack([a[None] for a in arrs])


def fit(
    model: SSNModel,
    images: Sequence[VolumeImage],
    label_terms: Sequence[tuple[float, Sequence[TriLabelMask]]],
    epochs: int,
    lr_at,
    momentum: float,
    batch_size: int,
    seed: int,
) -> None:
    """Minimize ``sum_k w_k * L_wce(P, Y_k)`` in place.

    ``label_terms`` pairs a loss weight with one label volume per image;
    ``lr_at(epoch)`` gives the learning rate. Appends per-epoch mean losses to
    the model history.
    """
    n = len(images)
    xs = [normalize_image(im.data) for im in images]
    for _, labs in label_terms:
        if len(labs) != n:
            raise InvalidArgumentError("every label term needs one label per image")
        for im, lab in zip(images, labs):
            if lab.dims != im.dims:
                raise InvalidArgumentError(f"label dims {lab.dims} != image dims {im.dims}")
    rng = np.random.default_rng(seed)
    flagged = set()
    for ep in range(epochs):
        lr = lr_at(ep)
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = _stack([xs[i] for i in idx])
            logits, cache = unet_forward(model.cfg, model.params, x)
            grad = np.zeros_like(logits)
            loss = 0.0
            for weight, labs in label_terms:
                if weight == 0:
                    continue
                y = _stack([labs[i].data for i in idx])
                li, gi, fl = weighted_ce_loss(logits, y)
                loss += weight * li
                grad += weight * gi
                flagged.update(fl)
            unet_backward(model.cfg, model.params, cache, grad, input_grad=False)
            sgd_step(model.params, lr, momentum)
            total += loss
            batches += 1
        model.training_history.append(total / batches)
    for f in sorted(flagged):
        if f not in model.flags:
            model.flags.append(f)


def train_ssn(
    cases: Sequence[tuple[VolumeImage, TriLabelMask]],
    cfg: UNetConfig,
    tcfg: SSNTrainConfig,
    init_seed: int | None = None,
) -> SSNModel:
    """Initial SSN training on weak labels with the poly schedule."""
    if not cases:
        raise InvalidInputError("no training cases")
    dims = {img.dims for img, _ in cases}
    if len(dims) != 1:
        raise InvalidInputError(f"training volumes must share dims, got {sorted(dims)}")
    cfg.check_input(next(iter(dims)))
    for img, lab in cases:
        nb, nf = lab.counts()
        if nb == 0 or nf == 0:
            log.warning("case with %d background / %d foreground labels; auto-weighting fallback applies", nb, nf)
    seed = tcfg.seed if init_seed is None else init_seed
    model = SSNModel(cfg, UNetParameters.init(cfg, seed=seed))
    fit(
        model,
        [img for img, _ in cases],
        [(1.0, [lab for _, lab in cases])],
        tcfg.epochs,
        lambda e: poly_lr(e, tcfg.epochs, tcfg.lr_start, tcfg.lr_end),
        tcfg.momentum,
        tcfg.batch_size,
        tcfg.seed,
    )
    return model


def predict_logits(model: SSNModel, image: VolumeImage) -> np.ndarray:
    if len(image.dims) != 3:
        raise InvalidArgumentError("expected a 3D image")
    logits, _ = unet_forward(model.cfg, model.params, normalize_image(image.data)[None, None], cache=False)
    return logits[0, 0]


def predict_ssn(model: SSNModel, image: VolumeImage) -> tuple[ProbabilityVolume, BinaryMask]:
    """P_s = sigmoid(logits) and M_s = 1(P_s > 0.5)."""
    p = ProbabilityVolume(sigmoid(predict_logits(model, image)), image.spacing)
    return p, p.threshold(0.5)
