"""
Shape denoising network, self-taught from a single confident prediction.

The most confident training prediction becomes the clean template M*. Each
training step corrupts it with the three typical segmentation errors (closing,
boundary-attached dilation, extra marginal slices), optionally after a shared
rigid/scale transform, and the network learns to map the corruption back.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from weakseg3d.errors import InvalidArgumentError, NoTemplateError
from weakseg3d.net.layers import sigmoid
from weakseg3d.net.losses import ce_loss
from weakseg3d.net.optim import sgd_step
from weakseg3d.net.unet import UNetConfig, UNetParameters, unet_backward, unet_forward
from weakseg3d.volume import BinaryMask, ProbabilityVolume, morph, spatial_transform

log = logging.getLogger(__name__)


@dataclass
class NoiseAugConfig:
    """Corruption settings. Each enabled noise op fires independently with ``op_prob``."""

    enable_closing: bool = True
    enable_dilation: bool = True
    enable_extension: bool = True
    closing_iters_range: tuple[int, int] = (1, 3)
    dilation_iters_range: tuple[int, int] = (1, 4)
    dilation_planar: bool = False
    extension_slices_range: tuple[int, int] = (1, 3)
    spatial_prob: float = 0.2
    rotation_range: float = 15.0  # degrees, symmetric, per axis
    scale_range: tuple[float, float] = (0.85, 1.15)
    translation_range: float = 4.0  # voxels, symmetric, per axis
    op_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("closing_iters_range", "dilation_iters_range", "extension_slices_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise InvalidArgumentError(f"{name} must be a non-empty positive range")
            setattr(self, name, (type(lo)(lo), type(hi)(hi)))
        for name in ("spatial_prob", "op_prob"):
            if not (0 <= getattr(self, name) <= 1):
                raise InvalidArgumentError(f"{name} must be in [0, 1]")
        if self.rotation_range < 0 or self.translation_range < 0:
            raise InvalidArgumentError("rotation and translation ranges must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseAugConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(eq=False)
class ShapeTemplate:
    mask: BinaryMask
    source_case_id: int
    confidence: float

    def __post_init__(self):
        if self.mask.count() == 0:
            raise InvalidArgumentError("template mask is empty")


@dataclass(eq=False)
class SDNModel:
    cfg: UNetConfig
    params: UNetParameters
    frozen: bool = False
    training_history: list = field(default_factory=list)

    def checksum(self) -> str:
        return self.params.checksum()


def mask_confidence(p: ProbabilityVolume | np.ndarray) -> float:
    """Mean probability over voxels with p > 0.5, or 0 if there are none."""
    data = p.data if isinstance(p, ProbabilityVolume) else np.asarray(p)
    sel = data[data > 0.5]
    return float(sel.mean(dtype=np.float64)) if sel.size else 0.0


def select_template(predictions: Sequence[tuple[int, ProbabilityVolume, BinaryMask]], rank: int = 1) -> ShapeTemplate:
    """The ``rank``-th most confident non-empty prediction (ties to the lower case id)."""
    if rank < 1:
        raise InvalidArgumentError("rank must be >= 1")
    scored = [(mask_confidence(p), cid, m) for cid, p, m in predictions if m.count() > 0]
    if not scored:
        raise NoTemplateError("every predicted mask is empty; the segmentation network has degraded")
    if len(scored) < rank:
        raise NoTemplateError(f"only {len(scored)} non-empty predictions, rank {rank} requested")
    scored.sort(key=lambda t: (-t[0], t[1]))
    conf, cid, m = scored[rank - 1]
    return ShapeTemplate(m, int(cid), conf)


# ---- noise operations (input side only)


def extend_slices(mask: np.ndarray, k: int, at_end: bool) -> np.ndarray:
    """Copy the first (or last) foreground slice onto the ``k`` slices beyond it."""
    zs = np.nonzero(mask.reshape(mask.shape[0], -1).any(axis=1))[0]
    out = mask.copy()
    if zs.size == 0:
        return out
    if at_end:
        src = zs[-1]
        for z in range(src + 1, min(mask.shape[0], src + 1 + k)):
            out[z] |= mask[src]
    else:
        src = zs[0]
        for z in range(max(0, src - k), src):
            out[z] |= mask[src]
    return out


def boundary_voxels(mask: np.ndarray, planar: bool = False) -> np.ndarray:
    m = BinaryMask(mask.astype(np.uint8))
    return mask & ~morph(m, "erode", 1, planar=planar).bool()


def attach_blob(mask: np.ndarray, seed_voxel, iters: int, planar: bool = False) -> np.ndarray:
    """Grow a single voxel for ``iters`` steps inside a ball of radius ``iters`` and union it."""
    seed = np.zeros(mask.shape, dtype=np.uint8)
    seed[tuple(seed_voxel)] = 1
    grown = morph(BinaryMask(seed), "dilate", iters, planar=planar).bool()
    idx = np.indices(mask.shape).reshape(3, -1).T
    d = idx - np.asarray(seed_voxel)
    if planar:
        d[:, 0] *= 1_000  # keep the blob in its slice
    ball = ((d * d).sum(axis=1) <= iters * iters).reshape(mask.shape)
    return mask | (grown & ball)


@dataclass
class AugmentDraw:
    """What one corruption draw did; ``None`` marks an op that did not fire."""

    spatial: tuple | None = None  # (rotation_deg, translation, scale)
    closing: int | None = None
    dilation: tuple | None = None  # (iterations, seed voxel)
    extension: tuple | None = None  # (slices, at_end)


def augment_shape_detail(template: ShapeTemplate, cfg: NoiseAugConfig, draw_seed):
    rng = np.random.default_rng(draw_seed)
    spacing = template.mask.spacing
    info = AugmentDraw()
    target = template.mask
    if rng.random() < cfg.spatial_prob:
        rot = tuple(float(v) for v in rng.uniform(-cfg.rotation_range, cfg.rotation_range, size=3))
        shift = tuple(float(v) for v in rng.uniform(-cfg.translation_range, cfg.translation_range, size=3))
        scale = float(rng.uniform(*cfg.scale_range))
        target = spatial_transform(target, rot, shift, scale)
        info.spatial = (rot, shift, scale)
    x = target.bool()
    if cfg.enable_closing and rng.random() < cfg.op_prob:
        k = int(rng.integers(cfg.closing_iters_range[0], cfg.closing_iters_range[1] + 1))
        x = morph(BinaryMask(x), "close", k, planar=cfg.dilation_planar).bool() | x
        info.closing = k
    if cfg.enable_dilation and rng.random() < cfg.op_prob:
        k = int(rng.integers(cfg.dilation_iters_range[0], cfg.dilation_iters_range[1] + 1))
        pts = np.argwhere(boundary_voxels(x, cfg.dilation_planar))
        if len(pts):
            v = tuple(int(c) for c in pts[int(rng.integers(len(pts)))])
            x = attach_blob(x, v, k, cfg.dilation_planar)
            info.dilation = (k, v)
    if cfg.enable_extension and rng.random() < cfg.op_prob:
        k = int(rng.integers(cfg.extension_slices_range[0], cfg.extension_slices_range[1] + 1))
        at_end = bool(rng.random() < 0.5)
        x = extend_slices(x, k, at_end)
        info.extension = (k, at_end)
    return BinaryMask(x.astype(np.uint8), spacing), BinaryMask(target.data.copy(), spacing), info


def augment_shape(template: ShapeTemplate, cfg: NoiseAugConfig, draw_seed) -> tuple[BinaryMask, BinaryMask]:
    """One (corrupted input, target) pair drawn deterministically from ``draw_seed``.

    A shared spatial transform (with probability ``spatial_prob``) defines the
    target; closing, boundary blob dilation and slice extension then corrupt
    the input only.
    """
    inp, tgt, _ = augment_shape_detail(template, cfg, draw_seed)
    return inp, tgt


def _draw_seed(seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & ((1 << 64) - 1), int(step)])


def train_sdn(
    template: ShapeTemplate | Sequence[ShapeTemplate],
    cfg: UNetConfig,
    aug: NoiseAugConfig,
    epochs: int = 100,
    lr: float = 1e-2,
    steps_per_epoch: int = 8,
    batch_size: int = 2,
    momentum: float = 0.9,
    init_seed: int = 0,
) -> SDNModel:
    """Denoiser trained with plain CE on fresh corruption draws; frozen on return.

    Several templates are cycled step by step.
    """
    templates = [template] if isinstance(template, ShapeTemplate) else list(template)
    if not templates:
        raise InvalidArgumentError("need at least one template")
    if epochs < 0 or steps_per_epoch < 1 or batch_size < 1 or lr < 0:
        raise InvalidArgumentError("invalid SDN training settings")
    cfg.check_input(templates[0].mask.dims)
    model = SDNModel(cfg, UNetParameters.init(cfg, seed=init_seed))
    step = 0
    for _ in range(epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            xs, ts = [], []
            for _ in range(batch_size):
                tpl = templates[step % len(templates)]
                inp, tgt = augment_shape(tpl, aug, _draw_seed(aug.seed, step))
                xs.append(inp.data[None].astype(np.float32))
                ts.append(tgt.data[None])
                step += 1
            logits, cache = unet_forward(cfg, model.params, np.stack(xs))
            loss, grad = ce_loss(logits, np.stack(ts))
            unet_backward(cfg, model.params, cache, grad, input_grad=False)
            sgd_step(model.params, lr, momentum)
            total += loss
        model.training_history.append(total / steps_per_epoch)
    # momentum buffers are training state only; drop them so the frozen model is just Omega
    for v in model.params.momentum.values():
        v.fill(0)
    model.frozen = True
    return model


def denoise(model: SDNModel, m: BinaryMask) -> tuple[ProbabilityVolume, BinaryMask]:
    """P_d from the mask fed as a {0, 1} real volume; M_d = 1(P_d > 0.5)."""
    if not model.frozen:
        log.warning("denoising with an SDN that was not frozen")
    logits, _ = unet_forward(model.cfg, model.params, m.data[None, None].astype(np.float32), cache=False)
    p = ProbabilityVolume(sigmoid(logits[0, 0]), m.spacing)
    return p, p.threshold(0.5)
