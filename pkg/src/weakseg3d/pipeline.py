"""
End-to-end training: weak labels -> initial SSN -> self-taught SDN -> iterative
pseudo-label refinement, plus evaluation and the ablation grid.

Ablations:

* ``full`` - iterations with both masks gating the pseudo labels.
* ``no_shape_prior`` - iterations with M_d replaced by M_s.
* ``no_iterative`` - no iterations; the SDN-refined initial prediction is scored.
* ``baseline`` - the initial SSN trained on weak labels only.
* ``pseudo_only`` - iterations with the weak-label term switched off.

Cells sharing a (ratio, scheme) coordinate share one initialization, which is
valid because every stage is deterministic in the master seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from weakseg3d.errors import InvalidArgumentError, InvalidInputError, InvalidStateError
from weakseg3d.fusion import FilterConfig, compute_thresholds, make_pseudo_label
from weakseg3d.net.unet import UNetConfig
from weakseg3d.phantom import PhantomCase
from weakseg3d.sdn import NoiseAugConfig, SDNModel, ShapeTemplate, augment_shape, denoise, select_template, train_sdn
from weakseg3d.ssn import SSNModel, SSNTrainConfig, fit, predict_ssn, train_ssn
from weakseg3d.volume import BinaryMask, BoundingBox3, PriorCrop, TriLabelMask, VolumeImage, plan_prior_crop
from weakseg3d.weaklabel import AnnotationScheme, compose_weak_label

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_shape_prior", "no_iterative", "baseline", "pseudo_only")

# stream ids for seed derivation
_S_LABELS, _S_SSN, _S_SDN_INIT, _S_SDN_AUG, _S_ITER, _S_SDN_EVAL = 1, 2, 3, 4, 5, 6


def derive_seed(master: int, *keys: int) -> int:
    ss = np.random.SeedSequence([int(master) & ((1 << 64) - 1), *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint64)[0])


def dice(pred: BinaryMask | np.ndarray, gt: BinaryMask | np.ndarray) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both are empty."""
    a = pred.bool() if isinstance(pred, BinaryMask) else np.asarray(pred, dtype=bool)
    b = gt.bool() if isinstance(gt, BinaryMask) else np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"dice dims differ: {a.shape} vs {b.shape}")
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


# ---- configuration


@dataclass
class SDNTrainConfig:
    epochs: int = 60
    lr: float = 1e-2
    steps_per_epoch: int = 8
    batch_size: int = 2
    momentum: float = 0.9
    rank: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1 or self.rank < 1 or self.lr < 0:
            raise InvalidArgumentError("invalid SDN training settings")


@dataclass
class IterConfig:
    lambda_w: float = 0.1
    lambda_p: float = 10.0
    iter_epochs: int = 20
    iter_lr: float = 1e-2
    max_iterations: int = 3
    momentum: float = 0.9
    batch_size: int = 2

    def __post_init__(self):
        if self.lambda_w < 0 or self.lambda_p < 0 or (self.lambda_w == 0 and self.lambda_p == 0):
            raise InvalidArgumentError("lambdas must be >= 0 with at least one > 0")
        if self.iter_epochs < 1 or self.max_iterations < 0 or self.iter_lr < 0 or self.batch_size < 1:
            raise InvalidArgumentError("invalid iteration settings")


@dataclass
class PipelineConfig:
    net: UNetConfig = field(default_factory=UNetConfig)
    ssn: SSNTrainConfig = field(default_factory=SSNTrainConfig)
    sdn: SDNTrainConfig = field(default_factory=SDNTrainConfig)
    aug: NoiseAugConfig = field(default_factory=NoiseAugConfig)
    iter: IterConfig = field(default_factory=IterConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    crop_scale: float = 1.2

    def to_dict(self) -> dict:
        return {
            "net": self.net.to_dict(),
            "ssn": asdict(self.ssn),
            "sdn": asdict(self.sdn),
            "aug": self.aug.to_dict(),
            "iter": asdict(self.iter),
            "filter": asdict(self.filter),
            "crop_scale": self.crop_scale,
        }


# ---- data preparation


@dataclass(eq=False)
class PreparedData:
    """Cropped training/validation volumes with the weak labels they were trained on."""

    crop: PriorCrop
    train_ids: list[int]
    train_images: list[VolumeImage]
    train_labels: list[TriLabelMask]
    train_gt: list[BinaryMask]
    val_ids: list[int]
    val_images: list[VolumeImage]
    val_gt: list[BinaryMask]


def _fit_to_stride(crop: PriorCrop, stride) -> PriorCrop:
    """Grow the crop box symmetrically until every side is a multiple of ``stride``."""
    lo, hi = np.array(crop.box.lo), np.array(crop.box.hi)
    size = hi - lo + 1
    target = -(-size // stride) * stride
    extra = target - size
    lo = lo - extra // 2
    hi = hi + (extra - extra // 2)
    return PriorCrop(crop.spacing, crop.aligned_dims, BoundingBox3(tuple(int(v) for v in lo), tuple(int(v) for v in hi)))


def weak_labels_for(cases: Sequence[PhantomCase], scheme: AnnotationScheme, master_seed: int) -> list[TriLabelMask]:
    return [compose_weak_label(c.gt, scheme, derive_seed(master_seed, _S_LABELS, c.case_id)) for c in cases]


def prepare_data(
    train: Sequence[PhantomCase],
    val: Sequence[PhantomCase],
    scheme: AnnotationScheme,
    net: UNetConfig,
    master_seed: int,
    crop_scale: float = 1.2,
    labels: Sequence[TriLabelMask] | None = None,
) -> PreparedData:
    if not train:
        raise InvalidInputError("empty training split")
    if labels is None:
        labels = weak_labels_for(train, scheme, master_seed)
    elif len(labels) != len(train):
        raise InvalidInputError("need one weak label per training case")
    crop = plan_prior_crop([(c.image, y) for c, y in zip(train, labels)], crop_scale, clamp_to_extent=True)
    crop = _fit_to_stride(crop, net.total_stride(net.levels - 1))
    return PreparedData(
        crop=crop,
        train_ids=[c.case_id for c in train],
        train_images=[crop.apply(c.image) for c in train],
        train_labels=[crop.apply(y, fill=0) for y in labels],
        train_gt=[crop.apply(c.gt) for c in train],
        val_ids=[c.case_id for c in val],
        val_images=[crop.apply(c.image) for c in val],
        val_gt=[crop.apply(c.gt) for c in val],
    )


# ---- stages


@dataclass(eq=False)
class InitResult:
    ssn: SSNModel
    sdn: SDNModel
    template: ShapeTemplate
    train_predictions: list


def initial_ssn(data: PreparedData, cfg: PipelineConfig, master_seed: int) -> tuple[SSNModel, list, ShapeTemplate]:
    """Weak-label SSN, its training-split predictions, and the selected template."""
    tcfg = replace(cfg.ssn, seed=derive_seed(master_seed, _S_SSN))
    ssn = train_ssn(list(zip(data.train_images, data.train_labels)), cfg.net, tcfg)
    preds = [(cid, *predict_ssn(ssn, img)) for cid, img in zip(data.train_ids, data.train_images)]
    return ssn, preds, select_template(preds, cfg.sdn.rank)


def self_train_sdn(template: ShapeTemplate, cfg: PipelineConfig, master_seed: int) -> SDNModel:
    aug = replace(cfg.aug, seed=derive_seed(master_seed, _S_SDN_AUG))
    return train_sdn(
        template,
        cfg.net,
        aug,
        epochs=cfg.sdn.epochs,
        lr=cfg.sdn.lr,
        steps_per_epoch=cfg.sdn.steps_per_epoch,
        batch_size=cfg.sdn.batch_size,
        momentum=cfg.sdn.momentum,
        init_seed=derive_seed(master_seed, _S_SDN_INIT),
    )


def sdn_holdout(model: SDNModel, template: ShapeTemplate, aug: NoiseAugConfig, n_draws: int, seed: int) -> dict:
    """Dice of corrupted and denoised masks against their targets on fresh corruption draws."""
    if n_draws < 1:
        raise InvalidArgumentError("n_draws must be >= 1")
    before, after = [], []
    for i in range(n_draws):
        inp, tgt = augment_shape(template, aug, np.random.SeedSequence([int(seed) & ((1 << 64) - 1), i]))
        before.append(dice(inp, tgt))
        after.append(dice(denoise(model, inp)[1], tgt))
    return {"corrupted": before, "denoised": after}


# (row name, switched-off corruption op); the table mirrors "case rank x ops -> Dice"
SDN_ABLATION_ROWS = (
    ("full", None),
    ("no_closing", "enable_closing"),
    ("no_dilation", "enable_dilation"),
    ("no_extension", "enable_extension"),
)


def sdn_augmentation_ablation(
    predictions: Sequence,
    cfg: PipelineConfig,
    master_seed: int,
    n_draws: int = 50,
    ranks: Sequence[int] = (1,),
    rows: Sequence[str] | None = None,
) -> list[dict]:
    """Train one SDN per (template rank, corruption row) and score each on the same held-out draws.

    Held-out draws always use the full corruption set, so a row that drops an op
    shows what the denoiser loses by never having seen it. The first row is the
    no-SDN reference: Dice of the corrupted inputs themselves.
    """
    names = [r for r, _ in SDN_ABLATION_ROWS] if rows is None else list(rows)
    ops = dict(SDN_ABLATION_ROWS)
    if any(r not in ops for r in names):
        raise InvalidArgumentError(f"unknown SDN ablation rows {names}")
    eval_seed = derive_seed(master_seed, _S_SDN_EVAL)
    out = []
    for rank in ranks:
        tpl = select_template(predictions, rank)
        for i, name in enumerate(names):
            aug = cfg.aug if ops[name] is None else replace(cfg.aug, **{ops[name]: False})
            model = self_train_sdn(tpl, replace(cfg, aug=aug), master_seed)
            ho = sdn_holdout(model, tpl, cfg.aug, n_draws, eval_seed)
            if i == 0:
                out.append(_sdn_row("no_sdn", rank, tpl, None, ho["corrupted"]))
            out.append(_sdn_row(name, rank, tpl, aug, ho["denoised"], ho["corrupted"]))
            log.info("SDN ablation rank %d %s: mean dice %.4f", rank, name, out[-1]["mean_dice"])
    return out


def _sdn_row(name, rank, tpl: ShapeTemplate, aug: NoiseAugConfig | None, dices, inputs=None) -> dict:
    on = (lambda k: bool(getattr(aug, k))) if aug is not None else (lambda k: False)
    row = {
        "row": name,
        "case_rank": int(rank),
        "source_case_id": tpl.source_case_id,
        "closing": on("enable_closing"),
        "dilation": on("enable_dilation"),
        "extension": on("enable_extension"),
        "dice": [float(d) for d in dices],
        "mean_dice": float(np.mean(dices)),
    }
    if inputs is not None:
        delta = np.asarray(dices) - np.asarray(inputs)
        row["worst_change"] = float(delta.min())
    return row


def run_initialization(data: PreparedData, cfg: PipelineConfig, master_seed: int) -> InitResult:
    """Train SSN on weak labels, pick the most confident training mask, self-train the SDN."""
    ssn, preds, template = initial_ssn(data, cfg, master_seed)
    return InitResult(ssn, self_train_sdn(template, cfg, master_seed), template, preds)


def evaluate_split(ssn: SSNModel, sdn: SDNModel | None, images, gts) -> dict:
    """Per-case Dice of M_s and (when an SDN is given) of M_d = SDN(M_s)."""
    out = {"ssn": [], "sdn": []}
    for img, gt in zip(images, gts):
        _, m_s = predict_ssn(ssn, img)
        out["ssn"].append(dice(m_s, gt))
        if sdn is not None:
            out["sdn"].append(dice(denoise(sdn, m_s)[1], gt))
    return out


def _copy_model(m: SSNModel) -> SSNModel:
    return SSNModel(m.cfg, m.params.copy(), list(m.training_history), list(m.flags))


def run_iterations(
    ssn: SSNModel,
    sdn: SDNModel,
    data: PreparedData,
    icfg: IterConfig,
    fcfg: FilterConfig,
    master_seed: int,
    use_shape_prior: bool = True,
) -> tuple[SSNModel, list[dict]]:
    """Alternate pseudo-label generation and SSN updates; the SDN stays frozen."""
    if not sdn.frozen:
        raise InvalidStateError("the SDN must be frozen before iterative learning")
    model = _copy_model(ssn)
    omega = sdn.checksum()
    reports = []
    for it in range(icfg.max_iterations):
        pseudo, n_fg, n_bg, n_wrong = [], 0, 0, 0
        d_s, d_d = [], []
        for img, gt in zip(data.train_images, data.train_gt):
            p_s, m_s = predict_ssn(model, img)
            m_d = denoise(sdn, m_s)[1] if use_shape_prior else m_s
            th = compute_thresholds(p_s, m_s, fcfg)
            y_p = make_pseudo_label(m_s, m_d, p_s, th)
            nb, nf = y_p.counts()
            n_fg += nf
            n_bg += nb
            g = gt.bool()
            n_wrong += int(((y_p.data == 1) & ~g).sum() + ((y_p.data == 0) & g).sum())
            d_s.append(dice(m_s, gt))
            d_d.append(dice(m_d, gt))
            pseudo.append(y_p)
        before = len(model.training_history)
        fit(
            model,
            data.train_images,
            [(icfg.lambda_w, data.train_labels), (icfg.lambda_p, pseudo)],
            icfg.iter_epochs,
            lambda e: icfg.iter_lr,
            icfg.momentum,
            icfg.batch_size,
            derive_seed(master_seed, _S_ITER, it),
        )
        if sdn.checksum() != omega:
            raise InvalidStateError("SDN parameters changed during iterative learning")
        ev = evaluate_split(model, sdn, data.val_images, data.val_gt)
        reports.append(
            {
                "iteration": it + 1,
                "loss_curve": model.training_history[before:],
                "pseudo_fg_voxels": n_fg,
                "pseudo_bg_voxels": n_bg,
                "pseudo_wrong_voxels": n_wrong,
                "train_dice_ssn": float(np.mean(d_s)),
                "train_dice_fused_mask": float(np.mean(d_d)),
                "val_dice_ssn": float(np.mean(ev["ssn"])),
                "val_dice_sdn": float(np.mean(ev["sdn"])),
                "sdn_checksum": omega,
            }
        )
        log.info("iteration %d: val dice %.4f (sdn %.4f)", it + 1, reports[-1]["val_dice_ssn"], reports[-1]["val_dice_sdn"])
    return model, reports


# ---- reports


@dataclass
class ExperimentReport:
    ablation: str
    ratio: float
    scheme: str
    case_ids: list
    dice: list  # per-case Dice of the scored mask
    mean_dice: float
    mask_source: str  # "ssn" or "sdn"
    alt_dice: list  # per-case Dice of the other mask source
    alt_mean_dice: float
    iterations: list
    init: dict
    fingerprint: str
    config: dict
    master_seed: int
    split: str = "val"

    def __post_init__(self):
        if self.dice and not np.isclose(self.mean_dice, float(np.mean(self.dice)), rtol=0, atol=1e-15):
            raise InvalidArgumentError("mean_dice must equal the mean of the per-case values")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "ExperimentReport":
        return cls.from_dict(json.loads(s))


def fingerprint(config: dict, master_seed: int, ablation: str, ratio: float, scheme: str) -> str:
    doc = {"config": config, "seed": int(master_seed), "ablation": ablation, "ratio": ratio, "scheme": scheme}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _mean(v):
    return float(np.mean(v)) if len(v) else float("nan")


def run_cell(
    ablation: str,
    data: PreparedData,
    init: InitResult,
    cfg: PipelineConfig,
    master_seed: int,
    scheme: AnnotationScheme,
    config_doc: dict | None = None,
) -> tuple[ExperimentReport, SSNModel]:
    """Score one ablation given a shared initialization."""
    if ablation not in ABLATIONS:
        raise InvalidArgumentError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    iters: list = []
    model = init.ssn
    if ablation in ("full", "no_shape_prior", "pseudo_only"):
        icfg = replace(cfg.iter, lambda_w=0.0) if ablation == "pseudo_only" else cfg.iter
        model, iters = run_iterations(
            init.ssn, init.sdn, data, icfg, cfg.filter, master_seed, use_shape_prior=ablation != "no_shape_prior"
        )
    ev = evaluate_split(model, init.sdn, data.val_images, data.val_gt)
    source = "sdn" if ablation == "no_iterative" else "ssn"
    other = "ssn" if source == "sdn" else "sdn"
    config_doc = cfg.to_dict() if config_doc is None else config_doc
    report = ExperimentReport(
        ablation=ablation,
        ratio=float(scheme.ratio),
        scheme=scheme.kind,
        case_ids=list(data.val_ids),
        dice=ev[source],
        mean_dice=_mean(ev[source]),
        mask_source=source,
        alt_dice=ev[other],
        alt_mean_dice=_mean(ev[other]),
        iterations=iters,
        init={
            "template_case_id": init.template.source_case_id,
            "template_confidence": init.template.confidence,
            "ssn_loss_curve": list(init.ssn.training_history),
            "sdn_loss_curve": list(init.sdn.training_history),
            "ssn_flags": list(init.ssn.flags),
            "sdn_checksum": init.sdn.checksum(),
            "crop": data.crop.to_dict(),
        },
        fingerprint=fingerprint(config_doc, master_seed, ablation, float(scheme.ratio), scheme.kind),
        config=config_doc,
        master_seed=int(master_seed),
    )
    return report, model


def run_experiment(
    train: Sequence[PhantomCase],
    val: Sequence[PhantomCase],
    cfg: PipelineConfig,
    ratios: Sequence[float],
    schemes: Sequence[str],
    ablations: Sequence[str],
    master_seed: int,
    base_scheme: AnnotationScheme | None = None,
    config_doc: dict | None = None,
) -> list[ExperimentReport]:
    """Every (ratio, scheme, ablation) cell, initialization shared per (ratio, scheme)."""
    if not ratios or not schemes or not ablations:
        raise InvalidArgumentError("experiment grid is empty")
    for a in ablations:
        if a not in ABLATIONS:
            raise InvalidArgumentError(f"unknown ablation {a!r}; expected one of {ABLATIONS}")
    base_scheme = base_scheme or AnnotationScheme()
    reports = []
    for ratio in ratios:
        for kind in schemes:
            scheme = replace(base_scheme, kind=kind, ratio=float(ratio))
            t0 = time.perf_counter()
            data = prepare_data(train, val, scheme, cfg.net, master_seed, cfg.crop_scale)
            init = run_initialization(data, cfg, master_seed)
            log.info("init ratio=%s scheme=%s done in %.1fs", ratio, kind, time.perf_counter() - t0)
            for ab in ablations:
                rep, _ = run_cell(ab, data, init, cfg, master_seed, scheme, config_doc)
                log.info("%s ratio=%s scheme=%s: mean dice %.4f", ab, ratio, kind, rep.mean_dice)
                reports.append(rep)
    return reports
