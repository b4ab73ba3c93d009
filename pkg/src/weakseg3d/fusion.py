"""
Uncertainty-filtered pseudo labels from the segmentation and denoised masks.

A voxel becomes a foreground pseudo label only if both masks call it foreground
and the segmentation probability clears ``sigma_fg``; background likewise needs
both masks to agree and a probability under ``sigma_bg``. Thresholds are
per-volume rank statistics.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from weakseg3d.errors import InvalidArgumentError
from weakseg3d.volume import UNLABELED, BinaryMask, ProbabilityVolume, TriLabelMask


@dataclass
class FilterConfig:
    fg_filter_fraction: float = 0.5
    bg_count_multiplier: float = 2.0

    def __post_init__(self):
        if not (0 <= self.fg_filter_fraction < 1):
            raise InvalidArgumentError("fg_filter_fraction must be in [0, 1)")
        if not self.bg_count_multiplier > 0:
            raise InvalidArgumentError("bg_count_multiplier must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Thresholds:
    sigma_fg: float
    sigma_bg: float

    def __post_init__(self):
        if not self.sigma_fg > self.sigma_bg:
            raise InvalidArgumentError(f"need sigma_fg > sigma_bg, got {self.sigma_fg} <= {self.sigma_bg}")


def compute_thresholds(p_s: ProbabilityVolume, m_s: BinaryMask, cfg: FilterConfig) -> Thresholds:
    """Rank-based thresholds.

    Predicted-foreground probabilities sorted ascending: sigma_fg is the K-th
    smallest with K = floor(fraction * N_fg), so exactly K values (more with ties)
    fail ``P > sigma_fg``. Predicted-background probabilities sorted descending:
    sigma_bg is the B-th largest with B = min(floor(multiplier * K), N_bg), so B
    values fail ``P < sigma_bg``. With nothing to filter the threshold sits at
    0.5 on that side.
    """
    if p_s.dims != m_s.dims:
        raise InvalidArgumentError("P_s and M_s dims differ")
    p = p_s.data.astype(np.float64).ravel()
    fgm = m_s.bool().ravel()
    fg, bg = np.sort(p[fgm]), -np.sort(-p[~fgm])
    if fg.size == 0:
        return Thresholds(1.0, 0.5)
    k = math.floor(cfg.fg_filter_fraction * fg.size)
    sigma_fg = float(fg[k - 1]) if k > 0 else 0.5
    b = min(math.floor(cfg.bg_count_multiplier * k), bg.size)
    sigma_bg = float(bg[b - 1]) if b > 0 else 0.5
    if not sigma_fg > sigma_bg:
        # only possible when P_s and M_s disagree about the 0.5 boundary
        sigma_bg = float(np.nextafter(sigma_fg, -np.inf))
    return Thresholds(sigma_fg, sigma_bg)


def make_pseudo_label(m_s: BinaryMask, m_d: BinaryMask, p_s: ProbabilityVolume, th: Thresholds) -> TriLabelMask:
    if not (m_s.dims == m_d.dims == p_s.dims):
        raise InvalidArgumentError("M_s, M_d and P_s must share dims")
    s, d, p = m_s.bool(), m_d.bool(), p_s.data
    y_fg = s & d & (p > th.sigma_fg)
    y_bg = ~s & ~d & (p < th.sigma_bg)
    assert not (y_fg & y_bg).any()
    out = np.full(m_s.dims, UNLABELED, dtype=np.uint8)
    out[y_fg] = 1
    out[y_bg] = 0
    return TriLabelMask(out, m_s.spacing)
