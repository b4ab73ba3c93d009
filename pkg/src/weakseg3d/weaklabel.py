"""
Sparse weak annotations simulated from full ground-truth masks.

A *hybrid* slice label is a long-axis foreground scribble plus a loose box around
all foreground in the slice. Labeled slices always include the first and last
foreground slices; everything outside the loose boxes and every slice beyond the
foreground z-range becomes background. Alternative schemes (star scribble,
dilation scribble, tight box) share the same slice selection and scribbles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from weakseg3d.errors import InvalidArgumentError, InvalidInputError
from weakseg3d.volume import UNLABELED, BinaryMask, TriLabelMask

KINDS = ("hybrid", "scribble_star", "scribble_dilation", "tight_box_only")
N_AXES = 6  # candidate long axes, 30 degrees apart


@dataclass(frozen=True)
class AnnotationScheme:
    kind: str = "hybrid"
    ratio: float = 0.3
    loose_offset_range: tuple[int, int] = (10, 20)
    dilation_range: tuple[int, int] = (20, 50)
    scribble_width: int = 3
    endpoint_margin: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown annotation kind {self.kind!r}")
        if not (0 < self.ratio <= 1):
            raise InvalidArgumentError(f"ratio must be in (0, 1], got {self.ratio}")
        for name in ("loose_offset_range", "dilation_range"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise InvalidArgumentError(f"{name} must be an ordered non-negative range")
        if self.scribble_width < 1 or self.scribble_width % 2 == 0:
            raise InvalidArgumentError("scribble_width must be a positive odd integer")
        if self.endpoint_margin < 0:
            raise InvalidArgumentError("endpoint_margin must be >= 0")


@dataclass
class Scribble:
    """Long-axis scribble on one slice, with the geometry that produced it."""

    pixels: np.ndarray  # bool (H, W)
    centerline: list[tuple[int, int]]
    angle_index: int
    component: np.ndarray  # bool (H, W), the labeled component
    collapsed: bool  # retraction consumed the whole segment
    candidate_lengths: list[float] = field(default_factory=list)
    center: tuple[float, float] = (0.0, 0.0)
    span: tuple[int, int] = (0, 0)  # line parameter range of the centerline


@dataclass
class HybridSliceLabel:
    slice_index: int
    scribble: Scribble
    box: tuple[int, int, int, int]  # (y0, x0, y1, x1) inclusive
    tight_box: tuple[int, int, int, int]
    clamped: tuple[bool, bool, bool, bool]

    @property
    def scribble_pixels(self) -> set[tuple[int, int]]:
        return {(int(y), int(x)) for y, x in np.argwhere(self.scribble.pixels)}


@dataclass
class WeakAnnotation:
    label: TriLabelMask
    slices: list[HybridSliceLabel]
    scheme: AnnotationScheme


def _half_up(v) -> int:
    return int(math.floor(v + 0.5))


def foreground_slices(gt: BinaryMask | np.ndarray) -> np.ndarray:
    data = gt.data if isinstance(gt, BinaryMask) else np.asarray(gt)
    return np.nonzero(data.reshape(data.shape[0], -1).any(axis=1))[0]


def select_slices(gt: BinaryMask, ratio: float, seed: int) -> list[int]:
    """First and last foreground slices plus a random subset of those in between.

    The total is ``max(2, round(ratio * |F|))`` (1 when only one slice has foreground).
    """
    f = foreground_slices(gt)
    if f.size == 0:
        raise InvalidInputError("ground truth is empty")
    if not (0 < ratio <= 1):
        raise InvalidArgumentError(f"ratio must be in (0, 1], got {ratio}")
    if f.size == 1:
        return [int(f[0])]
    count = min(f.size, max(2, _half_up(ratio * f.size)))
    rng = np.random.default_rng(seed)
    interior = rng.choice(f[1:-1], size=count - 2, replace=False) if count > 2 else []
    return sorted(int(z) for z in (f[0], f[-1], *interior))


def _components_2d(slice_fg: np.ndarray):
    return ndimage.label(slice_fg, structure=ndimage.generate_binary_structure(2, 1))


def _ray_extent(comp: np.ndarray, center, d, sign) -> int:
    """Number of unit steps from the center along ``sign * d`` that stay inside ``comp``."""
    h, w = comp.shape
    t = 0
    while True:
        y = _half_up(center[0] + sign * (t + 1) * d[0])
        x = _half_up(center[1] + sign * (t + 1) * d[1])
        if not (0 <= y < h and 0 <= x < w and comp[y, x]):
            return t
        t += 1


def long_axis_scribble(
    slice_fg: np.ndarray, seed: int, width: int = 3, endpoint_margin: int = 5
) -> Scribble:
    """Longest of six lines through a component's mass center, retracted and thickened.

    Candidate lines are rasterized with unit steps from the center outward in both
    directions and stop at the first pixel outside the component. Ties go to the
    lowest angle. When the mass center falls outside the component, the nearest
    component pixel serves as the line center.
    """
    slice_fg = np.asarray(slice_fg, dtype=bool)
    labels, n = _components_2d(slice_fg)
    if n == 0:
        raise InvalidInputError("slice has no foreground")
    rng = np.random.default_rng(seed)
    comp = labels == (1 + int(rng.integers(n)) if n > 1 else 1)

    pts = np.argwhere(comp)
    center = pts.mean(axis=0)
    if not comp[_half_up(center[0]), _half_up(center[1])]:
        center = pts[np.argmin(((pts - center) ** 2).sum(axis=1))].astype(np.float64)

    best = None
    lengths = []
    for k in range(N_AXES):
        a = math.radians(30 * k)
        d = (math.sin(a), math.cos(a))
        fwd, back = _ray_extent(comp, center, d, 1), _ray_extent(comp, center, d, -1)
        p = (_half_up(center[0] + fwd * d[0]), _half_up(center[1] + fwd * d[1]))
        q = (_half_up(center[0] - back * d[0]), _half_up(center[1] - back * d[1]))
        length = math.hypot(p[0] - q[0], p[1] - q[1])
        lengths.append(length)
        if best is None or length > best[0]:
            best = (length, k, d, fwd, back)
    _, k, d, fwd, back = best

    lo, hi = -back + endpoint_margin, fwd - endpoint_margin
    collapsed = lo > hi
    if collapsed:
        mid = (fwd - back) // 2
        lo = hi = mid
    line = []
    for t in range(lo, hi + 1):
        px = (_half_up(center[0] + t * d[0]), _half_up(center[1] + t * d[1]))
        if not line or line[-1] != px:
            line.append(px)

    pixels = np.zeros_like(comp)
    normal = (d[1], -d[0])
    half = width // 2
    for y, x in line:
        for s in range(-half, half + 1):
            yy, xx = _half_up(y + s * normal[0]), _half_up(x + s * normal[1])
            if 0 <= yy < comp.shape[0] and 0 <= xx < comp.shape[1]:
                pixels[yy, xx] = True
    pixels &= comp
    return Scribble(pixels, line, k, comp, collapsed, lengths, (float(center[0]), float(center[1])), (lo, hi))


def tight_box_2d(slice_fg: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(slice_fg)
    if ys.size == 0:
        raise InvalidInputError("slice has no foreground")
    return int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max())


def loose_box(
    slice_fg: np.ndarray, seed: int, offset_range: tuple[int, int] = (10, 20)
) -> tuple[tuple[int, int, int, int], tuple[bool, bool, bool, bool]]:
    """Tight box around all slice foreground, each edge pushed out by a uniform offset.

    Returns the box and a per-edge flag telling whether the slice border clamped it.
    """
    y0, x0, y1, x1 = tight_box_2d(slice_fg)
    h, w = np.shape(slice_fg)
    off = np.random.default_rng(seed).integers(offset_range[0], offset_range[1] + 1, size=4)
    raw = (y0 - off[0], x0 - off[1], y1 + off[2], x1 + off[3])
    box = (max(0, raw[0]), max(0, raw[1]), min(h - 1, raw[2]), min(w - 1, raw[3]))
    clamped = tuple(bool(a != b) for a, b in zip(raw, box))
    return box, clamped  # type: ignore[return-value]


def _box_mask(shape, box) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[box[0] : box[2] + 1, box[1] : box[3] + 1] = True
    return m


def _outer_ring(shape, box, width) -> np.ndarray:
    """Pixels within ``width`` of the box, outside it."""
    y0, x0, y1, x1 = box
    grown = (y0 - width, x0 - width, y1 + width, x1 + width)
    grown = (max(0, grown[0]), max(0, grown[1]), min(shape[0] - 1, grown[2]), min(shape[1] - 1, grown[3]))
    return _box_mask(shape, grown) & ~_box_mask(shape, box)


def _slice_seed(seed: int, z: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & ((1 << 64) - 1), int(z), stream])


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


def annotate(gt: BinaryMask, scheme: AnnotationScheme, seed: int) -> WeakAnnotation:
    """Build the weak label for ``gt`` and keep the per-slice geometry for inspection."""
    data = gt.bool()
    f = foreground_slices(data)
    if f.size == 0:
        raise InvalidInputError("ground truth is empty")
    out = np.full(gt.dims, UNLABELED, dtype=np.uint8)
    out[: f[0]] = 0
    out[f[-1] + 1 :] = 0

    slices = []
    for z in select_slices(gt, scheme.ratio, seed):
        fg = data[z]
        shape = fg.shape
        scr = long_axis_scribble(
            fg, _seed_int(_slice_seed(seed, z, 0)), scheme.scribble_width, scheme.endpoint_margin
        )
        box, clamped = loose_box(fg, _seed_int(_slice_seed(seed, z, 1)), scheme.loose_offset_range)
        tight = tight_box_2d(fg)
        sl = out[z]
        if scheme.kind == "hybrid":
            sl[~_box_mask(shape, box)] = 0
        elif scheme.kind == "scribble_star":
            sl[_outer_ring(shape, box, scheme.scribble_width)] = 0
        elif scheme.kind == "scribble_dilation":
            k = int(np.random.default_rng(_slice_seed(seed, z, 2)).integers(
                scheme.dilation_range[0], scheme.dilation_range[1] + 1
            ))
            cross = ndimage.generate_binary_structure(2, 1)
            outer = ndimage.binary_dilation(fg, cross, iterations=k + scheme.scribble_width // 2 + 1)
            inner = ndimage.binary_dilation(fg, cross, iterations=max(1, k - scheme.scribble_width // 2))
            sl[outer & ~inner] = 0
        else:  # tight_box_only
            sl[~_box_mask(shape, tight)] = 0
        if scheme.kind != "tight_box_only":
            sl[scr.pixels] = 1
        slices.append(HybridSliceLabel(z, scr, box, tight, clamped))
    return WeakAnnotation(TriLabelMask(out, gt.spacing), slices, scheme)


def compose_weak_label(gt: BinaryMask, scheme: AnnotationScheme, seed: int) -> TriLabelMask:
    return annotate(gt, scheme, seed).label
