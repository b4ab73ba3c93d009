"""
Volumetric containers and the geometric / morphological primitives built on them.

All arrays are indexed ``(z, y, x)``. Masks are ``uint8``; images are ``float32``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, TypeVar, Union

import numpy as np
from scipy import ndimage

from weakseg3d.errors import InvalidArgumentError, InvalidInputError

UNLABELED = 255

Spacing = tuple[float, float, float]


def _check_spacing(spacing) -> Spacing:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(math.isfinite(s) and s > 0 for s in sp):
        raise InvalidArgumentError(f"spacing must be three finite positive reals, got {spacing!r}")
    return sp  # type: ignore[return-value]


def _check_3d(data: np.ndarray):
    if data.ndim != 3 or min(data.shape) < 1:
        raise InvalidArgumentError(f"expected a non-empty 3D array, got shape {data.shape}")


@dataclass(eq=False)
class VolumeImage:
    """Dense scalar field with physical voxel spacing in millimeters."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        _check_3d(self.data)
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(eq=False)
class BinaryMask:
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype == bool:
            data = data.astype(np.uint8)
        elif not np.isin(data, (0, 1)).all():
            raise InvalidArgumentError("binary mask voxels must be 0 or 1")
        self.data = np.ascontiguousarray(data, dtype=np.uint8)
        _check_3d(self.data)
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def bool(self) -> np.ndarray:
        return self.data.astype(bool)


@dataclass(eq=False)
class TriLabelMask:
    """Per-voxel weak label: 0 background, 1 foreground, ``UNLABELED`` (255) unknown."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.isin(data, (0, 1, UNLABELED)).all():
            raise InvalidArgumentError("tri-label voxels must be 0, 1 or 255")
        self.data = np.ascontiguousarray(data, dtype=np.uint8)
        _check_3d(self.data)
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def labeled(self) -> np.ndarray:
        return self.data != UNLABELED

    def counts(self) -> tuple[int, int]:
        """(number labeled background, number labeled foreground)."""
        return int((self.data == 0).sum()), int((self.data == 1).sum())


@dataclass(eq=False)
class ProbabilityVolume:
    """Per-voxel foreground probability in [0, 1]."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        _check_3d(self.data)
        if not (np.all(self.data >= 0) and np.all(self.data <= 1)):
            raise InvalidArgumentError("probabilities must lie in [0, 1]")
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def threshold(self, level: float = 0.5) -> BinaryMask:
        """Strict ``p > level``."""
        return BinaryMask((self.data > level).astype(np.uint8), self.spacing)


Volume = Union[VolumeImage, BinaryMask, TriLabelMask]
V = TypeVar("V", VolumeImage, BinaryMask, TriLabelMask)


@dataclass(frozen=True)
class BoundingBox3:
    """Inclusive voxel box; ``lo`` and ``hi`` are ``(z, y, x)``."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise InvalidArgumentError(f"box lo {self.lo} exceeds hi {self.hi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))  # type: ignore[return-value]

    @classmethod
    def of(cls, where: np.ndarray) -> BoundingBox3 | None:
        """Tight box around the nonzero voxels of ``where``, or None if there are none."""
        idx = np.nonzero(where)
        if idx[0].size == 0:
            return None
        return cls(tuple(int(i.min()) for i in idx), tuple(int(i.max()) for i in idx))

    def union(self, other: BoundingBox3) -> BoundingBox3:
        return BoundingBox3(
            tuple(min(a, b) for a, b in zip(self.lo, other.lo)),
            tuple(max(a, b) for a, b in zip(self.hi, other.hi)),
        )

    def intersect(self, other: BoundingBox3) -> BoundingBox3 | None:
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        if any(a > b for a, b in zip(lo, hi)):
            return None
        return BoundingBox3(lo, hi)

    def scaled(self, factor: float) -> BoundingBox3:
        """Grow (or shrink) each extent by ``factor`` about the box center.

        New extents round half-up, minimum 1. An odd surplus goes to the high side.
        """
        lo, hi = [], []
        for a, b in zip(self.lo, self.hi):
            e = b - a + 1
            new = max(1, int(math.floor(e * factor + 0.5)))
            start = a - (new - e) // 2 if new >= e else a + (e - new) // 2
            lo.append(start)
            hi.append(start + new - 1)
        return BoundingBox3(tuple(lo), tuple(hi))

    @staticmethod
    def full(dims: Sequence[int]) -> BoundingBox3:
        return BoundingBox3((0, 0, 0), tuple(int(d) - 1 for d in dims))


def _like(vol: V, data: np.ndarray, spacing=None) -> V:
    return type(vol)(data, vol.spacing if spacing is None else spacing)


# ---------------------------------------------------------------------------
# resampling and cropping
# ---------------------------------------------------------------------------


def _round_half_up(x):
    return np.floor(np.asarray(x) + 0.5)


def resample(vol: V, target_spacing: Sequence[float], mode: str | None = None) -> V:
    """Resample onto a new voxel grid so that voxel centers span the same physical extent.

    Masks are always nearest-neighbor; images default to trilinear.
    """
    target = _check_spacing(target_spacing)
    if mode not in (None, "nearest", "trilinear"):
        raise InvalidArgumentError(f"unknown resample mode {mode!r}")
    if not isinstance(vol, VolumeImage):
        mode = "nearest"
    elif mode is None:
        mode = "trilinear"

    out = vol.data
    for axis, (n, s, t) in enumerate(zip(vol.dims, vol.spacing, target)):
        m = max(1, int(_round_half_up(n * s / t)))
        if m == n and s == t:
            continue
        src = (np.arange(m, dtype=np.float64) + 0.5) * (t / s) - 0.5
        if mode == "nearest":
            idx = np.clip(_round_half_up(src).astype(np.int64), 0, n - 1)
            out = np.take(out, idx, axis=axis)
        else:
            src = np.clip(src, 0.0, n - 1)
            i0 = np.floor(src).astype(np.int64)
            i1 = np.minimum(i0 + 1, n - 1)
            frac = src - i0
            shape = [1, 1, 1]
            shape[axis] = m
            frac = frac.reshape(shape)
            a = np.take(out, i0, axis=axis).astype(np.float64)
            b = np.take(out, i1, axis=axis).astype(np.float64)
            out = a * (1.0 - frac) + b * frac
    if isinstance(vol, VolumeImage):
        out = out.astype(np.float32)
    return _like(vol, out, target)


def crop_to_box(vol: V, box: BoundingBox3, fill=0) -> V:
    """Extract ``box`` from ``vol``; any part of the box outside the volume is ``fill``."""
    out = np.full(box.shape, fill, dtype=vol.data.dtype)
    inside = box.intersect(BoundingBox3.full(vol.dims))
    if inside is not None:
        src = tuple(slice(a, b + 1) for a, b in zip(inside.lo, inside.hi))
        dst = tuple(slice(a - o, b - o + 1) for a, b, o in zip(inside.lo, inside.hi, box.lo))
        out[dst] = vol.data[src]
    return _like(vol, out)


def centered_box(dims: Sequence[int], target: Sequence[int]) -> BoundingBox3:
    """Box of size ``target`` sharing its center with a volume of size ``dims``."""
    lo = tuple((int(d) - int(t)) // 2 for d, t in zip(dims, target))
    return BoundingBox3(lo, tuple(a + int(t) - 1 for a, t in zip(lo, target)))


@dataclass
class PriorCrop:
    """Dataset-wide crop geometry: common spacing, aligned size, and crop box in aligned space."""

    spacing: Spacing
    aligned_dims: tuple[int, int, int]
    box: BoundingBox3

    def apply(self, vol: V, fill=None) -> V:
        if fill is None:
            fill = float(np.median(vol.data)) if isinstance(vol, VolumeImage) else 0
        vol = resample(vol, self.spacing)
        vol = crop_to_box(vol, centered_box(vol.dims, self.aligned_dims), fill)
        return crop_to_box(vol, self.box, fill)

    def to_dict(self) -> dict:
        return {
            "spacing": list(self.spacing),
            "aligned_dims": list(self.aligned_dims),
            "box_lo": list(self.box.lo),
            "box_hi": list(self.box.hi),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PriorCrop:
        return cls(
            tuple(d["spacing"]),
            tuple(d["aligned_dims"]),
            BoundingBox3(tuple(d["box_lo"]), tuple(d["box_hi"])),
        )


def plan_prior_crop(
    cases: Sequence[tuple[VolumeImage, TriLabelMask]],
    scale: float = 1.2,
    target_spacing: Sequence[float] | None = None,
    clamp_to_extent: bool = False,
) -> PriorCrop:
    """Work out the shared crop from the union box of every labeled (non-u) voxel."""
    if not cases:
        raise InvalidInputError("prior crop needs at least one case")
    spacing = _check_spacing(target_spacing) if target_spacing is not None else cases[0][0].spacing
    labels = [resample(lab, spacing) for _, lab in cases]
    aligned = tuple(max(lab.dims[a] for lab in labels) for a in range(3))
    union = None
    for lab in labels:
        lab = crop_to_box(lab, centered_box(lab.dims, aligned), 0)
        box = BoundingBox3.of(lab.labeled())
        if box is None:
            continue
        union = box if union is None else union.union(box)
    if union is None:
        raise InvalidInputError("every case is entirely unlabeled")
    box = union.scaled(scale)
    if clamp_to_extent:
        box = box.intersect(BoundingBox3.full(aligned))  # never empty: union lies inside
    return PriorCrop(spacing, aligned, box)  # type: ignore[arg-type]


def prior_crop_dataset(
    cases: Sequence[tuple[VolumeImage, TriLabelMask]],
    scale: float = 1.2,
    target_spacing: Sequence[float] | None = None,
    clamp_to_extent: bool = False,
) -> list[tuple[VolumeImage, TriLabelMask]]:
    """Resample, center-align, and crop every case to the shared weak-annotation box.

    Padding added to labels is background (it lies outside every loose box).
    """
    plan = plan_prior_crop(cases, scale, target_spacing, clamp_to_extent)
    return [(plan.apply(img), plan.apply(lab, fill=0)) for img, lab in cases]


# ---------------------------------------------------------------------------
# morphology
# ---------------------------------------------------------------------------


def structuring_element(connectivity: int = 6, planar: bool = False) -> np.ndarray:
    if connectivity not in (6, 26):
        raise InvalidArgumentError(f"connectivity must be 6 or 26, got {connectivity}")
    rank_conn = 1 if connectivity == 6 else 2
    if planar:
        return ndimage.generate_binary_structure(2, rank_conn)[None]
    return ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)


def morph(
    mask: BinaryMask,
    kind: str,
    iterations: int = 1,
    connectivity: int = 6,
    planar: bool = False,
) -> BinaryMask:
    """Binary dilation, erosion or closing with a unit cross (or cube) element.

    Closing is computed on a padded canvas so that it never removes voxels at the
    volume border; erosion treats outside voxels as background.
    """
    if int(iterations) < 1:
        raise InvalidArgumentError("iterations must be >= 1")
    k = int(iterations)
    se = structuring_element(connectivity, planar)
    m = mask.bool()
    if kind == "dilate":
        out = ndimage.binary_dilation(m, se, iterations=k)
    elif kind == "erode":
        out = ndimage.binary_erosion(m, se, iterations=k, border_value=0)
    elif kind == "close":
        pz = 0 if planar else k
        padded = np.pad(m, ((pz, pz), (k, k), (k, k)))
        padded = ndimage.binary_dilation(padded, se, iterations=k)
        padded = ndimage.binary_erosion(padded, se, iterations=k, border_value=0)
        out = padded[pz : pz + m.shape[0], k : k + m.shape[1], k : k + m.shape[2]]
    else:
        raise InvalidArgumentError(f"unknown morphology kind {kind!r}")
    return BinaryMask(out.astype(np.uint8), mask.spacing)


def connected_components(mask: BinaryMask | np.ndarray, connectivity: int = 6) -> tuple[np.ndarray, int]:
    """Label connected foreground. Labels are 1..count in first-encounter raster order."""
    data = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask)
    se = structuring_element(connectivity) if data.ndim == 3 else ndimage.generate_binary_structure(
        data.ndim, 1 if connectivity == 6 else data.ndim
    )
    labels, count = ndimage.label(data.astype(bool), structure=se)
    return labels.astype(np.int32), int(count)


# ---------------------------------------------------------------------------
# spatial transform
# ---------------------------------------------------------------------------


def rotation_matrix(rotation_deg: Sequence[float]) -> np.ndarray:
    """Rotation acting on ``(z, y, x)`` column vectors.

    ``rotation_deg = (about_z, about_y, about_x)``. A positive angle about z turns
    +x toward +y; the others follow the right-hand rule in their own planes.
    Composition order is ``Rz @ Ry @ Rx``.
    """
    az, ay, ax = (math.radians(float(a)) for a in rotation_deg)
    cz, sz = math.cos(az), math.sin(az)
    cy, sy = math.cos(ay), math.sin(ay)
    cx, sx = math.cos(ax), math.sin(ax)
    # rows/cols ordered (z, y, x)
    rz = np.array([[1, 0, 0], [0, cz, sz], [0, -sz, cz]], dtype=np.float64)
    ry = np.array([[cy, 0, -sy], [0, 1, 0], [sy, 0, cy]], dtype=np.float64)
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]], dtype=np.float64)
    return rz @ ry @ rx


def spatial_transform(
    mask: BinaryMask,
    rotation: Sequence[float] = (0.0, 0.0, 0.0),
    translation: Sequence[float] = (0.0, 0.0, 0.0),
    scale: float = 1.0,
) -> BinaryMask:
    """Rotate and scale about the volume center, then translate (all in voxels).

    Sampling is inverse-mapped nearest-neighbor, so the output stays binary.
    Samples falling outside the input are background.
    """
    if not scale > 0:
        raise InvalidArgumentError(f"scale must be positive, got {scale}")
    dims = np.array(mask.dims)
    center = (dims - 1) / 2.0
    a = rotation_matrix(rotation) * float(scale)
    inv = np.linalg.inv(a)
    grid = np.indices(mask.dims, dtype=np.float64).reshape(3, -1)
    rel = grid - center[:, None] - np.asarray(translation, dtype=np.float64)[:, None]
    src = inv @ rel + center[:, None]
    idx = _round_half_up(src).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < dims[:, None]), axis=0)
    out = np.zeros(idx.shape[1], dtype=np.uint8)
    out[ok] = mask.data[idx[0, ok], idx[1, ok], idx[2, ok]]
    return BinaryMask(out.reshape(mask.dims), mask.spacing)
