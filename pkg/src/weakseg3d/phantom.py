"""
Synthetic volumetric phantoms with known ground truth.

Four shape families stand in for the organs the method targets:

* ``tube`` and ``bifurcated_tube`` - an airway-like tube along z, optionally
  splitting into two branches in its lower half.
* ``ellipsoid`` - a smooth gland-like blob.
* ``lobed_ellipsoid`` - an ellipsoid with a few bulging lobes attached.

With ``neighbor=True`` every case also gets a distractor blob of foreground
intensity placed 1-3 voxels off the object surface, which a segmenter trained
on sparse labels tends to swallow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from weakseg3d.errors import InvalidArgumentError
from weakseg3d.volume import BinaryMask, VolumeImage, connected_components

FAMILIES = ("tube", "bifurcated_tube", "ellipsoid", "lobed_ellipsoid")
MARGIN = 2
SPLIT_OFFSETS = {"train": 0, "val": 100_000, "test": 200_000}
_SEED_MASK = (1 << 64) - 1


@dataclass
class PhantomSpec:
    """Generator settings.

    ``size_range`` is a fractional size draw: per-axis radius as a fraction of the
    half-extent for ellipsoids, and tube length as a fraction of the z-extent for
    tubes (tube radius scales with the same draw).
    """

    family: str = "ellipsoid"
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    size_range: tuple[float, float] = (0.45, 0.65)
    fg_intensity: tuple[float, float] = (1.0, 0.1)  # mean, jitter
    bg_intensity: tuple[float, float] = (0.0, 0.1)
    neighbor: bool = False
    noise_sigma: float = 0.25

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgumentError(f"unknown phantom family {self.family!r}")
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.size_range = tuple(float(s) for s in self.size_range)
        self.fg_intensity = tuple(float(v) for v in self.fg_intensity)
        self.bg_intensity = tuple(float(v) for v in self.bg_intensity)
        lo, hi = self.size_range
        if not (0 < lo <= hi <= 1):
            raise InvalidArgumentError(f"size_range must lie in (0, 1], got {self.size_range}")
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")
        gap = abs(self.fg_intensity[0] - self.bg_intensity[0])
        if not self.neighbor and gap < 2 * self.noise_sigma:
            raise InvalidArgumentError("fg and bg means must differ by at least 2 * noise_sigma")


@dataclass(eq=False)
class PhantomCase:
    image: VolumeImage
    gt: BinaryMask
    case_id: int
    seed: int
    distractor: BinaryMask | None = field(default=None, repr=False)


def _grid(dims):
    return np.indices(dims, dtype=np.float64)


def _ellipsoid(dims, center, radii, theta=0.0):
    z, y, x = _grid(dims)
    dz, dy, dx = z - center[0], y - center[1], x - center[2]
    c, s = math.cos(theta), math.sin(theta)
    u, v = c * dy + s * dx, -s * dy + c * dx
    return (dz / radii[0]) ** 2 + (u / radii[1]) ** 2 + (v / radii[2]) ** 2 <= 1.0


def _ball(dims, center, r):
    return _ellipsoid(dims, center, (r, r, r))


def _margin_box(dims):
    keep = np.zeros(dims, dtype=bool)
    keep[MARGIN : dims[0] - MARGIN, MARGIN : dims[1] - MARGIN, MARGIN : dims[2] - MARGIN] = True
    return keep


def _largest_component(m):
    labels, n = connected_components(m.astype(np.uint8), 6)
    if n <= 1:
        return m
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (1 + int(np.argmax(sizes)))


def _ellipsoid_shape(spec: PhantomSpec, rng, shrink=1.0):
    dims = spec.dims
    fr = rng.uniform(*spec.size_range, size=3)
    limit = np.array([d / 2.0 - MARGIN - 1.0 for d in dims])
    radii = np.minimum(fr * np.array(dims) / 2.0 * shrink, limit)
    radii = np.maximum(radii, 2.0)
    theta = rng.uniform(0, math.pi)
    reach = np.array([radii[0], max(radii[1:]), max(radii[1:])])
    center = []
    for d, r in zip(dims, reach):
        lo, hi = MARGIN + r, d - 1 - MARGIN - r
        center.append(rng.uniform(lo, hi) if hi > lo else (d - 1) / 2.0)
    return np.array(center), radii, theta


def _tube_centerline(spec: PhantomSpec, rng, z, reach):
    """In-plane center for each z, drifting gently; keeps ``reach`` clear of the margin."""
    _, h, w = spec.dims
    out = []
    for d in (h, w):
        amp = rng.uniform(0.5, 1.5)
        lo, hi = MARGIN + reach + amp, d - 1 - MARGIN - reach - amp
        base = rng.uniform(lo, hi) if hi > lo else (d - 1) / 2.0
        period = rng.uniform(1.0, 2.0) * spec.dims[0]
        phase = rng.uniform(0, 2 * math.pi)
        out.append(base + amp * np.sin(2 * math.pi * z / period + phase))
    return out


def _tube(spec: PhantomSpec, rng, bifurcate: bool):
    d, h, w = spec.dims
    f = rng.uniform(*spec.size_range)
    radius = max(2.0, 0.14 * f * min(h, w))
    length = max(8, int(round(f * (d - 2 * MARGIN))))
    z0 = MARGIN + int(rng.integers(0, d - 2 * MARGIN - length + 1))
    z1 = z0 + length - 1
    z = np.arange(d, dtype=np.float64)
    gz, gy, gx = _grid(spec.dims)
    gt = np.zeros(spec.dims, dtype=bool)
    if not bifurcate:
        cy, cx = _tube_centerline(spec, rng, z, radius)
        disc = (gy - cy[:, None, None]) ** 2 + (gx - cx[:, None, None]) ** 2 <= radius**2
        gt = disc & (gz >= z0) & (gz <= z1)
        return gt
    # trunk over the upper part, two diverging branches below; split above mid-depth
    rb = max(1.6, 0.8 * radius)
    spread = rb + rng.uniform(2.5, 4.0)
    zb = int(round(z0 + rng.uniform(0.25, 0.4) * (z1 - z0)))
    zb = min(zb, d // 2 - 3)
    cy, cx = _tube_centerline(spec, rng, z, radius + spread)
    phi = rng.uniform(-math.pi / 6, math.pi / 6)
    uy, ux = math.sin(phi), math.cos(phi)
    trunk = ((gy - cy[:, None, None]) ** 2 + (gx - cx[:, None, None]) ** 2 <= radius**2) & (gz >= z0) & (gz <= zb)
    gt |= trunk
    t = np.clip((z - zb) / max(1, z1 - zb), 0, 1)
    for sign in (-1.0, 1.0):
        by = cy + sign * spread * t * uy
        bx = cx + sign * spread * t * ux
        # taper from trunk radius to branch radius
        r = radius + (rb - radius) * np.minimum(1.0, 2 * t)
        branch = (gy - by[:, None, None]) ** 2 + (gx - bx[:, None, None]) ** 2 <= (r**2)[:, None, None]
        gt |= branch & (gz >= zb) & (gz <= z1)
    return gt


def _lobed(spec: PhantomSpec, rng):
    center, radii, theta = _ellipsoid_shape(spec, rng, shrink=0.85)
    gt = _ellipsoid(spec.dims, center, radii, theta)
    for _ in range(int(rng.integers(2, 4))):
        # lobe centered on the main surface along a random, mostly in-plane direction
        v = rng.normal(size=3) * np.array([0.4, 1.0, 1.0])
        v /= np.linalg.norm(v) + 1e-12
        k = 1.0 / math.sqrt(np.sum((v / radii) ** 2))
        c = center + k * v
        gt |= _ball(spec.dims, c, rng.uniform(0.35, 0.5) * float(radii.min()))
    gt &= _margin_box(spec.dims)
    return _largest_component(gt)


def _distractor(spec: PhantomSpec, rng, gt):
    """A blob 1-3 voxels off the gt surface, never touching gt."""
    dist = ndimage.distance_transform_edt(~gt)
    boundary = gt & ~ndimage.binary_erosion(gt)
    pts = np.argwhere(boundary)
    zc = np.argwhere(gt).mean(axis=0)
    keep = _margin_box(spec.dims)
    for _ in range(20):
        p = pts[int(rng.integers(len(pts)))].astype(np.float64)
        u = p - zc
        u[0] = 0.0
        n = np.linalg.norm(u)
        if n < 1e-6:
            continue
        u /= n
        gap = int(rng.integers(1, 4))
        r = rng.uniform(2.0, 3.5) * min(spec.dims) / 32.0
        blob = _ball(spec.dims, p + u * (gap + r), r) & (dist >= gap + 1) & keep
        if blob.sum() >= 8:
            return blob
    return np.zeros(spec.dims, dtype=bool)


def generate_case(spec: PhantomSpec, seed: int, case_id: int = 0) -> PhantomCase:
    """Deterministic phantom for ``(spec, seed)``."""
    if min(spec.dims) < 16:
        raise InvalidArgumentError(f"phantom dims must be >= 16 per axis, got {spec.dims}")
    seed = int(seed) & _SEED_MASK
    rng = np.random.default_rng(seed)
    if spec.family in ("tube", "bifurcated_tube"):
        gt = _tube(spec, rng, spec.family == "bifurcated_tube")
    elif spec.family == "ellipsoid":
        gt = _ellipsoid(spec.dims, *_ellipsoid_shape(spec, rng))
    else:
        gt = _lobed(spec, rng)
    gt &= _margin_box(spec.dims)

    distractor = _distractor(spec, rng, gt) if spec.neighbor else np.zeros(spec.dims, bool)
    fg = spec.fg_intensity[0] + rng.uniform(-1, 1) * spec.fg_intensity[1]
    bg = spec.bg_intensity[0] + rng.uniform(-1, 1) * spec.bg_intensity[1]
    image = np.where(gt | distractor, fg, bg)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    return PhantomCase(
        image=VolumeImage(image.astype(np.float32), spec.spacing),
        gt=BinaryMask(gt.astype(np.uint8), spec.spacing),
        case_id=int(case_id),
        seed=seed,
        distractor=BinaryMask(distractor.astype(np.uint8), spec.spacing) if spec.neighbor else None,
    )


def generate_dataset(
    spec: PhantomSpec, n_train: int, n_val: int, n_test: int, seed: int
) -> tuple[list[PhantomCase], list[PhantomCase], list[PhantomCase]]:
    """Train/val/test splits; case ``i`` of a split uses seed ``seed + offset + i``."""
    if n_train < 1 or n_val < 1 or n_test < 0:
        raise InvalidArgumentError("need n_train >= 1, n_val >= 1, n_test >= 0")
    out = []
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        off = SPLIT_OFFSETS[split]
        out.append([generate_case(spec, seed + off + i, case_id=off + i) for i in range(n)])
    return out[0], out[1], out[2]
