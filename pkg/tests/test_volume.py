import itertools
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weakseg3d.errors import InvalidArgumentError, InvalidInputError
from weakseg3d.volume import (
    UNLABELED,
    BinaryMask,
    BoundingBox3,
    TriLabelMask,
    VolumeImage,
    connected_components,
    crop_to_box,
    morph,
    prior_crop_dataset,
    resample,
    spatial_transform,
)

small_masks = arrays(np.uint8, st.tuples(*[st.integers(1, 6)] * 3), elements=st.integers(0, 1))


# --- oracles ---------------------------------------------------------------


def neighbor_union(m, iterations, connectivity=6):
    """Dilation by explicit per-voxel neighbor scans."""
    offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if any(o)]
    if connectivity == 6:
        offs = [o for o in offs if sum(map(abs, o)) == 1]
    cur = m.astype(bool)
    for _ in range(iterations):
        nxt = cur.copy()
        for z, y, x in zip(*np.nonzero(cur)):
            for dz, dy, dx in offs:
                p = (z + dz, y + dy, x + dx)
                if all(0 <= p[i] < m.shape[i] for i in range(3)):
                    nxt[p] = True
        cur = nxt
    return cur.astype(np.uint8)


def flood_fill_labels(m, connectivity=6):
    offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if any(o)]
    if connectivity == 6:
        offs = [o for o in offs if sum(map(abs, o)) == 1]
    labels = np.zeros(m.shape, dtype=np.int32)
    n = 0
    for start in itertools.product(*map(range, m.shape)):
        if not m[start] or labels[start]:
            continue
        n += 1
        labels[start] = n
        queue = deque([start])
        while queue:
            z, y, x = queue.popleft()
            for dz, dy, dx in offs:
                p = (z + dz, y + dy, x + dx)
                if all(0 <= p[i] < m.shape[i] for i in range(3)) and m[p] and not labels[p]:
                    labels[p] = n
                    queue.append(p)
    return labels, n


# --- resample --------------------------------------------------------------


@pytest.mark.parametrize("mode", ["nearest", "trilinear"])
def test_resample_identity_is_bit_exact(mode):
    rng = np.random.default_rng(0)
    img = VolumeImage(rng.standard_normal((5, 6, 7)), (2.0, 1.0, 0.5))
    out = resample(img, (2.0, 1.0, 0.5), mode)
    assert out.data.tobytes() == img.data.tobytes()
    m = BinaryMask(rng.integers(0, 2, (5, 6, 7)), (2.0, 1.0, 0.5))
    assert np.array_equal(resample(m, m.spacing, mode).data, m.data)


@pytest.mark.parametrize("mode", ["nearest", "trilinear"])
@pytest.mark.parametrize("target", [(0.7, 1.3, 2.0), (3.0, 3.0, 3.0), (0.25, 1.0, 1.0)])
def test_resample_constant_stays_constant(mode, target):
    img = VolumeImage(np.full((6, 5, 4), 3.25), (1.0, 1.0, 1.0))
    out = resample(img, target, mode)
    assert np.all(out.data == np.float32(3.25))


def test_resample_nearest_matches_voxel_center_lookup():
    data = np.zeros((4, 4, 4), np.uint8)
    data[1:3, 1:3, 1:3] = 1
    m = BinaryMask(data, (1.0, 1.0, 1.0))
    out = resample(m, (1.0, 1.0, 0.5))
    assert out.dims == (4, 4, 8)
    expected = np.zeros(out.dims, np.uint8)
    for z, y, x in itertools.product(*map(range, out.dims)):
        # which input voxel contains this output voxel's physical center
        cx = (x + 0.5) * 0.5
        expected[z, y, x] = data[z, y, int(math.floor(cx / 1.0))]
    assert np.array_equal(out.data, expected)


def test_resample_output_dims_and_errors():
    img = VolumeImage(np.zeros((10, 3, 1)), (1.0, 1.0, 1.0))
    assert resample(img, (3.0, 2.0, 5.0)).dims == (3, 2, 1)  # round(3.33), round(1.5) half-up, min 1
    with pytest.raises(InvalidArgumentError):
        resample(img, (1.0, 0.0, 1.0))
    with pytest.raises(InvalidArgumentError):
        resample(img, (1.0, -2.0, 1.0))


def test_masks_always_use_nearest():
    m = BinaryMask(np.eye(4, dtype=np.uint8)[None].repeat(2, 0))
    out = resample(m, (1.0, 0.3, 0.7), mode="trilinear")
    assert set(np.unique(out.data)) <= {0, 1}


# --- crop ------------------------------------------------------------------


def test_crop_full_extent_is_identity():
    img = VolumeImage(np.random.default_rng(1).standard_normal((4, 5, 6)))
    out = crop_to_box(img, BoundingBox3.full(img.dims))
    assert np.array_equal(out.data, img.data)


def test_crop_outside_is_all_fill():
    img = VolumeImage(np.ones((4, 4, 4)))
    out = crop_to_box(img, BoundingBox3((10, 10, 10), (12, 13, 11)), fill=-7.0)
    assert out.dims == (3, 4, 2)
    assert np.all(out.data == -7.0)


def test_crop_interior_matches_direct_indexing():
    data = np.arange(8**3, dtype=np.float32).reshape(8, 8, 8)
    out = crop_to_box(VolumeImage(data), BoundingBox3((2, 2, 2), (5, 5, 5)))
    assert out.dims == (4, 4, 4)
    for z, y, x in itertools.product(range(4), repeat=3):
        assert out.data[z, y, x] == data[z + 2, y + 2, x + 2]


@settings(max_examples=50, deadline=None)
@given(
    small_masks,
    st.tuples(*[st.integers(-4, 4)] * 3),
    st.tuples(*[st.integers(1, 8)] * 3),
)
def test_crop_then_inverse_crop_restores_in_bounds_region(data, lo, size):
    m = BinaryMask(data)
    box = BoundingBox3(lo, tuple(a + s - 1 for a, s in zip(lo, size)))
    cropped = crop_to_box(m, box, fill=0)
    inverse = BoundingBox3(tuple(-a for a in lo), tuple(d - 1 - a for d, a in zip(m.dims, lo)))
    back = crop_to_box(cropped, inverse, fill=0)
    inside = box.intersect(BoundingBox3.full(m.dims))
    if inside is None:
        assert not back.data.any()
        return
    sl = tuple(slice(a, b + 1) for a, b in zip(inside.lo, inside.hi))
    assert np.array_equal(back.data[sl], m.data[sl])


# --- prior crop ------------------------------------------------------------


def _tri(dims, fill=UNLABELED):
    return np.full(dims, fill, np.uint8)


def test_prior_crop_full_span_scales_and_pads_symmetrically():
    img = VolumeImage(np.ones((10, 10, 10)))
    lab = TriLabelMask(_tri((10, 10, 10), 0))
    [(ci, cl)] = prior_crop_dataset([(img, lab)])
    assert ci.dims == (12, 12, 12)
    # one voxel of padding per side, labeled background
    assert np.all(cl.data == 0)
    assert np.all(ci.data[1:11, 1:11, 1:11] == 1.0)


def test_prior_crop_union_box_matches_bruteforce_scan():
    dims = (20, 20, 20)
    a, b = _tri(dims), _tri(dims)
    a[2:5, 3:6, 4:7] = 1
    b[12:15, 14:17, 10:13] = 0
    cases = [(VolumeImage(np.zeros(dims)), TriLabelMask(a)), (VolumeImage(np.zeros(dims)), TriLabelMask(b))]
    lo = [min(np.nonzero(x != UNLABELED)[i].min() for x in (a, b)) for i in range(3)]
    hi = [max(np.nonzero(x != UNLABELED)[i].max() for x in (a, b)) for i in range(3)]
    extents = [h - l + 1 for l, h in zip(lo, hi)]
    out = prior_crop_dataset(cases)
    expected = tuple(int(math.floor(e * 1.2 + 0.5)) for e in extents)
    assert all(o[0].dims == expected and o[1].dims == expected for o in out)
    # both label cubes survive the crop intact
    assert (out[0][1].data == 1).sum() == 27
    assert (out[1][1].data == 0).sum() == 27


def test_prior_crop_single_slice_keeps_unit_thickness():
    lab = _tri((8, 8, 8))
    lab[3, 2:6, 2:6] = 1
    [(ci, cl)] = prior_crop_dataset([(VolumeImage(np.zeros((8, 8, 8))), TriLabelMask(lab))])
    assert ci.dims[0] == max(1, round(1.2 * 1))


def test_prior_crop_errors():
    with pytest.raises(InvalidInputError):
        prior_crop_dataset([])
    with pytest.raises(InvalidInputError):
        prior_crop_dataset([(VolumeImage(np.zeros((4, 4, 4))), TriLabelMask(_tri((4, 4, 4))))])


def test_prior_crop_clamped_never_exceeds_extent():
    img = VolumeImage(np.ones((10, 10, 10)))
    lab = TriLabelMask(_tri((10, 10, 10), 0))
    [(ci, _)] = prior_crop_dataset([(img, lab)], clamp_to_extent=True)
    assert ci.dims == (10, 10, 10)


def test_prior_crop_aligns_different_sizes():
    a = TriLabelMask(_tri((6, 8, 8), 0))
    b = TriLabelMask(_tri((8, 6, 10), 0))
    out = prior_crop_dataset([(VolumeImage(np.zeros(a.dims)), a), (VolumeImage(np.zeros(b.dims)), b)], scale=1.0)
    assert out[0][0].dims == out[1][0].dims == (8, 8, 10)


# --- morphology ------------------------------------------------------------


@pytest.mark.parametrize("kind", ["dilate", "erode", "close"])
def test_morph_of_empty_is_empty(kind):
    out = morph(BinaryMask(np.zeros((5, 5, 5), np.uint8)), kind, 2)
    assert not out.data.any()


def test_closing_fills_unit_hole():
    data = np.zeros((5, 5, 5), np.uint8)
    data[1:4, 1:4, 1:4] = 1
    data[2, 2, 2] = 0
    out = morph(BinaryMask(data), "close", 1, connectivity=6)
    expected = np.zeros_like(data)
    expected[1:4, 1:4, 1:4] = 1
    assert np.array_equal(out.data, expected)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("connectivity", [6, 26])
def test_dilation_matches_neighbor_union(seed, connectivity):
    data = (np.random.default_rng(seed).random((6, 6, 6)) < 0.1).astype(np.uint8)
    out = morph(BinaryMask(data), "dilate", 2, connectivity=connectivity)
    assert np.array_equal(out.data, neighbor_union(data, 2, connectivity))


def test_planar_dilation_stays_in_slice():
    data = np.zeros((5, 7, 7), np.uint8)
    data[2, 3, 3] = 1
    out = morph(BinaryMask(data), "dilate", 2, planar=True)
    assert out.data[2].sum() == 13  # L1 ball of radius 2 in 2D
    assert out.data[[0, 1, 3, 4]].sum() == 0


def test_morph_rejects_zero_iterations():
    with pytest.raises(InvalidArgumentError):
        morph(BinaryMask(np.zeros((3, 3, 3), np.uint8)), "dilate", 0)


@settings(max_examples=60, deadline=None)
@given(small_masks, st.integers(1, 3), st.sampled_from([6, 26]), st.booleans())
def test_morph_extensivity(data, k, conn, planar):
    m = BinaryMask(data)
    d = morph(m, "dilate", k, conn, planar).data
    e = morph(m, "erode", k, conn, planar).data
    c = morph(m, "close", k, conn, planar).data
    assert np.all(d >= m.data)
    assert np.all(e <= m.data)
    assert np.all(c >= m.data)


@settings(max_examples=60, deadline=None)
@given(small_masks, small_masks, st.integers(1, 2), st.sampled_from(["dilate", "erode", "close"]))
def test_morph_is_order_preserving(a, b, k, kind):
    shape = tuple(min(x, y) for x, y in zip(a.shape, b.shape))
    a = a[: shape[0], : shape[1], : shape[2]]
    b = b[: shape[0], : shape[1], : shape[2]]
    small, big = BinaryMask(a & b), BinaryMask(a | b)
    assert np.all(morph(small, kind, k).data <= morph(big, kind, k).data)


def test_closing_is_erode_of_dilate_away_from_border():
    rng = np.random.default_rng(3)
    data = np.zeros((12, 12, 12), np.uint8)
    data[4:8, 4:8, 4:8] = rng.integers(0, 2, (4, 4, 4))
    m = BinaryMask(data)
    expected = morph(morph(m, "dilate", 2), "erode", 2)
    assert np.array_equal(morph(m, "close", 2).data, expected.data)


# --- connected components --------------------------------------------------


def test_components_empty():
    labels, n = connected_components(BinaryMask(np.zeros((3, 3, 3), np.uint8)))
    assert n == 0 and not labels.any()


def test_components_scan_order():
    data = np.zeros((4, 4, 4), np.uint8)
    data[3, 0, 0] = 1
    data[0, 2, 3] = 1
    labels, n = connected_components(BinaryMask(data))
    assert n == 2
    assert labels[0, 2, 3] == 1 and labels[3, 0, 0] == 2


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("connectivity", [6, 26])
def test_components_match_flood_fill(seed, connectivity):
    data = (np.random.default_rng(seed).random((5, 5, 5)) < 0.35).astype(np.uint8)
    labels, n = connected_components(BinaryMask(data), connectivity)
    ref, ref_n = flood_fill_labels(data, connectivity)
    assert n == ref_n
    assert np.array_equal(labels, ref)


# --- spatial transform -----------------------------------------------------


def test_identity_transform_is_noop():
    data = (np.random.default_rng(0).random((7, 8, 9)) < 0.3).astype(np.uint8)
    out = spatial_transform(BinaryMask(data))
    assert np.array_equal(out.data, data)


def test_pure_translation():
    data = np.zeros((8, 8, 8), np.uint8)
    data[3, 3, 3] = 1
    out = spatial_transform(BinaryMask(data), translation=(0, 0, 2))
    assert out.data[3, 3, 5] == 1 and out.count() == 1


def test_quarter_turn_about_z_matches_inverse_map_lookup():
    data = np.zeros((6, 9, 9), np.uint8)
    data[2:4, 4, 1:7] = 1  # bar along x
    out = spatial_transform(BinaryMask(data), rotation=(90, 0, 0))
    cy = cx = 4.0
    expected = np.zeros_like(data)
    for z, y, x in itertools.product(*map(range, data.shape)):
        # invert x' = cx - (y - cy), y' = cy + (x - cx)
        sx = cx + (y - cy)
        sy = cy - (x - cx)
        ix, iy = int(round(sx)), int(round(sy))
        if 0 <= ix < 9 and 0 <= iy < 9:
            expected[z, y, x] = data[z, iy, ix]
    assert np.array_equal(out.data, expected)
    assert expected[2:4, 1:7, 4].all()  # bar now lies along y


def test_transform_rejects_nonpositive_scale():
    with pytest.raises(InvalidArgumentError):
        spatial_transform(BinaryMask(np.zeros((3, 3, 3), np.uint8)), scale=0.0)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.uint8, (4, 4, 4), elements=st.integers(0, 1)),
    st.tuples(*[st.integers(-3, 3)] * 3),
)
def test_translation_round_trip(core, t):
    data = np.zeros((10, 10, 10), np.uint8)
    data[3:7, 3:7, 3:7] = core
    m = BinaryMask(data)
    back = spatial_transform(spatial_transform(m, translation=t), translation=tuple(-v for v in t))
    assert np.array_equal(back.data, data)
