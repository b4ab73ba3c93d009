"""Acceptance suite. Each test records a one-line verdict that is printed at the end of the run."""

import json
import math
import time

import numpy as np
import pytest

from oracles import U, pseudo_label_oracle, random_instance, threshold_oracle
from weakseg3d.cli import main as cli_main
from weakseg3d.fusion import FilterConfig, Thresholds, compute_thresholds, make_pseudo_label
from weakseg3d.net import layers as L
from weakseg3d.net.gradcheck import finite_diff_check
from weakseg3d.net.unet import UNetConfig, UNetParameters
from weakseg3d.phantom import FAMILIES, PhantomSpec, generate_case, generate_dataset
from weakseg3d.pipeline import (
    ABLATIONS,
    PipelineConfig,
    prepare_data,
    run_cell,
    run_initialization,
    sdn_augmentation_ablation,
)
from weakseg3d.reporting import sdn_table_csv, sdn_table_text
from weakseg3d.volume import BinaryMask, ProbabilityVolume
from weakseg3d.weaklabel import KINDS, AnnotationScheme, annotate


# ---- 1


def test_c01_reproducibility_statement(acceptance):
    msg = (
        "published absolute Dice values need real CT/MRI data and full-scale training; "
        "not attempted, criteria 2-10 stand in"
    )
    acceptance(1, True, msg)


# ---- 2


def test_c02_gradient_fidelity(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    cfg = UNetConfig(levels=2, base_channels=4)
    params = UNetParameters.init(cfg, seed=2, dtype=np.float64)
    assert params.n_params() <= 10_000
    x = rng.normal(size=(1, 1, 8, 8, 8))
    y = rng.choice(np.array([0, 1, U], np.uint8), size=x.shape)
    fd = finite_diff_check(cfg, params, x, y)

    adj = 0.0
    for stride, k, pad in [(2, (3, 3, 3), 1), (2, (2, 2, 2), 0), (1, (3, 3, 3), 1), ((1, 2, 2), (3, 3, 3), 1)]:
        xs = rng.normal(size=(2, 8, 8, 8, 3))
        w = rng.normal(size=(5, 3, *k))
        y0 = L.conv3d(xs, w, stride, pad)
        ys = rng.normal(size=y0.shape)
        lhs = float(np.vdot(y0, ys))
        rhs = float(np.vdot(xs, L.conv_transpose3d(ys, w, stride, (8, 8, 8), pad)))
        adj = max(adj, abs(lhs - rhs) / max(1.0, abs(lhs)))
    dt = time.perf_counter() - t0
    ok = fd <= 1e-4 and adj <= 1e-10 and dt <= 120
    acceptance(2, ok, f"{params.n_params()} params, fd rel err {fd:.2e}, adjoint err {adj:.1e}, {dt:.0f}s")
    assert ok


# ---- 3


def test_c03_pseudo_label_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cfg = FilterConfig()
    bad = 0
    for i in range(500):
        p, m_s, m_d = random_instance(rng, max_side=6)
        if i % 2:
            # arbitrary ordered thresholds, not tied to the data
            a, b = sorted(rng.random(2))
            th = Thresholds(float(b) + 1e-9, float(a))
        else:
            th = compute_thresholds(ProbabilityVolume(p), BinaryMask(m_s), cfg)
        y = make_pseudo_label(BinaryMask(m_s), BinaryMask(m_d), ProbabilityVolume(p), th).data
        ref = pseudo_label_oracle(m_s, m_d, p, th.sigma_fg, th.sigma_bg)
        fg, bg = y == 1, y == 0
        ok = (
            np.array_equal(y, ref)
            and not (fg & bg).any()
            and not (fg & ~(m_s.astype(bool) & m_d.astype(bool))).any()
            and not (bg & (m_s.astype(bool) | m_d.astype(bool))).any()
        )
        bad += not ok
    dt = time.perf_counter() - t0
    acceptance(3, bad == 0 and dt <= 60, f"500 instances, {bad} mismatches, {dt:.1f}s")
    assert bad == 0 and dt <= 60


# ---- 4


def _skewed_instance(rng, max_side=8):
    """Distinct probabilities with a random share above 0.5; M_s = 1(P > 0.5)."""
    shape = tuple(int(v) for v in rng.integers(1, max_side + 1, size=3))
    n = int(np.prod(shape))
    n_fg = int(rng.binomial(n, rng.uniform(0.0, 1.0)))
    hi = rng.choice(np.arange(500_001, 1_000_000), size=n_fg, replace=False)
    lo = rng.choice(np.arange(1, 500_000), size=n - n_fg, replace=False)
    p = rng.permutation(np.concatenate([hi, lo])) / 1e6
    p = p.astype(np.float32).reshape(shape)
    return p, (p > 0.5).astype(np.uint8)


def test_c04_threshold_counts(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(200):
        p, m_s = _skewed_instance(rng)
        frac = float(rng.choice([0.0, 0.1, 0.25, 0.5, 0.75, 0.9]))
        th = compute_thresholds(ProbabilityVolume(p), BinaryMask(m_s), FilterConfig(frac, 2.0))
        k, b, fg, bg = threshold_oracle(p, m_s, frac, 2.0)
        fg_filtered = sum(not v > th.sigma_fg for v in fg)
        bg_filtered = sum(not v < th.sigma_bg for v in bg)
        bad += not (fg_filtered == k and bg_filtered == b)
    dt = time.perf_counter() - t0
    acceptance(4, bad == 0 and dt <= 60, f"200 instances, {bad} count mismatches, {dt:.1f}s")
    assert bad == 0 and dt <= 60


# ---- 5


def _scribble_contract(s, width, margin):
    """Width and endpoint-margin checks from the recorded geometry."""
    comp = s.scribble.component
    pix = s.scribble.pixels
    if (pix & ~comp).any():
        return False
    if not all(pix[p] for p in s.scribble.centerline):
        return False
    a = math.radians(30 * s.scribble.angle_index)
    d = np.array([math.sin(a), math.cos(a)])
    nrm = np.array([d[1], -d[0]])
    c = np.array(s.scribble.center)
    rel = np.argwhere(pix) - c
    lo, hi = s.scribble.span
    # two roundings (centerline pixel, then offset pixel) move a point by at most sqrt(2)
    slack = math.sqrt(2) + 1e-9
    if (np.abs(rel @ nrm) > width // 2 + slack).any():
        return False
    along = rel @ d
    if (along < lo - slack).any() or (along > hi + slack).any():
        return False
    if s.scribble.collapsed:
        return len(s.scribble.centerline) == 1
    h, w = comp.shape
    for t in list(range(lo - margin, lo)) + list(range(hi + 1, hi + margin + 1)):
        q = np.floor(c + t * d + 0.5).astype(int)
        if not (0 <= q[0] < h and 0 <= q[1] < w and comp[q[0], q[1]]):
            return False
    return True


def test_c05_weak_label_soundness(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    fails = {"fg_outside": 0, "bg_inside": 0, "box_gap": 0, "scribble": 0}
    edges = 0
    for i in range(100):
        spec = PhantomSpec(family=FAMILIES[i % len(FAMILIES)], dims=(32, 64, 64), neighbor=bool(i % 3 == 0))
        case = generate_case(spec, int(rng.integers(1 << 31)))
        gt = case.gt.bool()
        for kind in KINDS:
            for ratio in (0.1, 0.3, 0.5, 1.0):
                scheme = AnnotationScheme(kind=kind, ratio=ratio)
                ann = annotate(case.gt, scheme, seed=int(rng.integers(1 << 31)))
                lab = ann.label.data
                fails["fg_outside"] += int(((lab == 1) & ~gt).sum())
                fails["bg_inside"] += int(((lab == 0) & gt).sum())
                for s in ann.slices:
                    ys, xs = np.nonzero(gt[s.slice_index])
                    tight = (ys.min(), xs.min(), ys.max(), xs.max())
                    gaps = (tight[0] - s.box[0], tight[1] - s.box[1], s.box[2] - tight[2], s.box[3] - tight[3])
                    border = (s.box[0] == 0, s.box[1] == 0, s.box[2] == gt.shape[1] - 1, s.box[3] == gt.shape[2] - 1)
                    for g, cl, at_border in zip(gaps, s.clamped, border):
                        if cl and not at_border:
                            fails["box_gap"] += 1
                        if not cl:
                            edges += 1
                            fails["box_gap"] += not (10 <= g <= 20)
                    if kind != "tight_box_only":
                        fails["scribble"] += not _scribble_contract(s, scheme.scribble_width, scheme.endpoint_margin)
    dt = time.perf_counter() - t0
    ok = not any(fails.values()) and dt <= 120
    acceptance(5, ok, f"1600 annotations, {edges} unclamped box edges, violations {fails}, {dt:.0f}s")
    assert ok


# ---- 6 to 9: one phantom dataset, desk-scale defaults, paired seeds

ACC_SPEC = PhantomSpec(family="ellipsoid", dims=(32, 32, 32), neighbor=True)
ACC_CFG = PipelineConfig()
ACC_SEED = 0
SWEEP = (0.1, 0.5, 1.0)


def _scheme(ratio):
    return AnnotationScheme(kind="hybrid", ratio=ratio)


@pytest.fixture(scope="module")
def acc_dataset():
    train, val, _ = generate_dataset(ACC_SPEC, 30, 10, 0, seed=ACC_SEED)
    return train, val


def _ratio_run(dataset, ratio, ablations):
    t0 = time.perf_counter()
    data = prepare_data(*dataset, _scheme(ratio), ACC_CFG.net, ACC_SEED, ACC_CFG.crop_scale)
    init = run_initialization(data, ACC_CFG, ACC_SEED)
    times = {"init": time.perf_counter() - t0}
    reports = {}
    for a in ablations:
        t0 = time.perf_counter()
        reports[a] = run_cell(a, data, init, ACC_CFG, ACC_SEED, _scheme(ratio))[0]
        times[a] = time.perf_counter() - t0
    return {"init": init, "reports": reports, "times": times}


@pytest.fixture(scope="module")
def grid30(acc_dataset):
    return _ratio_run(acc_dataset, 0.3, ABLATIONS)


@pytest.fixture(scope="module")
def sweep(acc_dataset):
    return {r: _ratio_run(acc_dataset, r, ("baseline", "full") if r == 1.0 else ("baseline", "full", "pseudo_only")) for r in SWEEP}


def _means(run):
    return {a: r.mean_dice for a, r in run["reports"].items()}


@pytest.mark.slow
def test_c06_sdn_denoising(grid30, tmp_path, acceptance):
    t0 = time.perf_counter()
    rows = sdn_augmentation_ablation(grid30["init"].train_predictions, ACC_CFG, ACC_SEED, n_draws=50)
    dt = time.perf_counter() - t0
    by = {r["row"]: r for r in rows}
    full = by["full"]
    corrupted = np.array(by["no_sdn"]["dice"])
    denoised = np.array(full["dice"])
    n_worse = int((denoised < corrupted - 0.01).sum())
    (tmp_path / "sdn_ablation.txt").write_text(sdn_table_text(rows))
    (tmp_path / "sdn_ablation.csv").write_text(sdn_table_csv(rows))
    structure = [r["row"] for r in rows] == ["no_sdn", "full", "no_closing", "no_dilation", "no_extension"]
    ok = full["mean_dice"] >= 0.95 and n_worse == 0 and structure and dt <= 15 * 60
    msg = (
        f"mean denoised Dice {full['mean_dice']:.4f} (corrupted {corrupted.mean():.4f}), "
        f"{n_worse}/50 draws worse than input by >0.01 (worst {full['worst_change']:+.4f}), {dt / 60:.1f} min\n"
        + sdn_table_text(rows)
    )
    acceptance(6, ok, msg)
    assert ok


def _gaps(m, pairs):
    return {f"{a}-{b}": m[a] - m[b] for a, b in pairs}


@pytest.mark.slow
def test_c07_pipeline_ordering(grid30, acceptance):
    m = _means(grid30)
    gaps = _gaps(m, [("full", "no_shape_prior"), ("no_shape_prior", "no_iterative"), ("no_iterative", "baseline")])
    lift = m["full"] - m["baseline"]
    t = grid30["times"]
    runtime = t["init"] + sum(t[a] for a in ("full", "no_shape_prior", "no_iterative", "baseline"))
    ok = all(g >= -0.02 for g in gaps.values()) and lift >= 0.05 and runtime <= 60 * 60
    vals = ", ".join(f"{a} {m[a]:.4f}" for a in ("full", "no_shape_prior", "no_iterative", "baseline"))
    gap_s = ", ".join(f"{k} {v:+.4f}" for k, v in gaps.items())
    acceptance(7, ok, f"{vals}; gaps {gap_s}; full-baseline {lift:+.4f} (need >= +0.05); {runtime / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_c08_loss_ablation(grid30, sweep, acceptance):
    cols = {0.5: _means(sweep[0.5]), 0.3: _means(grid30), 0.1: _means(sweep[0.1])}
    ok = True
    parts = []
    for ratio, m in cols.items():
        g1, g2 = m["full"] - m["pseudo_only"], m["pseudo_only"] - m["baseline"]
        ok &= g1 >= -0.02 and g2 >= -0.02
        parts.append(
            f"{ratio:.0%}: full {m['full']:.4f} pseudo_only {m['pseudo_only']:.4f} baseline {m['baseline']:.4f} "
            f"({g1:+.4f}, {g2:+.4f})"
        )
    acceptance(8, ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_c09_sparsity_trend(grid30, sweep, acceptance):
    runs = {0.3: grid30, **sweep}
    full = {r: runs[r]["reports"]["full"].mean_dice for r in sorted(runs)}
    base = {r: runs[r]["reports"]["baseline"].mean_dice for r in sorted(runs)}
    drop_full = full[1.0] - full[0.1]
    drop_base = base[1.0] - base[0.1]
    ok = abs(full[0.1] - full[1.0]) <= 0.08 and drop_base >= drop_full
    trend = " ".join(f"{r:.0%}:{full[r]:.4f}/{base[r]:.4f}" for r in sorted(runs))
    acceptance(
        9,
        ok,
        f"full/baseline by ratio {trend}; full drop 100%->10% {drop_full:+.4f} (need |.| <= 0.08), "
        f"baseline drop {drop_base:+.4f} (need >= full drop)",
    )
    assert ok


# ---- 10


DET_DOC = {
    "seed": 17,
    "phantom": {"dims": [16, 16, 16], "neighbor": True},
    "data": {"n_train": 4, "n_val": 2, "n_test": 1},
    "scheme": {"ratio": 0.5, "loose_offset_range": [2, 4]},
    "pipeline": {
        "net": {"base_channels": 2},
        "ssn": {"epochs": 2},
        "sdn": {"epochs": 2, "steps_per_epoch": 2},
        "iter": {"iter_epochs": 1, "max_iterations": 2},
    },
    "experiment": {"ratios": [0.5], "schemes": ["hybrid"], "ablations": ["full", "baseline"]},
}


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c10_determinism(tmp_path, acceptance):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(DET_DOC))
    trees = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in ("gen-data", "make-labels", "train-init", "train-sdn", "iterate", "evaluate", "experiment", "report"):
            assert cli_main([cmd, "--config", str(cfg), "--out", str(out)]) == 0, cmd
        trees.append(_tree(out))
    a, b = trees
    kinds = {
        "volumes": [k for k in a if k.endswith(".vvol")],
        "checkpoints": [k for k in a if k.endswith(".ckpt")],
        "reports": [k for k in a if k.startswith("reports/") or k.startswith("report/") or k.startswith("summary")],
    }
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    ok = same and all(kinds.values())
    counts = ", ".join(f"{len(v)} {n}" for n, v in kinds.items())
    acceptance(10, ok, f"two runs, {len(a)} files byte-identical: {same} ({counts})")
    assert ok
