"""
Command-line entry point.

Every subcommand reads a RunConfig (``--config``), honors ``--seed`` and
``--out`` overrides and writes its artifacts below the output directory::

    data/      gen-data     phantom volumes + manifest
    labels/    make-labels  weak labels of the training split
    models/    train-init, train-sdn, iterate   checkpoints, template, stage logs
    eval/      evaluate     per-case Dice
    reports/   experiment   one JSON report per grid cell (+ summary tables at the top level)
    report/    report       txt/csv tables and PNG figures
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from weakseg3d import config as C
from weakseg3d.errors import CorruptionError, FormatError, InvalidArgumentError, InvalidInputError, InvalidStateError, NoTemplateError
from weakseg3d.io import read_checkpoint, read_json, read_volume, write_checkpoint, write_json, write_volume
from weakseg3d.phantom import PhantomCase, generate_dataset
from weakseg3d.pipeline import (
    evaluate_split,
    initial_ssn,
    prepare_data,
    run_experiment,
    run_iterations,
    self_train_sdn,
    weak_labels_for,
)
from weakseg3d.reporting import load_reports, report_filename, table_csv, table_text
from weakseg3d.sdn import ShapeTemplate

log = logging.getLogger("weakseg3d")

SUBCOMMANDS = ("gen-data", "make-labels", "train-init", "train-sdn", "iterate", "evaluate", "experiment", "report")
SPLITS = ("train", "val", "test")


# ---- data on disk


def _case_stem(cid: int) -> str:
    return f"case_{cid:06d}"


def _write_data(cfg: C.RunConfig, out: Path) -> dict:
    train, val, test = generate_dataset(cfg.phantom, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, cfg.seed)
    manifest = {"seed": cfg.seed, "phantom": C.to_doc(cfg.phantom), "splits": {}}
    for split, cases in zip(SPLITS, (train, val, test)):
        d = out / "data" / split
        d.mkdir(parents=True, exist_ok=True)
        manifest["splits"][split] = [{"case_id": c.case_id, "seed": c.seed} for c in cases]
        for c in cases:
            write_volume(d / f"{_case_stem(c.case_id)}_image.vvol", c.image)
            write_volume(d / f"{_case_stem(c.case_id)}_gt.vvol", c.gt)
    write_json(out / "data" / "manifest.json", manifest)
    return manifest


def _load_data(cfg: C.RunConfig, data_dir: Path | None):
    """Cases from a gen-data directory, or regenerated from the config when none exists."""
    if data_dir is None or not (data_dir / "manifest.json").exists():
        if data_dir is not None:
            log.info("no data at %s; regenerating from the config", data_dir)
        return generate_dataset(cfg.phantom, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, cfg.seed)
    manifest = read_json(data_dir / "manifest.json")
    out = []
    for split in SPLITS:
        cases = []
        for e in manifest["splits"].get(split, []):
            stem = data_dir / split / _case_stem(e["case_id"])
            cases.append(PhantomCase(read_volume(f"{stem}_image.vvol"), read_volume(f"{stem}_gt.vvol"), e["case_id"], e["seed"]))
        out.append(cases)
    return tuple(out)


def _load_labels(cfg, out: Path, train):
    d = out / "labels"
    paths = [d / f"{_case_stem(c.case_id)}_weak.vvol" for c in train]
    if all(p.exists() for p in paths):
        return [read_volume(p) for p in paths]
    return weak_labels_for(train, cfg.scheme, cfg.seed)


def _prepared(cfg, out, data_dir):
    train, val, test = _load_data(cfg, data_dir)
    labels = _load_labels(cfg, out, train)
    data = prepare_data(train, val, cfg.scheme, cfg.pipeline.net, cfg.seed, cfg.pipeline.crop_scale, labels=labels)
    return data, test


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise InvalidStateError(f"{path} not found; run `{hint}` first")
    return path


def _fingerprint_doc(cfg) -> dict:
    doc = C.to_doc(cfg)
    doc.pop("out_dir")  # where results go does not change them
    return doc


# ---- subcommands


def cmd_gen_data(cfg, out, data_dir):
    """Generate the phantom train/val/test splits."""
    m = _write_data(cfg, out)
    print(f"wrote {sum(len(v) for v in m['splits'].values())} cases to {out / 'data'}")


def cmd_make_labels(cfg, out, data_dir):
    """Write weak labels for the training split."""
    train, _, _ = _load_data(cfg, data_dir)
    d = out / "labels"
    d.mkdir(parents=True, exist_ok=True)
    labels = weak_labels_for(train, cfg.scheme, cfg.seed)
    for c, y in zip(train, labels):
        write_volume(d / f"{_case_stem(c.case_id)}_weak.vvol", y)
    write_json(d / "manifest.json", {"scheme": C.to_doc(cfg.scheme), "seed": cfg.seed, "case_ids": [c.case_id for c in train]})
    print(f"wrote {len(labels)} weak labels to {d}")


def cmd_train_init(cfg, out, data_dir):
    """Train the initial SSN on weak labels and select the shape template."""
    data, _ = _prepared(cfg, out, data_dir)
    ssn, preds, template = initial_ssn(data, cfg.pipeline, cfg.seed)
    d = out / "models"
    d.mkdir(parents=True, exist_ok=True)
    write_checkpoint(d / "ssn_init.ckpt", ssn)
    write_volume(d / "template.vvol", template.mask)
    ev = evaluate_split(ssn, None, data.val_images, data.val_gt)
    write_json(
        d / "init.json",
        {
            "template_case_id": template.source_case_id,
            "template_confidence": template.confidence,
            "crop": data.crop.to_dict(),
            "ssn_loss_curve": ssn.training_history,
            "ssn_flags": ssn.flags,
            "val_dice_ssn": ev["ssn"],
        },
    )
    print(f"initial SSN: mean val Dice {np.mean(ev['ssn']):.4f}; template from case {template.source_case_id}")


def cmd_train_sdn(cfg, out, data_dir):
    """Self-train and freeze the SDN on the template."""
    d = out / "models"
    info = read_json(_require(d / "init.json", "train-init"))
    mask = read_volume(_require(d / "template.vvol", "train-init"))
    template = ShapeTemplate(mask, info["template_case_id"], info["template_confidence"])
    sdn = self_train_sdn(template, cfg.pipeline, cfg.seed)
    write_checkpoint(d / "sdn.ckpt", sdn)
    write_json(d / "sdn.json", {"loss_curve": sdn.training_history, "checksum": sdn.checksum()})
    print(f"SDN trained and frozen; checksum {sdn.checksum()[:16]}")


def cmd_iterate(cfg, out, data_dir):
    """Run the pseudo-label refinement iterations."""
    d = out / "models"
    ssn = read_checkpoint(_require(d / "ssn_init.ckpt", "train-init"))
    sdn = read_checkpoint(_require(d / "sdn.ckpt", "train-sdn"))
    data, _ = _prepared(cfg, out, data_dir)
    model, iters = run_iterations(ssn, sdn, data, cfg.pipeline.iter, cfg.pipeline.filter, cfg.seed)
    write_checkpoint(d / "ssn_final.ckpt", model)
    write_json(d / "iterations.json", {"iterations": iters})
    last = iters[-1]["val_dice_ssn"] if iters else float("nan")
    print(f"{len(iters)} iterations; final mean val Dice {last:.4f}")


def cmd_evaluate(cfg, out, data_dir):
    """Score the latest SSN (and its SDN refinement) on val/test."""
    d = out / "models"
    path = d / "ssn_final.ckpt" if (d / "ssn_final.ckpt").exists() else _require(d / "ssn_init.ckpt", "train-init")
    ssn = read_checkpoint(path)
    sdn = read_checkpoint(d / "sdn.ckpt") if (d / "sdn.ckpt").exists() else None
    data, test = _prepared(cfg, out, data_dir)
    result = {"model": path.name, "splits": {}}
    splits = [("val", data.val_ids, data.val_images, data.val_gt)]
    if test:
        splits.append(("test", [c.case_id for c in test], [data.crop.apply(c.image) for c in test], [data.crop.apply(c.gt) for c in test]))
    for name, ids, imgs, gts in splits:
        ev = evaluate_split(ssn, sdn, imgs, gts)
        result["splits"][name] = {
            "case_ids": ids,
            "dice_ssn": ev["ssn"],
            "mean_dice_ssn": float(np.mean(ev["ssn"])),
            "dice_sdn": ev["sdn"],
            "mean_dice_sdn": float(np.mean(ev["sdn"])) if ev["sdn"] else None,
        }
        print(f"{name}: mean Dice {np.mean(ev['ssn']):.4f} ({len(ids)} cases, {path.name})")
    (out / "eval").mkdir(parents=True, exist_ok=True)
    write_json(out / "eval" / "evaluation.json", result)


def cmd_experiment(cfg, out, data_dir):
    """Run the ratio x scheme x ablation grid and write reports."""
    train, val, _ = _load_data(cfg, data_dir)
    g = cfg.experiment
    reports = run_experiment(
        train, val, cfg.pipeline, g.ratios, g.schemes, g.ablations, cfg.seed, base_scheme=cfg.scheme, config_doc=_fingerprint_doc(cfg)
    )
    d = out / "reports"
    d.mkdir(parents=True, exist_ok=True)
    for r in reports:
        (d / report_filename(r)).write_text(r.to_json() + "\n")
    (out / "summary.txt").write_text(table_text(reports))
    (out / "summary.csv").write_text(table_csv(reports))
    print(table_text(reports), end="")


def cmd_report(cfg, out, data_dir):
    """Render reports to txt/csv tables and PNG figures."""
    from weakseg3d import plotting  # matplotlib only when figures are wanted

    src = data_dir if data_dir is not None else out / "reports"
    reports = load_reports(_require(src, "experiment"))
    if not reports:
        raise InvalidInputError(f"no report files in {src}")
    d = out / "report"
    d.mkdir(parents=True, exist_ok=True)
    (d / "table.txt").write_text(table_text(reports))
    (d / "table.csv").write_text(table_csv(reports))
    plotting.plot_ablation_bars(reports, d / "ablation_dice.png")
    plotting.plot_iteration_curves(reports, d / "iteration_curves.png")
    plotting.plot_ratio_trend(reports, d / "ratio_trend.png")
    print(table_text(reports), end="")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "make-labels": cmd_make_labels,
    "train-init": cmd_train_init,
    "train-sdn": cmd_train_sdn,
    "iterate": cmd_iterate,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakseg3d", description="Weakly supervised 3D segmentation with a self-taught shape prior.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=(HANDLERS[name].__doc__ or name.replace("-", " ")).strip().splitlines()[0])
        sp.add_argument("--config", required=True, type=Path, help="RunConfig JSON file")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", type=Path, help="output directory (default: the config's out_dir)")
        sp.add_argument(
            "--data", type=Path, help="input directory (gen-data output; for `report`, the reports directory)"
        )
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # usage errors exit with status 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out = args.out if args.out is not None else Path(cfg.out_dir)
        if args.out is not None:
            cfg = replace(cfg, out_dir=str(args.out))
        out.mkdir(parents=True, exist_ok=True)
        data_dir = args.data if args.data is not None else (out / "data" if args.command != "report" else None)
        HANDLERS[args.command](cfg, out, data_dir)
    except (InvalidArgumentError, InvalidInputError, InvalidStateError, NoTemplateError, FormatError, CorruptionError, OSError) as e:
        print(f"weakseg3d {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
