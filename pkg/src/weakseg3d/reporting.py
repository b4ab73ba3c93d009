"""Comparison tables (plain text and CSV) built from experiment reports."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

from weakseg3d.pipeline import ABLATIONS, ExperimentReport

CSV_FIELDS = (
    "scheme",
    "ratio",
    "ablation",
    "mask_source",
    "n_cases",
    "mean_dice",
    "alt_mean_dice",
    "iterations",
    "master_seed",
    "fingerprint",
)


def load_reports(directory) -> list[ExperimentReport]:
    paths = sorted(Path(directory).glob("*.json"))
    return sort_reports([ExperimentReport.from_json(p.read_text()) for p in paths])


def sort_reports(reports: Sequence[ExperimentReport]) -> list[ExperimentReport]:
    order = {a: i for i, a in enumerate(ABLATIONS)}
    return sorted(reports, key=lambda r: (r.scheme, -r.ratio, order.get(r.ablation, len(order)), r.master_seed))


def report_filename(r: ExperimentReport) -> str:
    return f"{r.scheme}_r{r.ratio:g}_{r.ablation}.json"


def _pct(r: float) -> str:
    return f"{100 * r:g}%"


def table_text(reports: Sequence[ExperimentReport]) -> str:
    """One block per scheme: ablations as rows, label ratios as columns, mean Dice in percent."""
    reports = sort_reports(reports)
    blocks = []
    for scheme in sorted({r.scheme for r in reports}):
        rows = [r for r in reports if r.scheme == scheme]
        ratios = sorted({r.ratio for r in rows}, reverse=True)
        abls = [a for a in ABLATIONS if any(r.ablation == a for r in rows)]
        cell = {(r.ablation, r.ratio): r for r in rows}
        head = ["method"] + [_pct(x) for x in ratios]
        body = []
        for a in abls:
            vals = [f"{100 * cell[a, x].mean_dice:.2f}" if (a, x) in cell else "-" for x in ratios]
            body.append([a] + vals)
        blocks.append("\n".join([f"Mean validation Dice (%), scheme: {scheme}"] + _grid(head, body)))
    return "\n\n".join(blocks) + "\n"


def table_csv(reports: Sequence[ExperimentReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in sort_reports(reports):
        w.writerow(
            [
                r.scheme,
                repr(r.ratio),
                r.ablation,
                r.mask_source,
                len(r.dice),
                repr(r.mean_dice),
                repr(r.alt_mean_dice),
                len(r.iterations),
                r.master_seed,
                r.fingerprint,
            ]
        )
    return buf.getvalue()


SDN_CSV_FIELDS = ("row", "case_rank", "closing", "dilation", "extension", "n_draws", "mean_dice", "worst_change")


def _grid(head, body) -> list[str]:
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    rule = "-" * len(fmt(head))
    return [rule, fmt(head), rule] + [fmt(b) for b in body] + [rule]


def sdn_table_text(rows: Sequence[dict]) -> str:
    """Denoiser ablation: template rank and enabled corruptions per row, held-out Dice in percent."""
    mark = lambda v: "x" if v else "-"
    head = ["row", "case rank", "closing", "dilation", "extension", "dice"]
    body = [
        [r["row"], str(r["case_rank"]), mark(r["closing"]), mark(r["dilation"]), mark(r["extension"]), f"{100 * r['mean_dice']:.2f}"]
        for r in rows
    ]
    return "\n".join(["Denoiser ablation, mean Dice (%) on held-out corruption draws"] + _grid(head, body)) + "\n"


def sdn_table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SDN_CSV_FIELDS)
    for r in rows:
        w.writerow(
            [r["row"], r["case_rank"], int(r["closing"]), int(r["dilation"]), int(r["extension"]), len(r["dice"]), repr(r["mean_dice"]), repr(r.get("worst_change", ""))]
        )
    return buf.getvalue()
