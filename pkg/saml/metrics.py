# Copyright (c) 2026, saml-pipeline contributors.

"""Pixel-level F1/Dice per class and the stratum x class report tables.

For a pixel set ``F1 = 2 TP / (2 TP + FP + FN)``, which is exactly the Dice
coefficient ``2 |A & B| / (|A| + |B|)``; both are kept so the identity can be
checked. Scores are pooled over pixels within a stratum (micro), then averaged
arithmetically across annotators, and the Average column is the mean of the
stratum columns.
"""

import logging
import os
import typing
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .dataset import FOREGROUND_CLASSES, CellClass, LabelMap, Stratum
from .errors import InputError
from .utils import _read_csv, _write_csv

logger = logging.getLogger(__name__)

AVERAGE = "average"
POOLING_MODES = ("micro", "macro")

REPORT_COLUMNS = (
    "method",
    "annotator_group",
    "stratum",
    "cell_class",
    "score",
    "f1_micro",
    "f1_macro",
    "tp",
    "fp",
    "fn",
    "n_patches",
    "n_annotators",
)


@dataclass(frozen=True)
class ClassScore:
    cell_class: CellClass
    tp: int
    fp: int
    fn: int
    f1: float
    dice: float
    both_empty: bool = False

    @classmethod
    def from_counts(cls, cell_class, tp: int, fp: int, fn: int) -> "ClassScore":
        denominator = 2 * tp + fp + fn
        if denominator == 0:
            return cls(CellClass(cell_class), tp, fp, fn, 1.0, 1.0, both_empty=True)
        f1 = 2 * tp / denominator
        # |pred| = tp + fp and |ref| = tp + fn, so Dice shares F1's denominator.
        dice = 2 * tp / ((tp + fp) + (tp + fn))
        return cls(CellClass(cell_class), tp, fp, fn, f1, dice)


def _classes(labels) -> np.ndarray:
    return labels.classes if isinstance(labels, LabelMap) else np.asarray(labels)


def class_f1(pred, ref, cell_class) -> ClassScore:
    """Pixel counts and F1 for membership in ``cell_class``.

    Both maps lacking the class scores 1.0 with ``both_empty`` set.
    """
    pred_grid, ref_grid = _classes(pred), _classes(ref)
    if pred_grid.shape != ref_grid.shape:
        raise InputError(
            f"Dimension mismatch: prediction {pred_grid.shape} vs reference "
            f"{ref_grid.shape}"
        )
    p = pred_grid == int(cell_class)
    r = ref_grid == int(cell_class)
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return ClassScore.from_counts(cell_class, tp, fp, fn)


@dataclass(frozen=True)
class PatchScore:
    method: str
    group: str
    annotator: str
    stratum: str
    patch_id: str
    score: ClassScore


@dataclass(frozen=True)
class ReportRow:
    method: str
    group: str
    stratum: str
    cell_class: str
    score: float
    f1_micro: float
    f1_macro: float
    tp: int
    fp: int
    fn: int
    n_patches: int
    n_annotators: int

    @property
    def key(self) -> tuple[str, str, str, str]:
        return self.method, self.group, self.stratum, self.cell_class


@dataclass
class EvalReport:
    rows: list[ReportRow]
    pooling: str = "micro"
    annotator_rows: list[ReportRow] = field(default_factory=list)

    def cell(self, method: str, group: str, stratum: str, cell_class) -> ReportRow:
        if isinstance(cell_class, str):
            label = cell_class
        else:
            label = CellClass(cell_class).label
        for row in self.rows:
            if row.key == (method, group, stratum, label):
                return row
        raise KeyError((method, group, stratum, label))

    def method_groups(self) -> list[tuple[str, str]]:
        seen = {}
        for row in self.rows:
            seen.setdefault((row.method, row.group), None)
        return list(seen)


def _pooled_row(method, group, stratum, label, scores, pooling, n_annotators=1):
    tp = sum(s.tp for s in scores)
    fp = sum(s.fp for s in scores)
    fn = sum(s.fn for s in scores)
    micro = ClassScore.from_counts(CellClass[label.upper()], tp, fp, fn).f1
    macro = float(np.mean([s.f1 for s in scores]))
    return ReportRow(
        method,
        group,
        stratum,
        label,
        micro if pooling == "micro" else macro,
        micro,
        macro,
        tp,
        fp,
        fn,
        len(scores),
        n_annotators,
    )


def _mean_row(method, group, stratum, label, rows, pooling, n_annotators=None):
    micro = float(np.mean([r.f1_micro for r in rows]))
    macro = float(np.mean([r.f1_macro for r in rows]))
    return ReportRow(
        method,
        group,
        stratum,
        label,
        micro if pooling == "micro" else macro,
        micro,
        macro,
        sum(r.tp for r in rows),
        sum(r.fp for r in rows),
        sum(r.fn for r in rows),
        sum(r.n_patches for r in rows),
        n_annotators or max(r.n_annotators for r in rows),
    )


def aggregate_report(
    scores: typing.Iterable[PatchScore], pooling: str = "micro"
) -> EvalReport:
    """Pool per-patch scores into report rows.

    Within (method, group, annotator, stratum, class) counts are pooled (micro)
    and per-patch F1 averaged (macro). Group rows are the arithmetic mean over
    annotators, and the ``average`` stratum is the mean of the stratum rows.
    """
    if pooling not in POOLING_MODES:
        raise InputError(f"pooling must be one of {POOLING_MODES}, not '{pooling}'")
    by_annotator: dict[tuple, list[ClassScore]] = defaultdict(list)
    for s in scores:
        key = (s.method, s.group, s.annotator, s.stratum, s.score.cell_class.label)
        by_annotator[key].append(s.score)

    annotator_rows = [
        _pooled_row(method, group, stratum, label, items, pooling)
        for (method, group, _, stratum, label), items in sorted(by_annotator.items())
    ]
    strata_present = sorted({row.stratum for row in annotator_rows}, key=_stratum_order)

    by_group: dict[tuple, list[ReportRow]] = defaultdict(list)
    for row in annotator_rows:
        by_group[row.key].append(row)

    rows = []
    method_groups = sorted({(r.method, r.group) for r in annotator_rows})
    for method, group in method_groups:
        for label in (c.label for c in FOREGROUND_CLASSES):
            stratum_rows = []
            for stratum in strata_present:
                members = by_group.get((method, group, stratum, label))
                if not members:
                    warnings.warn(
                        f"No scores for {method}/{group}/{stratum}/{label}; "
                        "row omitted.",
                        stacklevel=2,
                    )
                    continue
                stratum_rows.append(
                    _mean_row(
                        method, group, stratum, label, members, pooling, len(members)
                    )
                )
            if not stratum_rows:
                continue
            rows.extend(stratum_rows)
            rows.append(_mean_row(method, group, AVERAGE, label, stratum_rows, pooling))

    rows.sort(
        key=lambda r: (r.method, r.group, _stratum_order(r.stratum), r.cell_class)
    )
    return EvalReport(rows, pooling, annotator_rows)


def _stratum_order(stratum: str) -> int:
    order = [s.value for s in Stratum] + [AVERAGE]
    return order.index(stratum) if stratum in order else len(order)


def annotation_accuracy(
    candidates: typing.Mapping[str, typing.Mapping[str, typing.Mapping[str, LabelMap]]],
    reference: typing.Mapping[str, LabelMap],
    strata: typing.Mapping[str, typing.Union[Stratum, str]],
    groups: typing.Union[typing.Mapping[str, str], None] = None,
    pooling: str = "micro",
) -> EvalReport:
    """Score ``candidates[method][annotator][patch_id]`` against the reference.

    ``groups`` maps annotators to their group; an annotator without one is its
    own group.
    """
    groups = groups or {}
    scores = []
    for method, annotators in candidates.items():
        for annotator, labelmaps in annotators.items():
            missing = sorted(pid for pid in labelmaps if pid not in reference)
            if missing:
                warnings.warn(
                    f"{len(missing)} patch(es) of {method}/{annotator} have no "
                    f"reference and are excluded, e.g. {missing[0]}",
                    stacklevel=2,
                )
            for pid in sorted(set(labelmaps) - set(missing)):
                stratum = Stratum(strata[pid]).value
                for cell_class in FOREGROUND_CLASSES:
                    scores.append(
                        PatchScore(
                            method,
                            groups.get(annotator, annotator),
                            annotator,
                            stratum,
                            pid,
                            class_f1(labelmaps[pid], reference[pid], cell_class),
                        )
                    )
    return aggregate_report(scores, pooling)


def write_report_csv(path: typing.Union[str, os.PathLike], report: EvalReport) -> None:
    _write_csv(
        path,
        REPORT_COLUMNS,
        (
            (
                row.method,
                row.group,
                row.stratum,
                row.cell_class,
                repr(row.score),
                repr(row.f1_micro),
                repr(row.f1_macro),
                row.tp,
                row.fp,
                row.fn,
                row.n_patches,
                row.n_annotators,
            )
            for row in report.rows
        ),
        comments=[
            f"pooling={report.pooling}: counts pooled within a stratum, "
            "arithmetic mean across annotators and strata"
        ],
    )


def read_report_csv(path: typing.Union[str, os.PathLike]) -> EvalReport:
    with open(path) as f:
        header = f.readline()
    pooling = "micro"
    if header.startswith("# pooling="):
        pooling = header[len("# pooling=") :].split(":")[0].strip()
    rows = [
        ReportRow(
            r["method"],
            r["annotator_group"],
            r["stratum"],
            r["cell_class"],
            float(r["score"]),
            float(r["f1_micro"]),
            float(r["f1_macro"]),
            int(r["tp"]),
            int(r["fp"]),
            int(r["fn"]),
            int(r["n_patches"]),
            int(r["n_annotators"]),
        )
        for r in _read_csv(path)
    ]
    return EvalReport(rows, pooling)


def merge_reports(reports: typing.Iterable[EvalReport]) -> EvalReport:
    reports = list(reports)
    poolings = {r.pooling for r in reports}
    if len(poolings) > 1:
        raise InputError(f"Cannot merge reports with mixed pooling {sorted(poolings)}")
    return EvalReport(
        [row for r in reports for row in r.rows],
        poolings.pop() if poolings else "micro",
        [row for r in reports for row in r.annotator_rows],
    )


def format_report_table(report: EvalReport, title: str = "") -> str:
    """Text table: one line per (method, group), stratum x class columns."""
    strata = [s.value for s in Stratum] + [AVERAGE]
    classes = [c.label for c in FOREGROUND_CLASSES]
    columns = [(s, c) for s in strata for c in classes]
    method_width = max([len("Method")] + [len(m) for m, _ in report.method_groups()])
    group_width = max([len("Group")] + [len(g) for _, g in report.method_groups()])

    def line(method, group, cells):
        return " | ".join(
            [method.ljust(method_width), group.ljust(group_width)]
            + [cell.rjust(10) for cell in cells]
        )

    lines = []
    if title:
        lines.append(title)
    lines.append(f"pooling: {report.pooling}")
    lines.append(line("", "", [s.capitalize() for s, _ in columns]))
    lines.append(line("Method", "Group", [c.capitalize() for _, c in columns]))
    lines.append("-" * len(lines[-1]))
    for method, group in report.method_groups():
        cells = []
        for stratum, label in columns:
            try:
                cells.append(f"{report.cell(method, group, stratum, label).score:.4f}")
            except KeyError:
                cells.append("-")
        lines.append(line(method, group, cells))
    return "\n".join(lines) + "\n"
