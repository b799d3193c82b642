"""
Segmentation quality: per-class Dice, grouped percentile summaries with
detection ratio, and voxel-level correction effort.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyDomainError, IncompatibleVolumesError, InvalidArgumentError
from .volume_io import LabelMap

DENOMINATORS = ("total", "gt-foreground")

# voxels per z-slab when tallying the confusion table
_SLAB_VOXELS = 1 << 22


@dataclass
class ClassDsc:
    label: int
    dsc: float | None
    gt_voxels: int
    pred_voxels: int
    intersection: int

    @property
    def absent(self) -> bool:
        return self.gt_voxels == 0 and self.pred_voxels == 0

    @property
    def detected(self) -> bool:
        return bool(self.dsc)


@dataclass
class DscReport:
    scan_id: str
    classes: list
    groups: dict = field(default_factory=dict)

    def present(self) -> list:
        """Classes seen in the prediction or the ground truth."""
        return [c for c in self.classes if not c.absent]

    def by_label(self) -> dict:
        return {c.label: c for c in self.classes}

    def to_dict(self) -> dict:
        rows = []
        for c in self.classes:
            row = asdict(c)
            row["detected"] = c.detected
            row["absent"] = c.absent
            rows.append(row)
        return {"scan_id": self.scan_id, "classes": rows, "groups": self.groups}


@dataclass
class GroupSummary:
    name: str
    median: float | None
    p16: float | None
    p84: float | None
    detection_ratio: float
    num_classes: int
    num_detected: int

    @property
    def defined(self) -> bool:
        return self.median is not None

    def table_entry(self, digits: int = 2) -> str:
        """
        Render ``median_{-(median-p16)}^{+(p84-median)}`` followed by the
        detection ratio in percent when it is below 100%.
        """
        if not self.defined:
            text = "n/a"
        else:
            lo = self.median - self.p16
            hi = self.p84 - self.median
            text = f"{self.median:.{digits}f}_{{-{lo:.{digits}f}}}^{{+{hi:.{digits}f}}}"
        if self.detection_ratio < 1:
            text += f" ({100 * self.detection_ratio:.0f}%)"
        return text

    def to_dict(self) -> dict:
        out = asdict(self)
        out["percentiles_defined"] = self.defined
        out["table_entry"] = self.table_entry()
        return out


@dataclass
class CorrectionReport:
    scan_id: str
    differing_voxels: int
    denominator_kind: str
    denominator: int
    percentage: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(pred: LabelMap, gt: LabelMap) -> None:
    if tuple(pred.dims) != tuple(gt.dims):
        raise IncompatibleVolumesError(f"shape mismatch: {pred.dims} vs {gt.dims}")
    if not np.allclose(pred.affine, gt.affine, atol=1e-4):
        raise IncompatibleVolumesError("volumes do not share the same voxel-to-world affine")


def _slabs(dims):
    step = max(1, _SLAB_VOXELS // (dims[0] * dims[1]))
    return [slice(z, min(dims[2], z + step)) for z in range(0, dims[2], step)]


def confusion_counts(pred: LabelMap, gt: LabelMap, num_classes: int,
                     threads: int = 1) -> np.ndarray:
    """``counts[p, g]`` = number of voxels predicted ``p`` with truth ``g``."""

    def tally(zs):
        p = np.asarray(pred.data[:, :, zs], dtype=np.int64).ravel()
        g = np.asarray(gt.data[:, :, zs], dtype=np.int64).ravel()
        return np.bincount(p * num_classes + g, minlength=num_classes ** 2)

    slabs = _slabs(pred.dims)
    if threads > 1 and len(slabs) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(tally, slabs))
    else:
        parts = [tally(zs) for zs in slabs]
    return np.sum(parts, axis=0).reshape(num_classes, num_classes)


def dsc_per_class(pred: LabelMap, gt: LabelMap, scan_id: str = "",
                  include_background: bool = False, threads: int = 1) -> DscReport:
    """
    Dice coefficient ``2|P_c & G_c| / (|P_c| + |G_c|)`` for every class.

    Classes missing from both volumes get ``dsc = None`` and count as absent.
    Background (label 0) is skipped unless ``include_background``.
    """
    _check_pair(pred, gt)
    n = max(pred.num_classes, gt.num_classes)
    counts = confusion_counts(pred, gt, n, threads)
    inter = np.diag(counts)
    pred_sizes = counts.sum(axis=1)
    gt_sizes = counts.sum(axis=0)
    classes = []
    for label in range(0 if include_background else 1, n):
        total = int(pred_sizes[label] + gt_sizes[label])
        dsc = 2 * int(inter[label]) / total if total else None
        classes.append(ClassDsc(label, dsc, int(gt_sizes[label]), int(pred_sizes[label]),
                                int(inter[label])))
    return DscReport(scan_id, classes)


def percentile(values, q: float) -> float:
    """Percentile with linear interpolation between closest ranks."""
    data = sorted(float(v) for v in values)
    if not data:
        raise EmptyDomainError("percentile of an empty list")
    if not 0 <= q <= 100:
        raise InvalidArgumentError(f"percentile rank must lie in [0, 100], got {q}")
    pos = (len(data) - 1) * q / 100
    lo = math.floor(pos)
    hi = min(lo + 1, len(data) - 1)
    return data[lo] + (pos - lo) * (data[hi] - data[lo])


def group_summary(report: DscReport, labels, name: str = "all") -> GroupSummary:
    """
    Median and 16th/84th percentiles of the Dice scores of one class group.

    Classes the prediction missed completely (Dice 0) are left out of the
    percentiles and show up in the detection ratio instead, whose
    denominator is the number of group classes present in the ground truth.
    """
    index = report.by_label()
    members = [index[l] for l in labels if l in index and not index[l].absent]
    if not members:
        raise EmptyDomainError(f"group {name!r} has no classes present in either volume")
    in_gt = [c for c in members if c.gt_voxels > 0]
    scores = [c.dsc for c in members if c.detected]
    dr = len(scores) / len(in_gt) if in_gt else 0.0
    if not scores:
        return GroupSummary(name, None, None, None, dr, len(in_gt), 0)
    return GroupSummary(name, percentile(scores, 50), percentile(scores, 16),
                        percentile(scores, 84), dr, len(in_gt), len(scores))


def correction_effort(pred: LabelMap, reference: LabelMap, denom: str = "total",
                      scan_id: str = "") -> CorrectionReport:
    """
    Count voxels where ``pred`` and ``reference`` disagree.

    ``denom="total"`` normalises by the whole volume; ``"gt-foreground"`` by
    voxels that are foreground in either map, which contains every
    differing voxel.
    """
    if denom not in DENOMINATORS:
        raise InvalidArgumentError(f"unknown denominator {denom!r}")
    if tuple(pred.dims) != tuple(reference.dims):
        raise IncompatibleVolumesError(f"shape mismatch: {pred.dims} vs {reference.dims}")
    differing = 0
    foreground = 0
    for zs in _slabs(pred.dims):
        p = np.asarray(pred.data[:, :, zs])
        r = np.asarray(reference.data[:, :, zs])
        differing += int(np.count_nonzero(p != r))
        if denom == "gt-foreground":
            foreground += int(np.count_nonzero((p != 0) | (r != 0)))
    size = pred.num_voxels if denom == "total" else foreground
    pct = 100.0 * differing / size if size else 0.0
    return CorrectionReport(scan_id, differing, denom, size, pct)


def load_groups(path) -> dict:
    """Read a label-group file ``{group_name: [label ids]}``."""
    with open(path) as f:
        groups = json.load(f)
    if not isinstance(groups, dict) or not all(
            isinstance(v, list) and all(isinstance(i, int) for i in v) for v in groups.values()):
        raise InvalidArgumentError(f"{path}: expected an object mapping names to label lists")
    return groups


def summarise(report: DscReport, groups: dict | None = None) -> dict:
    """Summaries for every group plus an ``all`` group of the evaluated classes."""
    groups = dict(groups or {})
    groups.setdefault("all", [c.label for c in report.classes])
    out = {}
    for name, labels in groups.items():
        try:
            out[name] = group_summary(report, labels, name)
        except EmptyDomainError:
            out[name] = None
    report.groups = {k: (v.to_dict() if v else None) for k, v in out.items()}
    return out


def report_csv(report: DscReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scan_id", "label", "dsc", "gt_voxels", "pred_voxels",
                     "intersection", "detected", "absent"])
    for c in report.classes:
        writer.writerow([report.scan_id, c.label, "" if c.dsc is None else repr(c.dsc),
                         c.gt_voxels, c.pred_voxels, c.intersection,
                         int(c.detected), int(c.absent)])
    return buf.getvalue()
