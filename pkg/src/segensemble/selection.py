"""
Ranking and budgeted selection of unlabelled scans by ensemble uncertainty.

Low-uncertainty scans need the fewest voxel corrections, so picking them
first fits the most newly labelled scans into a fixed annotation budget.
"""

from __future__ import annotations

import glob
import json
import math
import os
from dataclasses import dataclass

from .errors import (
    EmptyDomainError,
    InputMissingError,
    InvalidArgumentError,
    InvalidSpecError,
    UndefinedCorrelationError,
)

MODES = ("lowest", "highest")


@dataclass(frozen=True)
class CandidateScan:
    scan_id: str
    mean_uncertainty: float
    correction_percentage: float | None = None
    annotation_cost: float | None = None

    def __post_init__(self):
        if not 0 <= self.mean_uncertainty <= 0.25:
            raise InvalidArgumentError(
                f"{self.scan_id}: mean uncertainty {self.mean_uncertainty} outside [0, 0.25]")

    @classmethod
    def from_dict(cls, obj: dict) -> "CandidateScan":
        try:
            return cls(str(obj["scan_id"]), float(obj["mean_uncertainty"]),
                       obj.get("correction_percentage"), obj.get("annotation_cost"))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpecError(f"not a scan report: {obj!r}") from exc


@dataclass(frozen=True)
class SelectionPolicy:
    """Pick up to ``budget`` scans, or scans whose summed cost fits ``cost_cap``."""

    mode: str = "lowest"
    budget: int | None = None
    cost_cap: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"unknown selection mode {self.mode!r}")
        if self.budget is None and self.cost_cap is None:
            raise InvalidArgumentError("give a scan budget or a cost cap")
        if self.budget is not None and self.budget < 0:
            raise InvalidArgumentError("scan budget must be non-negative")
        if self.cost_cap is not None and self.cost_cap < 0:
            raise InvalidArgumentError("cost cap must be non-negative")


def rank(candidates, mode: str = "lowest") -> list:
    """Sort by uncertainty (ascending for ``lowest``); equal scores go by scan id."""
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown selection mode {mode!r}")
    by_id = sorted(candidates, key=lambda c: c.scan_id)
    return sorted(by_id, key=lambda c: c.mean_uncertainty, reverse=(mode == "highest"))


def select(candidates, policy: SelectionPolicy) -> list:
    """
    Greedy prefix of :func:`rank`.

    Under a cost cap, selection stops at the first scan that no longer fits;
    cheaper scans further down are not considered.
    """
    if not candidates:
        raise EmptyDomainError("no candidate scans")
    ordered = rank(candidates, policy.mode)
    chosen = []
    spent = 0.0
    for cand in ordered:
        if policy.budget is not None and len(chosen) >= policy.budget:
            break
        if policy.cost_cap is not None:
            if cand.annotation_cost is None:
                raise InvalidArgumentError(f"{cand.scan_id}: no annotation cost for a cost cap")
            if spent + cand.annotation_cost > policy.cost_cap:
                break
            spent += cand.annotation_cost
        chosen.append(cand)
    return chosen


def pearson(xs, ys) -> float:
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    if len(xs) != len(ys):
        raise InvalidArgumentError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise UndefinedCorrelationError("need at least two pairs")
    mx = math.fsum(xs) / len(xs)
    my = math.fsum(ys) / len(ys)
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("one of the series has zero variance")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def fractional_ranks(values) -> list:
    """1-based ranks; tied values share the average of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    xs, ys = list(xs), list(ys)
    if len(xs) != len(ys):
        raise InvalidArgumentError(f"length mismatch: {len(xs)} vs {len(ys)}")
    return pearson(fractional_ranks(xs), fractional_ranks(ys))


def correlation_summary(xs, ys) -> dict:
    """Both coefficients, with ``None`` and a reason when undefined."""
    out = {"n": len(xs)}
    try:
        out["pearson"] = pearson(xs, ys)
        out["spearman"] = spearman(xs, ys)
        out["undefined_correlation"] = False
    except UndefinedCorrelationError as exc:
        out.update(pearson=None, spearman=None, undefined_correlation=True, reason=str(exc))
    return out


def load_candidates(path) -> list:
    """Scan reports from a directory of JSON files or one JSON array."""
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.json")))
        objs = []
        for name in files:
            with open(name) as f:
                obj = json.load(f)
            objs.extend(obj if isinstance(obj, list) else [obj])
    elif os.path.exists(path):
        with open(path) as f:
            objs = json.load(f)
        if isinstance(objs, dict):
            objs = [objs]
    else:
        raise InputMissingError(f"no such reports path: {path}")
    if not objs:
        raise EmptyDomainError(f"{path}: no scan reports found")
    return [CandidateScan.from_dict(o) for o in objs]


def ranking_records(candidates, policy: SelectionPolicy) -> list:
    chosen = {c.scan_id for c in select(candidates, policy)}
    return [{"scan_id": c.scan_id, "mean_uncertainty": c.mean_uncertainty, "rank": i,
             "selected": c.scan_id in chosen}
            for i, c in enumerate(rank(candidates, policy.mode), start=1)]
