"""
Ensemble fusion and voxel-wise ensemble uncertainty.

The uncertainty of a voxel is the variance of each class probability across
the N ensemble members, averaged over the L classes; the scan-level score is
the mean of that map over the volume. Variances are population variances
(divide by N) unless ``ddof=1`` is requested.

Two numerical paths exist. :class:`VarianceAccumulator` runs Welford updates
over arbitrary probability members, one class plane and z-slab at a time.
When every member is a hard label map the variance of a one-hot indicator
with vote share ``q`` is ``q (1 - q)``, so :func:`onehot_uncertainty` needs
only per-class vote counts. :func:`run_ensemble` uses the second path for
label members and streams z-slabs so the ``L x V`` stack is never resident.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptVotesError,
    EmptyDomainError,
    EmptyEnsembleError,
    IncompatibleMemberError,
    IncompatibleVolumesError,
    InputMissingError,
    InvalidArgumentError,
    InvalidSpecError,
)
from .tta import FillPolicy, TransformSpec, apply, apply_probability, invert
from .volume_io import (
    LabelMap,
    ProbabilityMap,
    VoxelGrid,
    is_probability_volume,
    label_dtype,
    read_label_map,
    read_probability_map,
)

log = logging.getLogger(__name__)

FUSION_MODES = ("majority", "mean-prob")

# resident bytes allowed for per-slab working arrays, split across threads
MEMORY_BUDGET = 512 * 2 ** 20
# label stacks above this size are spooled to a temporary memory map
_SPOOL_BYTES = 512 * 2 ** 20


def _slabs(dims, bytes_per_voxel: int, threads: int = 1):
    per_thread = MEMORY_BUDGET // max(1, threads)
    plane = dims[0] * dims[1]
    step = int(max(1, min(dims[2], per_thread // max(1, plane * bytes_per_voxel))))
    return [slice(z, min(dims[2], z + step)) for z in range(0, dims[2], step)]


def _run(fn, items, threads: int):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# streaming variance
# ---------------------------------------------------------------------------


class VarianceAccumulator:
    """
    Running per-voxel, per-class mean and sum of squared deviations (M2).

    Arrays have shape ``(L, nx, ny, nz)``. Updates walk class planes in
    z-slabs so temporaries stay small. A single accumulator has a single
    writer; parallel reductions build private accumulators and
    :func:`merge` them.
    """

    def __init__(self, num_classes: int, dims, spacing=(1.0, 1.0, 1.0), affine=None):
        self.num_classes = int(num_classes)
        self.dims = tuple(int(n) for n in dims)
        self.spacing = tuple(spacing)
        self.affine = None if affine is None else np.array(affine, dtype=np.float64)
        self.count = 0
        self.mean = np.zeros((self.num_classes,) + self.dims)
        self.m2 = np.zeros((self.num_classes,) + self.dims)

    @classmethod
    def like(cls, member) -> "VarianceAccumulator":
        return cls(member.num_classes, member.dims, member.spacing, member.affine)

    def copy(self) -> "VarianceAccumulator":
        out = VarianceAccumulator(self.num_classes, self.dims, self.spacing, self.affine)
        out.count = self.count
        out.mean = self.mean.copy()
        out.m2 = self.m2.copy()
        return out

    def _check(self, other) -> None:
        if other.num_classes != self.num_classes or tuple(other.dims) != self.dims:
            raise IncompatibleMemberError(
                f"member has {other.num_classes} classes on {tuple(other.dims)}, "
                f"accumulator expects {self.num_classes} on {self.dims}")

    def add(self, member: ProbabilityMap, threads: int = 1) -> "VarianceAccumulator":
        self._check(member)
        n = self.count + 1

        def update(zs):
            for label in range(self.num_classes):
                x = np.asarray(member.plane(label, zs), dtype=np.float64)
                mean = self.mean[label, :, :, zs]
                delta = x - mean
                mean += delta / n
                self.m2[label, :, :, zs] += delta * (x - mean)

        _run(update, _slabs(self.dims, 32, threads), threads)
        self.count = n
        return self


def accumulate(acc: VarianceAccumulator, member: ProbabilityMap,
               threads: int = 1) -> VarianceAccumulator:
    """Fold one member into ``acc`` (in place) with a Welford update."""
    return acc.add(member, threads)


def merge(a: VarianceAccumulator, b: VarianceAccumulator) -> VarianceAccumulator:
    """Combine two accumulators as if all their members had been added to one."""
    a._check(b)
    if b.count == 0:
        return a.copy()
    if a.count == 0:
        return b.copy()
    out = VarianceAccumulator(a.num_classes, a.dims, a.spacing, a.affine)
    n = a.count + b.count
    for zs in _slabs(a.dims, 24 * a.num_classes):
        delta = b.mean[:, :, :, zs] - a.mean[:, :, :, zs]
        out.mean[:, :, :, zs] = a.mean[:, :, :, zs] + delta * (b.count / n)
        out.m2[:, :, :, zs] = (a.m2[:, :, :, zs] + b.m2[:, :, :, zs]
                               + delta * delta * (a.count * b.count / n))
    out.count = n
    return out


def _class_range(num_classes: int, exclude_background: bool):
    first = 1 if exclude_background else 0
    if num_classes - first < 1:
        raise InvalidArgumentError("no classes left to average over")
    return range(first, num_classes)


def voxel_uncertainty(acc: VarianceAccumulator, exclude_background: bool = False,
                      ddof: int = 0) -> VoxelGrid:
    """
    Per-voxel class-averaged variance ``(1/L) sum_l M2[l] / N``.

    ``ddof=1`` switches to the sample variance; a single member always
    gives zero.
    """
    if acc.count < 1:
        raise EmptyEnsembleError("no members have been accumulated")
    labels = _class_range(acc.num_classes, exclude_background)
    out = np.zeros(acc.dims)
    denom = acc.count - ddof
    if denom > 0:
        for label in labels:
            out += acc.m2[label]
        out /= denom * len(labels)
    return VoxelGrid(out, acc.spacing, acc.affine, "uncertainty")


def mean_uncertainty(umap: VoxelGrid, mask: VoxelGrid | None = None) -> float:
    """Average of the uncertainty map over the volume, or over ``mask`` voxels."""
    data = umap.data
    if mask is None:
        total = 0.0
        for zs in _slabs(umap.dims, 8):
            total += float(np.sum(data[:, :, zs], dtype=np.float64))
        return total / umap.num_voxels
    if tuple(mask.dims) != tuple(umap.dims):
        raise IncompatibleVolumesError(f"mask shape {mask.dims} != map shape {umap.dims}")
    total, count = 0.0, 0
    for zs in _slabs(umap.dims, 8):
        keep = np.asarray(mask.data[:, :, zs]) != 0
        total += float(np.sum(data[:, :, zs][keep], dtype=np.float64))
        count += int(np.count_nonzero(keep))
    if count == 0:
        raise EmptyDomainError("mask selects no voxels")
    return total / count


def _onehot_values(counts: np.ndarray, n_members: int, labels, ddof: int) -> np.ndarray:
    out = np.zeros(counts.shape[1:])
    for label in labels:
        q = counts[label] / n_members
        out += q * (1.0 - q)
    out /= len(labels)
    if ddof:
        out *= n_members / (n_members - ddof) if n_members > ddof else 0.0
    return out


def onehot_uncertainty(votes: np.ndarray, num_members: int, num_classes: int | None = None,
                       exclude_background: bool = False, ddof: int = 0,
                       spacing=(1.0, 1.0, 1.0), affine=None) -> VoxelGrid:
    """
    Uncertainty of hard-label ensembles from per-voxel vote counts.

    ``votes`` has shape ``(L, nx, ny, nz)``; with vote shares ``q_l`` the
    value is ``sum_l q_l (1 - q_l) / L``, i.e. ``(1 - sum_l q_l^2) / L``.
    """
    votes = np.asarray(votes)
    num_classes = num_classes or votes.shape[0]
    if votes.ndim != 4 or votes.shape[0] != num_classes:
        raise InvalidArgumentError(f"votes must have shape (L, nx, ny, nz) with L={num_classes}")
    if num_members < 1:
        raise EmptyEnsembleError("ensemble has no members")
    if votes.min() < 0 or np.any(votes.sum(axis=0) != num_members):
        raise CorruptVotesError(f"vote counts do not sum to N={num_members} at every voxel")
    labels = _class_range(num_classes, exclude_background)
    return VoxelGrid(_onehot_values(votes, num_members, labels, ddof), spacing, affine,
                     "uncertainty")


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def _check_members(members) -> None:
    if not members:
        raise EmptyEnsembleError("ensemble has no members")
    first = members[0]
    for m in members[1:]:
        if tuple(m.dims) != tuple(first.dims) or m.num_classes != first.num_classes:
            raise IncompatibleMemberError(
                f"member with {m.num_classes} classes on {tuple(m.dims)} does not match "
                f"{first.num_classes} classes on {tuple(first.dims)}")


def vote_counts(stack, num_classes: int, zs: slice = slice(None)) -> np.ndarray:
    """Per-class vote counts ``(L, nx, ny, dz)`` for label arrays in ``stack``."""
    first = np.asarray(stack[0][:, :, zs])
    counts = np.zeros((num_classes, first.size), dtype=np.uint16)
    cols = np.arange(first.size)
    for member in stack:
        # each (label, voxel) pair occurs once per member, so += is safe
        counts[np.asarray(member[:, :, zs]).ravel(), cols] += 1
    return counts.reshape((num_classes,) + first.shape)


def _argmax_lowest(counts: np.ndarray, num_classes: int) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest label on ties
    return np.argmax(counts, axis=0).astype(label_dtype(num_classes))


def fuse_majority(members: list, threads: int = 1) -> LabelMap:
    """
    Per-voxel majority vote over label maps.

    Ties go to the lowest label index, so the result does not depend on the
    order of ``members``.
    """
    _check_members(members)
    first = members[0]
    if len(members) == 1:
        return LabelMap(np.array(first.data), first.spacing, first.affine,
                        num_classes=first.num_classes)
    n = first.num_classes
    out = np.empty(first.dims, dtype=label_dtype(n))
    stack = [m.data for m in members]

    def fuse(zs):
        out[:, :, zs] = _argmax_lowest(vote_counts(stack, n, zs), n)

    _run(fuse, _slabs(first.dims, 2 * n + 8, threads), threads)
    return LabelMap(out, first.spacing, first.affine, num_classes=n)


def fuse_mean_probability(members: list):
    """Average the members' probabilities; return ``(argmax labels, mean map)``."""
    _check_members(members)
    first = members[0]
    total = np.zeros((first.num_classes,) + tuple(first.dims))
    for m in members:
        for label in range(first.num_classes):
            total[label] += m.plane(label)
    total /= len(members)
    mean = ProbabilityMap(total.astype(np.float32), first.spacing, first.affine, validate=False)
    labels = _argmax_lowest(total, first.num_classes)
    return LabelMap(labels, first.spacing, first.affine, num_classes=first.num_classes), mean


# ---------------------------------------------------------------------------
# ensemble runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionSource:
    """One ensemble member: which model, which test-time transform, where."""

    member_id: str
    path: str
    model_tag: str = ""
    transform: TransformSpec = field(default_factory=TransformSpec)

    @classmethod
    def from_dict(cls, obj: dict, base_dir: str = "") -> "PredictionSource":
        try:
            path = obj["path"]
            member_id = str(obj.get("member_id", path))
        except (KeyError, TypeError) as exc:
            raise InvalidSpecError(f"manifest entry needs a 'path': {obj!r}") from exc
        if base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        transform = TransformSpec.from_dict(obj.get("transform", {"kind": "identity"}))
        return cls(member_id, path, str(obj.get("model_tag", "")), transform)

    def to_dict(self) -> dict:
        return {"member_id": self.member_id, "model_tag": self.model_tag,
                "transform": self.transform.to_dict(), "path": self.path}


def load_manifest(path) -> list:
    """Read a JSON list of prediction sources; relative paths resolve next to it."""
    if not os.path.exists(path):
        raise InputMissingError(f"no such manifest: {path}")
    with open(path) as f:
        try:
            entries = json.load(f)
        except json.JSONDecodeError as exc:
            raise InvalidSpecError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(entries, dict):
        entries = entries.get("members", entries.get("sources"))
    if not isinstance(entries, list):
        raise InvalidSpecError(f"{path}: expected a list of prediction sources")
    base = os.path.dirname(os.path.abspath(path))
    sources = [PredictionSource.from_dict(e, base) for e in entries]
    ids = [s.member_id for s in sources]
    if len(set(ids)) != len(ids):
        raise InvalidSpecError(f"{path}: member ids are not unique")
    return sources


@dataclass
class ScanReport:
    scan_id: str
    ensemble_size: int
    mean_uncertainty: float
    num_voxels: int
    num_classes: int
    fused_prediction_path: str | None = None

    def to_dict(self) -> dict:
        out = {"scan_id": self.scan_id, "ensemble_size": self.ensemble_size,
               "mean_uncertainty": self.mean_uncertainty, "num_voxels": self.num_voxels,
               "num_classes": self.num_classes}
        if self.fused_prediction_path:
            out["fused_prediction_path"] = self.fused_prediction_path
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ScanReport":
        return cls(str(obj["scan_id"]), int(obj["ensemble_size"]),
                   float(obj["mean_uncertainty"]), int(obj["num_voxels"]),
                   int(obj["num_classes"]), obj.get("fused_prediction_path"))


def _load_member(source: PredictionSource, num_classes, fill: FillPolicy):
    """Read one member and map it back into the original scan space."""
    back = invert(source.transform)
    if is_probability_volume(source.path):
        pmap = read_probability_map(source.path)
        if num_classes and pmap.num_classes != num_classes:
            raise IncompatibleMemberError(
                f"{source.member_id}: {pmap.num_classes} class planes, expected {num_classes}")
        return apply_probability(back, pmap, fill)
    labels = read_label_map(source.path, num_classes)
    return apply(back, labels, "nearest", fill)


class _LabelStack:
    """N label volumes, in memory or spooled to a temporary memory map."""

    def __init__(self, n, dims, dtype, spool_dir=None):
        nbytes = n * int(np.prod(dims)) * np.dtype(dtype).itemsize
        self._file = None
        if nbytes > _SPOOL_BYTES:
            self._file = tempfile.NamedTemporaryFile(dir=spool_dir, suffix=".labels")
            self.data = np.memmap(self._file, dtype=dtype, mode="w+", shape=(n,) + dims)
        else:
            self.data = np.empty((n,) + dims, dtype=dtype)

    def close(self):
        if self._file is not None:
            del self.data
            self._file.close()


def run_ensemble(sources: list, fill: FillPolicy = FillPolicy(), fusion: str = "majority",
                 num_classes: int | None = None, exclude_background: bool = False,
                 ddof: int = 0, mask: VoxelGrid | None = None, scan_id: str = "",
                 threads: int = 1, spool_dir=None):
    """
    Fuse the members listed in ``sources`` and measure their disagreement.

    Every member is mapped back through the inverse of its test-time
    transform first. Any unreadable or mismatching member aborts the run.

    Returns:
        ``(fused LabelMap, uncertainty map, ScanReport)``
    """
    if fusion not in FUSION_MODES:
        raise InvalidArgumentError(f"unknown fusion mode {fusion!r}")
    if not sources:
        raise EmptyEnsembleError("ensemble has no members")
    for s in sources:
        if not os.path.exists(s.path):
            raise InputMissingError(f"member {s.member_id}: no such file {s.path}")

    n_members = len(sources)
    soft = any(is_probability_volume(s.path) for s in sources)
    first = _load_member(sources[0], num_classes, fill)
    if soft and isinstance(first, LabelMap):
        first = ProbabilityMap.onehot(first)
    L = first.num_classes
    dims = tuple(first.dims)
    log.info("ensemble of %d members, %d classes on %s", n_members, L, dims)

    def check(member, source):
        if tuple(member.dims) != dims or member.num_classes != L:
            raise IncompatibleMemberError(
                f"member {source.member_id}: {member.num_classes} classes on "
                f"{tuple(member.dims)}, expected {L} on {dims}")
        if not np.allclose(member.affine, first.affine, atol=1e-4):
            raise IncompatibleMemberError(f"member {source.member_id}: different scan geometry")

    if not soft:
        fused, umap = _run_hard(first, sources, fill, L, exclude_background, ddof,
                                threads, spool_dir, check)
    else:
        fused, umap = _run_soft(first, sources, fill, L, fusion, exclude_background, ddof,
                                threads, check)
    uc = mean_uncertainty(umap, mask)
    report = ScanReport(scan_id, n_members, uc, fused.num_voxels, L)
    return fused, umap, report


def _run_hard(first, sources, fill, L, exclude_background, ddof, threads, spool_dir, check):
    dims = first.dims
    n = len(sources)
    labels = _class_range(L, exclude_background)
    stack = _LabelStack(n, dims, label_dtype(L), spool_dir)
    try:
        stack.data[0] = first.data
        for i, source in enumerate(sources[1:], start=1):
            member = _load_member(source, L, fill)
            check(member, source)
            stack.data[i] = member.data
        fused = np.empty(dims, dtype=label_dtype(L))
        unc = np.empty(dims)

        def work(zs):
            counts = vote_counts(stack.data, L, zs)
            fused[:, :, zs] = _argmax_lowest(counts, L)
            unc[:, :, zs] = _onehot_values(counts, n, labels, ddof)

        # counts (2 bytes) plus a few float64 temporaries per class
        _run(work, _slabs(dims, 2 * L + 24, threads), threads)
    finally:
        stack.close()
    return (LabelMap(fused, first.spacing, first.affine, num_classes=L),
            VoxelGrid(unc, first.spacing, first.affine, "uncertainty"))


def _run_soft(first, sources, fill, L, fusion, exclude_background, ddof, threads, check):
    acc = VarianceAccumulator.like(first)
    acc.add(first, threads)
    votes = None
    if fusion == "majority":
        votes = np.zeros((L,) + tuple(first.dims), dtype=np.uint16)
    cols = None

    def vote(member):
        nonlocal cols
        best = member.argmax().data.ravel()
        if cols is None:
            cols = np.arange(best.size)
        votes.reshape(L, -1)[best, cols] += 1

    if votes is not None:
        vote(first)
    for source in sources[1:]:
        member = _load_member(source, L, fill)
        if isinstance(member, LabelMap):
            member = ProbabilityMap.onehot(member)
        check(member, source)
        acc.add(member, threads)
        if votes is not None:
            vote(member)
    umap = voxel_uncertainty(acc, exclude_background, ddof)
    counts = votes if votes is not None else acc.mean
    fused = LabelMap(_argmax_lowest(counts, L), first.spacing, first.affine, num_classes=L)
    return fused, umap
