"""
Synthetic phantoms and surrogate ensemble members.

Members are noisy copies of a phantom ground truth, so the measurement
pipeline (fusion, uncertainty, correction effort) can be checked end to end
without trained networks.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ensemble import fuse_majority, mean_uncertainty, onehot_uncertainty, vote_counts
from .errors import InvalidSpecError
from .metrics import correction_effort
from .selection import correlation_summary
from .volume_io import LabelMap, label_dtype

STRUCTURES = ("nested-spheres", "random-blobs")

# regeneration attempts before a phantom spec is declared unsatisfiable
_MAX_ATTEMPTS = 20

_NEIGHBOURS = [(a, s) for a in range(3) for s in (-1, 1)]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    num_classes: int = 5
    structure: str = "nested-spheres"
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise InvalidSpecError(f"phantom dims must be 3 values >= 8, got {self.dims}")
        if self.num_classes < 2:
            raise InvalidSpecError("a phantom needs at least 2 classes")
        if self.structure not in STRUCTURES:
            raise InvalidSpecError(f"unknown phantom structure {self.structure!r}")


@dataclass(frozen=True)
class NoiseSpec:
    """
    Args:
        boundary_flip_prob: chance that a voxel next to a class boundary takes
            the label of one of its differing 6-neighbours.
        global_flip_prob: chance that any voxel is redrawn uniformly from all
            classes (which includes its own).
        seed: int or sequence of ints for ``numpy.random.default_rng``.
    """

    boundary_flip_prob: float = 0.0
    global_flip_prob: float = 0.0
    seed: int | tuple = 0

    def __post_init__(self):
        for name in ("boundary_flip_prob", "global_flip_prob"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise InvalidSpecError(f"{name} must lie in [0, 1], got {value}")


def _nested_spheres(spec: PhantomSpec, rng) -> np.ndarray:
    dims = np.asarray(spec.dims, dtype=float)
    centre = (dims - 1) / 2 + rng.uniform(-1, 1, 3) * dims / 16
    outer = 0.45 * dims.min() * rng.uniform(0.8, 1.0)
    # anisotropic stretch keeps the shells from being perfect spheres
    stretch = rng.uniform(0.85, 1.15, 3)
    idx = np.indices(spec.dims, dtype=float)
    r = np.sqrt(sum(((idx[a] - centre[a]) / stretch[a]) ** 2 for a in range(3)))
    n_fg = spec.num_classes - 1
    radii = outer * (np.arange(n_fg, 0, -1) / n_fg) * rng.uniform(0.9, 1.0, n_fg)
    out = np.zeros(spec.dims, dtype=label_dtype(spec.num_classes))
    for label, radius in enumerate(np.sort(radii)[::-1], start=1):
        out[r <= radius] = label
    return out


def _random_blobs(spec: PhantomSpec, rng) -> np.ndarray:
    dims = np.asarray(spec.dims, dtype=float)
    idx = np.indices(spec.dims, dtype=float)
    out = np.zeros(spec.dims, dtype=label_dtype(spec.num_classes))
    for label in range(1, spec.num_classes):
        centre = rng.uniform(0.15, 0.85, 3) * (dims - 1)
        axes = rng.uniform(0.06, 0.2, 3) * dims.min()
        inside = sum(((idx[a] - centre[a]) / axes[a]) ** 2 for a in range(3)) <= 1
        out[inside] = label
    return out


def make_phantom(spec: PhantomSpec) -> LabelMap:
    """
    Deterministic phantom in which every class occupies at least one voxel.

    Layouts missing a class are redrawn from a derived seed; after
    ``_MAX_ATTEMPTS`` failures the spec is rejected.
    """
    if spec.num_classes > np.prod(spec.dims):
        raise InvalidSpecError("more classes than voxels")
    build = _nested_spheres if spec.structure == "nested-spheres" else _random_blobs
    for attempt in range(_MAX_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        data = build(spec, rng)
        if np.unique(data).size == spec.num_classes:
            return LabelMap(data, num_classes=spec.num_classes)
    raise InvalidSpecError(
        f"could not place all {spec.num_classes} classes in a {spec.dims} phantom")


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Voxels with at least one 6-neighbour of a different class."""
    padded = np.pad(labels, 1, mode="edge")
    core = (slice(1, -1),) * 3
    out = np.zeros(labels.shape, dtype=bool)
    for axis, step in _NEIGHBOURS:
        sl = list(core)
        sl[axis] = slice(1 + step, labels.shape[axis] + 1 + step)
        out |= padded[tuple(sl)] != labels
    return out


def perturb(gt: LabelMap, noise: NoiseSpec) -> LabelMap:
    """Noisy copy of ``gt``; boundary swaps are applied before global redraws."""
    rng = np.random.default_rng(noise.seed)
    src = np.asarray(gt.data)
    out = src.copy()
    if noise.boundary_flip_prob > 0:
        padded = np.pad(src, 1, mode="edge")
        core = (slice(1, -1),) * 3
        best_key = np.full(src.shape, -1.0)
        choice = src.copy()
        for axis, step in _NEIGHBOURS:
            sl = list(core)
            sl[axis] = slice(1 + step, src.shape[axis] + 1 + step)
            nb = padded[tuple(sl)]
            # random key per candidate; the largest picks the neighbour
            key = np.where(nb != src, rng.random(src.shape), -1.0)
            better = key > best_key
            choice[better] = nb[better]
            best_key[better] = key[better]
        flip = (best_key >= 0) & (rng.random(src.shape) < noise.boundary_flip_prob)
        out[flip] = choice[flip]
    if noise.global_flip_prob > 0:
        flip = rng.random(src.shape) < noise.global_flip_prob
        out[flip] = rng.integers(0, gt.num_classes, int(flip.sum()))
    return LabelMap(out, gt.spacing, gt.affine, num_classes=gt.num_classes)


@dataclass
class ExperimentRecord:
    config: dict
    scans: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config": self.config, "scans": self.scans, "summary": self.summary}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["scan_id", "boundary_flip_prob", "global_flip_prob", "mean_uncertainty",
                "differing_voxels", "percentage"]
        writer = csv.DictWriter(buf, cols, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for scan in self.scans:
            writer.writerow({**scan, **scan["noise"]})
        return buf.getvalue()


def default_noise_grid(num_scans: int, eps_min: float = 0.01, eps_max: float = 0.2,
                       boundary_flip_prob: float = 0.05) -> list:
    """
    Global flip rates spread between ``eps_min`` and ``eps_max``.

    Spacing is logarithmic, or linear when ``eps_min`` is 0.
    """
    if not 0 <= eps_min <= eps_max <= 1:
        raise InvalidSpecError(f"need 0 <= eps_min <= eps_max <= 1, got {eps_min}, {eps_max}")
    spread = np.geomspace if eps_min > 0 else np.linspace
    return [NoiseSpec(boundary_flip_prob, float(e))
            for e in spread(eps_min, eps_max, num_scans)]


def _scan(i, gt_spec, noise, members_per_scan, seed):
    gt = make_phantom(gt_spec)
    members = [perturb(gt, NoiseSpec(noise.boundary_flip_prob, noise.global_flip_prob,
                                     (seed, i, m)))
               for m in range(members_per_scan)]
    L = gt.num_classes
    fused = fuse_majority(members)
    votes = vote_counts([m.data for m in members], L)
    uc = mean_uncertainty(onehot_uncertainty(votes, members_per_scan, L))
    effort = correction_effort(fused, gt)
    return {
        "scan_id": f"synth-{i:03d}",
        "noise": {"boundary_flip_prob": noise.boundary_flip_prob,
                  "global_flip_prob": noise.global_flip_prob},
        "mean_uncertainty": uc,
        "differing_voxels": effort.differing_voxels,
        "percentage": effort.percentage,
        "members_identical": bool(all(np.array_equal(members[0].data, m.data)
                                       for m in members[1:])),
    }


def run_effort_experiment(num_scans: int, noise_grid: list, members_per_scan: int = 6,
                          seed: int = 0, dims=(64, 64, 64), num_classes: int = 5,
                          structure: str = "nested-spheres", threads: int = 1) -> ExperimentRecord:
    """
    Relate ensemble uncertainty to correction effort on synthetic scans.

    Scan ``i`` gets its own phantom and noise level ``noise_grid[i % len]``;
    its members are perturbed copies of the phantom, fused by majority vote
    and compared against the phantom. The summary carries Pearson and
    Spearman coefficients between mean uncertainty and correction
    percentage, or an ``undefined_correlation`` flag when either series is
    constant or every scan has the same noise level.
    """
    if num_scans < 10:
        raise InvalidSpecError(f"need at least 10 scans, got {num_scans}")
    if not noise_grid:
        raise InvalidSpecError("noise grid is empty")
    if members_per_scan < 1:
        raise InvalidSpecError("need at least one member per scan")
    specs = [PhantomSpec(tuple(dims), num_classes, structure,
                         int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
             for i in range(num_scans)]
    jobs = [(i, specs[i], noise_grid[i % len(noise_grid)], members_per_scan, seed)
            for i in range(num_scans)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            scans = list(pool.map(lambda job: _scan(*job), jobs))
    else:
        scans = [_scan(*job) for job in jobs]
    config = {"num_scans": num_scans, "members_per_scan": members_per_scan, "seed": seed,
              "dims": list(dims), "num_classes": num_classes, "structure": structure,
              "noise_grid": [{"boundary_flip_prob": n.boundary_flip_prob,
                             "global_flip_prob": n.global_flip_prob} for n in noise_grid]}
    levels = {(s["noise"]["boundary_flip_prob"], s["noise"]["global_flip_prob"]) for s in scans}
    if len(levels) < 2:
        # one noise level carries no dose-response signal; any coefficient is noise
        summary = {"n": num_scans, "pearson": None, "spearman": None,
                   "undefined_correlation": True, "reason": "all scans share one noise level"}
    else:
        summary = correlation_summary([s["mean_uncertainty"] for s in scans],
                                      [s["percentage"] for s in scans])
    return ExperimentRecord(config, scans, summary)
