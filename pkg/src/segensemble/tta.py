"""
Invertible test-time augmentation transforms.

A transform maps a source voxel ``x`` to ``M (x - c) + c + t`` where ``c`` is
the volume centre ``(dims - 1) / 2``; integer offsets are the special case
``M = I``. Rotating about the centre keeps axis-aligned 90 degree rotations
on the voxel lattice.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, InvalidTransformError
from .volume_io import LabelMap, ProbabilityMap, VoxelGrid, label_dtype

KINDS = ("identity", "integer-offset", "affine")

# output voxels processed per block of the affine resampler
_BLOCK_VOXELS = 1 << 21


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"
    offset: tuple = (0, 0, 0)
    matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidTransformError(f"unknown transform kind {self.kind!r}")
        offset = tuple(self.offset)
        if len(offset) != 3 or any(float(d) != int(d) for d in offset):
            raise InvalidTransformError(f"offset must be 3 whole numbers, got {offset}")
        object.__setattr__(self, "offset", tuple(int(d) for d in offset))
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.shape != (3, 3):
            raise InvalidTransformError("affine matrix must be 3x3")
        det = float(np.linalg.det(matrix))
        if self.kind == "affine" and abs(det) <= 1e-9:
            raise InvalidTransformError(
                f"affine matrix is not invertible (determinant {det:.3g})")
        object.__setattr__(self, "matrix", tuple(map(tuple, matrix.tolist())))
        translation = tuple(float(v) for v in self.translation)
        if len(translation) != 3:
            raise InvalidTransformError("translation must have 3 components")
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "TransformSpec":
        return cls()

    @classmethod
    def shift(cls, offset) -> "TransformSpec":
        return cls("integer-offset", offset=tuple(offset))

    @classmethod
    def affine(cls, matrix, translation=(0.0, 0.0, 0.0)) -> "TransformSpec":
        return cls("affine", matrix=tuple(map(tuple, np.asarray(matrix, float))),
                   translation=tuple(translation))

    @classmethod
    def rotation(cls, degrees: float, axis: int = 2) -> "TransformSpec":
        """Rotation about the volume centre in the plane orthogonal to ``axis``."""
        theta = np.deg2rad(degrees)
        cos, sin = np.cos(theta), np.sin(theta)
        i, j = [a for a in range(3) if a != axis]
        mat = np.eye(3)
        mat[i, i], mat[i, j], mat[j, i], mat[j, j] = cos, -sin, sin, cos
        return cls.affine(mat)

    @property
    def M(self) -> np.ndarray:
        if self.kind == "affine":
            return np.array(self.matrix)
        return np.eye(3)

    @property
    def t(self) -> np.ndarray:
        if self.kind == "affine":
            return np.array(self.translation)
        if self.kind == "integer-offset":
            return np.array(self.offset, dtype=np.float64)
        return np.zeros(3)

    def to_dict(self) -> dict:
        if self.kind == "identity":
            return {"kind": "identity"}
        if self.kind == "integer-offset":
            return {"kind": self.kind, "offset": list(self.offset)}
        return {"kind": self.kind, "matrix": [list(r) for r in self.matrix],
                "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, obj: dict) -> "TransformSpec":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise InvalidTransformError(f"transform must be an object with a 'kind': {obj!r}")
        kind = obj["kind"]
        if kind == "identity":
            return cls()
        if kind == "integer-offset":
            return cls(kind, offset=tuple(obj.get("offset", (0, 0, 0))))
        if kind == "affine":
            return cls(kind, matrix=tuple(map(tuple, obj["matrix"])),
                       translation=tuple(obj.get("translation", (0.0, 0.0, 0.0))))
        raise InvalidTransformError(f"unknown transform kind {kind!r}")


def load_spec(text_or_path: str) -> TransformSpec:
    """Parse a spec given inline as JSON or as a path to a JSON file."""
    if os.path.exists(text_or_path):
        with open(text_or_path) as f:
            text = f.read()
    else:
        text = text_or_path
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidTransformError(f"transform is neither a file nor valid JSON: {exc}") from exc
    return TransformSpec.from_dict(obj)


@dataclass(frozen=True)
class FillPolicy:
    """Values given to output voxels whose source lies outside the volume."""

    label_fill: int = 0
    intensity_fill: float = -1024.0

    def value_for(self, grid: VoxelGrid):
        if grid.kind == "label":
            if self.label_fill >= grid.num_classes:
                raise InvalidArgumentError(
                    f"label fill {self.label_fill} out of range for {grid.num_classes} classes")
            return self.label_fill
        if grid.kind == "intensity":
            return self.intensity_fill
        return 0.0


def invert(spec: TransformSpec) -> TransformSpec:
    if spec.kind == "identity":
        return spec
    if spec.kind == "integer-offset":
        return TransformSpec.shift(tuple(-d for d in spec.offset))
    inv = np.linalg.inv(spec.M)
    return TransformSpec.affine(inv, -inv @ spec.t)


def _shift(data: np.ndarray, offset, fill) -> np.ndarray:
    """``out[x + d] = data[x]``; uncovered voxels get ``fill``."""
    out = np.full(data.shape, fill, dtype=data.dtype)
    src, dst = [], []
    for d, n in zip(offset, data.shape):
        if abs(d) >= n:
            return out
        src.append(slice(max(0, -d), n - max(0, d)))
        dst.append(slice(max(0, d), n - max(0, -d)))
    out[tuple(dst)] = data[tuple(src)]
    return out


def _source_coords(spec: TransformSpec, dims, zs: slice) -> np.ndarray:
    """Source coordinates (3, nx, ny, dz) sampled by output voxels in ``zs``."""
    centre = (np.asarray(dims, dtype=np.float64) - 1) / 2
    inv = np.linalg.inv(spec.M)
    grid = np.stack(np.meshgrid(np.arange(dims[0]), np.arange(dims[1]),
                                np.arange(dims[2])[zs], indexing="ij")).astype(np.float64)
    rel = grid - (centre + spec.t)[:, None, None, None]
    return np.einsum("ij,j...->i...", inv, rel) + centre[:, None, None, None]


def _z_blocks(dims):
    step = max(1, _BLOCK_VOXELS // (dims[0] * dims[1]))
    for z0 in range(0, dims[2], step):
        yield slice(z0, min(dims[2], z0 + step))


def _sample_nearest(data, coords, fill):
    idx = np.floor(coords + 0.5).astype(np.intp)
    inside = np.ones(coords.shape[1:], dtype=bool)
    for axis, n in enumerate(data.shape):
        inside &= (idx[axis] >= 0) & (idx[axis] < n)
        np.clip(idx[axis], 0, n - 1, out=idx[axis])
    out = data[idx[0], idx[1], idx[2]]
    return np.where(inside, out, np.asarray(fill, dtype=data.dtype)).astype(data.dtype, copy=False)


def _sample_linear(data, coords, fill):
    """Trilinear sampling; points more than half a voxel outside get ``fill``."""
    inside = np.ones(coords.shape[1:], dtype=bool)
    lo, w = [], []
    for axis, n in enumerate(data.shape):
        c = coords[axis]
        inside &= (c >= -0.5) & (c <= n - 0.5)
        c = np.clip(c, 0.0, n - 1)
        f = np.minimum(np.floor(c).astype(np.intp), max(n - 2, 0))
        lo.append(f)
        w.append(c - f)
    hi = [np.minimum(f + 1, n - 1) for f, n in zip(lo, data.shape)]
    src = np.asarray(data, dtype=np.float64)
    out = np.zeros(coords.shape[1:])
    for cx in (0, 1):
        ix = hi[0] if cx else lo[0]
        wx = w[0] if cx else 1 - w[0]
        for cy in (0, 1):
            iy = hi[1] if cy else lo[1]
            wy = w[1] if cy else 1 - w[1]
            for cz in (0, 1):
                iz = hi[2] if cz else lo[2]
                wz = w[2] if cz else 1 - w[2]
                out += wx * wy * wz * src[ix, iy, iz]
    return np.where(inside, out, fill)


def _transform_array(spec, data, interp, fill):
    if spec.kind == "identity":
        return np.array(data)
    if spec.kind == "integer-offset":
        return _shift(np.asarray(data), spec.offset, fill)
    dims = data.shape
    sampler = _sample_nearest if interp == "nearest" else _sample_linear
    out_dtype = data.dtype if interp == "nearest" or data.dtype == np.float32 else np.float64
    out = np.empty(dims, dtype=out_dtype)
    for zs in _z_blocks(dims):
        out[:, :, zs] = sampler(data, _source_coords(spec, dims, zs), fill)
    return out


def apply(spec: TransformSpec, grid: VoxelGrid, interp: str = "nearest",
          fill: FillPolicy = FillPolicy()) -> VoxelGrid:
    """
    Transform a volume, keeping its dims.

    Integer offsets and the identity move voxels by index only, so they are
    exact for every element kind. Label maps require nearest interpolation;
    :func:`apply_labels_via_onehot` is the interpolating alternative.
    """
    if interp not in ("nearest", "trilinear"):
        raise InvalidArgumentError(f"unknown interpolation {interp!r}")
    if grid.kind == "label" and interp != "nearest":
        raise InvalidArgumentError("label maps must be transformed with nearest interpolation")
    out = _transform_array(spec, grid.data, interp, fill.value_for(grid))
    return grid.with_data(out)


def apply_probability(spec: TransformSpec, pmap: ProbabilityMap,
                      fill: FillPolicy = FillPolicy()) -> ProbabilityMap:
    """
    Transform class planes one by one.

    Affine transforms interpolate each plane trilinearly and renormalise every
    voxel to unit sum; voxels sampled from outside the volume become one-hot
    on ``fill.label_fill``.
    """
    n = pmap.num_classes
    if fill.label_fill >= n:
        raise InvalidArgumentError(f"label fill {fill.label_fill} out of range for {n} classes")
    if pmap.mode == "onehot" and spec.kind != "affine":
        return ProbabilityMap.onehot(apply(spec, pmap.labels, "nearest", fill))
    planes = np.empty((n,) + pmap.dims, dtype=np.float32)
    for label in range(n):
        planes[label] = _transform_array(spec, pmap.plane(label), "trilinear",
                                         1.0 if label == fill.label_fill else 0.0)
    if spec.kind == "affine":
        total = planes.sum(axis=0)
        empty = total <= 0
        planes /= np.where(empty, 1.0, total)
        planes[fill.label_fill][empty] = 1.0
    return ProbabilityMap(planes, pmap.spacing, pmap.affine, validate=False)


def apply_labels_via_onehot(spec: TransformSpec, labels: LabelMap,
                            fill: FillPolicy = FillPolicy()) -> LabelMap:
    """Transform one-hot planes trilinearly, then take the per-voxel argmax."""
    moved = apply_probability(spec, ProbabilityMap.onehot(labels), fill)
    if moved.mode == "onehot":
        return moved.labels
    best = np.zeros(labels.dims, dtype=label_dtype(labels.num_classes))
    top = moved.plane(0).copy()
    for label in range(1, labels.num_classes):
        plane = moved.plane(label)
        better = plane > top
        best[better] = label
        top = np.where(better, plane, top)
    return LabelMap(best, labels.spacing, labels.affine, num_classes=labels.num_classes)


def valid_mask(spec: TransformSpec, dims, tol: float = 1e-6) -> LabelMap:
    """
    Binary map of voxels that stay inside the volume under ``spec``.

    Only these voxels can be compared after a forward and inverse round trip.
    """
    dims = tuple(int(n) for n in dims)
    if spec.kind == "identity":
        return LabelMap(np.ones(dims, np.uint8), num_classes=2)
    if spec.kind == "integer-offset":
        mask = np.ones(dims, dtype=bool)
        for axis, (d, n) in enumerate(zip(spec.offset, dims)):
            keep = np.zeros(n, dtype=bool)
            keep[max(0, -d):max(0, n - max(0, d))] = True
            shape = [1, 1, 1]
            shape[axis] = n
            mask &= keep.reshape(shape)
        return LabelMap(mask.astype(np.uint8), num_classes=2)
    # forward position of each source voxel must land inside the volume
    mask = np.empty(dims, dtype=np.uint8)
    for zs in _z_blocks(dims):
        pos = _source_coords(invert(spec), dims, zs)
        inside = np.ones(pos.shape[1:], dtype=bool)
        for axis, n in enumerate(dims):
            inside &= (pos[axis] >= -tol) & (pos[axis] <= n - 1 + tol)
        mask[:, :, zs] = inside
    return LabelMap(mask, num_classes=2)
