"""
Volumetric grid types and a minimal NIfTI-1 reader/writer.

Arrays are indexed ``[x, y, z]``; on disk NIfTI stores x fastest, which is
numpy Fortran order.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    CorruptInputError,
    InputMissingError,
    InvalidArgumentError,
    UnsupportedFormatError,
    VolumeIOError,
)

ELEMENT_KINDS = ("intensity", "label", "probability", "uncertainty")

# probabilities may leave [0, 1] or miss unit sum by at most this much
PROBABILITY_TOL = 1e-4

_HEADER_SIZE = 348
_DATA_OFFSET = 352

_DTYPE_CODES = {
    2: np.dtype("uint8"),
    4: np.dtype("int16"),
    8: np.dtype("int32"),
    16: np.dtype("float32"),
}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """
    Dense 3D raster with physical geometry.

    Args:
        data: array of shape ``(nx, ny, nz)``.
        spacing: voxel size in mm along each axis.
        affine: 4x4 voxel-to-world matrix. Defaults to ``diag(spacing, 1)``.
        kind: one of ``ELEMENT_KINDS``.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    kind: str = "intensity"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidArgumentError(f"expected a 3D array, got {data.ndim}D")
        if min(data.shape) < 1:
            raise InvalidArgumentError(f"all dims must be positive, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise InvalidArgumentError(f"spacing must be 3 positive values, got {spacing}")
        if self.affine is None:
            affine = np.diag(spacing + (1.0,))
        else:
            affine = np.array(self.affine, dtype=np.float64)
            if affine.shape != (4, 4):
                raise InvalidArgumentError("affine must be 4x4")
            if abs(np.linalg.det(affine[:3, :3])) <= 1e-12:
                raise InvalidArgumentError("affine is not invertible")
        if self.kind not in ELEMENT_KINDS:
            raise InvalidArgumentError(f"unknown element kind {self.kind!r}")
        view = data.view()
        view.flags.writeable = False
        affine.flags.writeable = False
        object.__setattr__(self, "data", view)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def num_voxels(self) -> int:
        return int(self.data.size)

    def same_geometry(self, other, atol: float = 1e-5) -> bool:
        return self.dims == tuple(other.dims) and np.allclose(
            self.affine, other.affine, atol=atol
        )

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "VoxelGrid":
        """Return a grid with the same geometry holding ``data``."""
        return VoxelGrid(data, self.spacing, self.affine, kind or self.kind)


@dataclass(frozen=True, eq=False)
class LabelMap(VoxelGrid):
    """
    Integer label volume with ``num_classes`` classes, 0 being background.

    When ``num_classes`` is omitted it is inferred as ``max + 1`` (at least 2).
    """

    kind: str = "label"
    num_classes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", "label")
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise InvalidArgumentError(f"label data must be integer, got {data.dtype}")
        super().__post_init__()
        lo = int(self.data.min())
        hi = int(self.data.max())
        if lo < 0:
            raise InvalidArgumentError("label values must be non-negative")
        n = self.num_classes
        if n is None:
            n = max(hi + 1, 2)
        n = int(n)
        if n < 2:
            raise InvalidArgumentError("a label map needs at least 2 classes")
        if hi >= n:
            raise InvalidArgumentError(f"label {hi} out of range for {n} classes")
        object.__setattr__(self, "num_classes", n)

    def with_data(self, data: np.ndarray, kind: str | None = None):
        if kind not in (None, "label"):
            return VoxelGrid(data, self.spacing, self.affine, kind)
        return LabelMap(data, self.spacing, self.affine, num_classes=self.num_classes)


def label_dtype(num_classes: int) -> np.dtype:
    return np.dtype("uint8") if num_classes <= 256 else np.dtype("int32")


class ProbabilityMap:
    """
    Per-voxel class-probability vectors.

    Two storage modes exist. ``dense`` keeps one float plane per class in an
    array of shape ``(L, nx, ny, nz)``; ``onehot`` is backed by a
    :class:`LabelMap` and materialises planes only on request.
    """

    def __init__(self, planes=None, spacing=(1.0, 1.0, 1.0), affine=None,
                 labels: LabelMap | None = None, validate: bool = True):
        if (planes is None) == (labels is None):
            raise InvalidArgumentError("give exactly one of planes or labels")
        if labels is not None:
            self.mode = "onehot"
            self.labels = labels
            self._planes = None
            self._geom = labels
            return
        planes = np.asarray(planes)
        if planes.ndim != 4:
            raise InvalidArgumentError("dense planes must have shape (L, nx, ny, nz)")
        if planes.shape[0] < 2:
            raise InvalidArgumentError("a probability map needs at least 2 classes")
        if not np.issubdtype(planes.dtype, np.floating):
            planes = planes.astype(np.float32)
        if validate:
            check_probabilities(planes)
        view = planes.view()
        view.flags.writeable = False
        self.mode = "dense"
        self.labels = None
        self._planes = view
        # geometry carrier; the data plane itself is irrelevant
        self._geom = VoxelGrid(np.broadcast_to(np.float32(0), planes.shape[1:]),
                               spacing, affine, "probability")

    @classmethod
    def onehot(cls, labels: LabelMap) -> "ProbabilityMap":
        return cls(labels=labels)

    @property
    def num_classes(self) -> int:
        if self.mode == "onehot":
            return self.labels.num_classes
        return self._planes.shape[0]

    @property
    def dims(self) -> tuple:
        return self._geom.dims

    @property
    def spacing(self) -> tuple:
        return self._geom.spacing

    @property
    def affine(self) -> np.ndarray:
        return self._geom.affine

    @property
    def num_voxels(self) -> int:
        return self._geom.num_voxels

    def plane(self, label: int, zs: slice = slice(None)) -> np.ndarray:
        """Probability of ``label`` at every voxel (optionally a z-slab)."""
        if self.mode == "onehot":
            return (self.labels.data[:, :, zs] == label).astype(np.float32)
        return self._planes[label][:, :, zs]

    def planes(self, zs: slice = slice(None)) -> Iterator[np.ndarray]:
        for label in range(self.num_classes):
            yield self.plane(label, zs)

    def slab(self, zs: slice = slice(None)) -> np.ndarray:
        """All class planes over a z-range, shape ``(L, nx, ny, dz)``."""
        if self.mode == "dense":
            return self._planes[:, :, :, zs]
        return np.stack(list(self.planes(zs)))

    def to_dense(self) -> np.ndarray:
        return self.slab()

    def argmax(self) -> LabelMap:
        """Most probable class per voxel, ties going to the lowest index."""
        if self.mode == "onehot":
            return self.labels
        best = np.argmax(self._planes, axis=0).astype(label_dtype(self.num_classes))
        return LabelMap(best, self.spacing, self.affine, num_classes=self.num_classes)


def check_probabilities(planes: np.ndarray, tol: float = PROBABILITY_TOL) -> None:
    """Raise if any entry leaves [0, 1] or any voxel fails to sum to one."""
    lo, hi = float(planes.min()), float(planes.max())
    if lo < -tol or hi > 1 + tol:
        raise InvalidArgumentError(
            f"probabilities outside [0, 1] beyond tolerance: range [{lo}, {hi}]")
    total = planes.sum(axis=0, dtype=np.float64)
    worst = float(np.abs(total - 1.0).max())
    if worst > tol:
        raise InvalidArgumentError(f"probabilities do not sum to 1 (max deviation {worst:.3g})")


def onehot_view(labels: LabelMap) -> ProbabilityMap:
    return ProbabilityMap.onehot(labels)


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------


def _load_bytes(path) -> bytes:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise InputMissingError(f"no such file: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptInputError(f"{path}: bad gzip stream ({exc})") from exc
    return raw


def _parse_header(buf: bytes, path) -> dict:
    if len(buf) < _HEADER_SIZE:
        raise CorruptInputError(f"{path}: file shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack(endian + "i", buf[:4])[0] == _HEADER_SIZE:
            break
    else:
        raise UnsupportedFormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr)")
    if buf[344:347] != b"n+1":
        raise UnsupportedFormatError(f"{path}: only single-file NIfTI-1 ('n+1') is supported")

    def unpack(fmt, offset):
        return struct.unpack_from(endian + fmt, buf, offset)

    hdr = {
        "endian": endian,
        "dim": unpack("8h", 40),
        "intent_p1": unpack("f", 56)[0],
        "datatype": unpack("h", 70)[0],
        "pixdim": unpack("8f", 76),
        "vox_offset": unpack("f", 108)[0],
        "scl_slope": unpack("f", 112)[0],
        "scl_inter": unpack("f", 116)[0],
        "qform_code": unpack("h", 252)[0],
        "sform_code": unpack("h", 254)[0],
        "quatern": unpack("6f", 256),
        "srow": unpack("12f", 280),
        "intent_name": buf[328:344].split(b"\0")[0].decode("ascii", "replace"),
    }
    if hdr["datatype"] not in _DTYPE_CODES:
        raise UnsupportedFormatError(f"{path}: unsupported datatype code {hdr['datatype']}")
    return hdr


def read_header(path) -> dict:
    """Parse only the header; gzip files are decompressed just far enough."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise InputMissingError(f"no such file: {path}")
    with open(path, "rb") as f:
        gz = f.read(2) == b"\x1f\x8b"
    opener = gzip.open if gz else open
    try:
        with opener(path, "rb") as f:
            head = f.read(_HEADER_SIZE)
    except (OSError, EOFError) as exc:
        raise CorruptInputError(f"{path}: unreadable ({exc})") from exc
    return _parse_header(head, path)


def is_probability_volume(path) -> bool:
    """True for 4D files holding more than one class plane."""
    dim = read_header(path)["dim"]
    return dim[0] >= 4 and dim[4] > 1


def _quaternion_affine(hdr: dict) -> np.ndarray:
    b, c, d, qx, qy, qz = hdr["quatern"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    scale = np.array([abs(p) for p in hdr["pixdim"][1:4]])
    scale[2] *= qfac
    out = np.eye(4)
    out[:3, :3] = rot * scale
    out[:3, 3] = (qx, qy, qz)
    return out


def _header_affine(hdr: dict) -> np.ndarray:
    if hdr["sform_code"] > 0:
        out = np.eye(4)
        out[:3, :] = np.reshape(hdr["srow"], (3, 4))
        return out
    if hdr["qform_code"] > 0:
        return _quaternion_affine(hdr)
    return np.diag([abs(p) for p in hdr["pixdim"][1:4]] + [1.0])


def _decode(path, mmap: bool = False):
    """Read header and raw voxel array (with dims beyond the 4th dropped)."""
    path = os.fspath(path)
    gz = False
    if mmap:
        if not os.path.exists(path):
            raise InputMissingError(f"no such file: {path}")
        with open(path, "rb") as f:
            head = f.read(_DATA_OFFSET)
        gz = head[:2] == b"\x1f\x8b"
        buf = head
    if not mmap or gz:
        buf = _load_bytes(path)
    hdr = _parse_header(buf, path)
    ndim = hdr["dim"][0]
    if not 3 <= ndim <= 7:
        raise UnsupportedFormatError(f"{path}: unsupported dimension count {ndim}")
    shape = [int(n) for n in hdr["dim"][1:ndim + 1]]
    if min(shape) < 1:
        raise CorruptInputError(f"{path}: non-positive dimension in {shape}")
    if any(n != 1 for n in shape[4:]):
        raise UnsupportedFormatError(f"{path}: dimensions beyond the 4th are not supported")
    shape = shape[:4]
    dtype = _DTYPE_CODES[hdr["datatype"]].newbyteorder(hdr["endian"])
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    if mmap and not gz:
        size = os.path.getsize(path)
        if size < offset + count * dtype.itemsize:
            raise CorruptInputError(f"{path}: truncated voxel data")
        arr = np.memmap(path, dtype=dtype, mode="r", offset=offset,
                        shape=tuple(shape), order="F")
    else:
        if len(buf) < offset + count * dtype.itemsize:
            raise CorruptInputError(f"{path}: truncated voxel data")
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
        arr = arr.reshape(shape, order="F")
    if dtype.byteorder == ">":
        arr = arr.astype(dtype.newbyteorder("="))
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        arr = arr.astype(np.float64) * slope + inter
    return hdr, arr


def _spacing(hdr: dict, path) -> tuple:
    spacing = tuple(abs(float(p)) for p in hdr["pixdim"][1:4])
    if min(spacing) <= 0:
        raise CorruptInputError(f"{path}: non-positive voxel spacing {spacing}")
    return spacing


def read_volume(path, mmap: bool = False) -> VoxelGrid:
    """
    Read a single-file NIfTI-1 volume (``.nii`` or ``.nii.gz``).

    The affine comes from the sform when ``sform_code > 0``, else from the
    qform, else from the voxel spacing. Label maps written by this module
    come back as :class:`LabelMap` with their class count.

    With ``mmap=True`` uncompressed, unscaled files are memory-mapped
    instead of read into memory.
    """
    hdr, arr = _decode(path, mmap)
    if arr.ndim == 4:
        if arr.shape[3] != 1:
            raise UnsupportedFormatError(
                f"{path}: 4D volume; use read_probability_map for class planes")
        arr = arr[..., 0]
    spacing = _spacing(hdr, path)
    affine = _header_affine(hdr)
    if abs(np.linalg.det(affine[:3, :3])) <= 1e-12:
        raise CorruptInputError(f"{path}: singular voxel-to-world matrix")
    kind = hdr["intent_name"]
    if kind not in ELEMENT_KINDS:
        kind = "label" if arr.dtype == np.uint8 else "intensity"
    if kind == "label" and np.issubdtype(arr.dtype, np.integer):
        n = int(round(hdr["intent_p1"])) or None
        return LabelMap(arr, spacing, affine, num_classes=n)
    return VoxelGrid(arr, spacing, affine, kind if kind != "label" else "intensity")


def read_label_map(path, num_classes: int | None = None, mmap: bool = False) -> LabelMap:
    grid = read_volume(path, mmap=mmap)
    data = grid.data
    if not np.issubdtype(data.dtype, np.integer):
        if not np.array_equal(data, np.round(data)):
            raise CorruptInputError(f"{path}: label map holds non-integer values")
        data = data.astype(np.int32)
    n = num_classes or getattr(grid, "num_classes", None)
    return LabelMap(data, grid.spacing, grid.affine, num_classes=n)


def read_probability_map(path) -> ProbabilityMap:
    """Read class planes stored as a 4D float volume, classes along dim 4."""
    hdr, arr = _decode(path)
    if arr.ndim != 4 or arr.shape[3] < 2:
        raise UnsupportedFormatError(f"{path}: expected a 4D volume with >= 2 class planes")
    planes = np.moveaxis(arr, 3, 0).astype(np.float32, copy=False)
    return ProbabilityMap(planes, _spacing(hdr, path), _header_affine(hdr))


def _rotation_quaternion(affine: np.ndarray):
    """Quaternion (b, c, d) and qfac for the qform, or None for sheared affines."""
    mat = affine[:3, :3]
    norms = np.linalg.norm(mat, axis=0)
    rot = mat / norms
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot[:, 2] *= -1
    if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
        return None
    a = 1.0 + rot[0, 0] + rot[1, 1] + rot[2, 2]
    if a > 0.5:
        a = 0.5 * np.sqrt(a)
        b = 0.25 * (rot[2, 1] - rot[1, 2]) / a
        c = 0.25 * (rot[0, 2] - rot[2, 0]) / a
        d = 0.25 * (rot[1, 0] - rot[0, 1]) / a
    else:
        xd = 1.0 + rot[0, 0] - (rot[1, 1] + rot[2, 2])
        yd = 1.0 + rot[1, 1] - (rot[0, 0] + rot[2, 2])
        zd = 1.0 + rot[2, 2] - (rot[0, 0] + rot[1, 1])
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (rot[0, 1] + rot[1, 0]) / b
            d = 0.25 * (rot[0, 2] + rot[2, 0]) / b
            a = 0.25 * (rot[2, 1] - rot[1, 2]) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (rot[0, 1] + rot[1, 0]) / c
            d = 0.25 * (rot[1, 2] + rot[2, 1]) / c
            a = 0.25 * (rot[0, 2] - rot[2, 0]) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (rot[0, 2] + rot[2, 0]) / d
            c = 0.25 * (rot[1, 2] + rot[2, 1]) / d
            a = 0.25 * (rot[1, 0] - rot[0, 1]) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return (b, c, d), qfac


def _build_header(shape: Sequence[int], dtype: np.dtype, spacing, affine,
                  kind: str, num_classes: int = 0) -> bytes:
    hdr = bytearray(_DATA_OFFSET)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<f", hdr, 56, float(num_classes))
    struct.pack_into("<h", hdr, 70, _CODE_FOR_DTYPE[dtype])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    quat = _rotation_quaternion(affine)
    qfac = quat[1] if quat else 1.0
    pixdim = [qfac, *spacing] + [1.0] * 4
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(_DATA_OFFSET))
    # scl_slope = 0 means "no scaling"
    struct.pack_into("<2f", hdr, 112, 0.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    hdr[148:148 + 27] = b"affine=sform;qform=mirror\0\0"[:27]
    struct.pack_into("<h", hdr, 254, 1)
    if quat:
        struct.pack_into("<h", hdr, 252, 1)
        struct.pack_into("<6f", hdr, 256, *quat[0], *affine[:3, 3])
    struct.pack_into("<12f", hdr, 280, *np.asarray(affine[:3, :], dtype=np.float64).ravel())
    name = kind.encode("ascii")[:16]
    hdr[328:328 + len(name)] = name
    hdr[344:348] = b"n+1\0"
    return bytes(hdr)


def _disk_dtype(grid: VoxelGrid) -> np.dtype:
    if grid.kind == "label":
        return label_dtype(grid.num_classes)
    if grid.kind in ("probability", "uncertainty"):
        return np.dtype("float32")
    data = grid.data
    if data.dtype in (np.uint8, np.int16, np.int32):
        return data.dtype
    if np.issubdtype(data.dtype, np.integer):
        if data.size == 0 or (data.min() >= -32768 and data.max() <= 32767):
            return np.dtype("int16")
        return np.dtype("int32")
    return np.dtype("float32")


def _write_bytes(header: bytes, arr: np.ndarray, path) -> None:
    path = os.fspath(path)
    payload = header + np.asarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False) \
        .tobytes(order="F")
    try:
        if path.endswith(".gz"):
            # mtime=0 keeps output bytes reproducible
            with open(path, "wb") as raw, gzip.GzipFile(
                    filename="", fileobj=raw, mode="wb", compresslevel=4, mtime=0) as f:
                f.write(payload)
        else:
            with open(path, "wb") as f:
                f.write(payload)
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


def write_volume(grid: VoxelGrid, path) -> None:
    """
    Write ``grid`` as single-file NIfTI-1; gzip is used for ``.gz`` paths.

    Label maps are stored as uint8 (``L <= 256``) or int32, probabilities and
    uncertainties as float32, intensities as int16 when integral, else float32.
    """
    dtype = _disk_dtype(grid)
    n = getattr(grid, "num_classes", 0) or 0
    header = _build_header(grid.dims, dtype, grid.spacing, grid.affine, grid.kind, n)
    _write_bytes(header, grid.data.astype(dtype, copy=False), path)


def write_probability_map(pmap: ProbabilityMap, path) -> None:
    planes = np.moveaxis(pmap.to_dense().astype(np.float32, copy=False), 0, 3)
    header = _build_header(planes.shape, np.dtype("float32"), pmap.spacing, pmap.affine,
                           "probability", pmap.num_classes)
    _write_bytes(header, planes, path)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _linear_axis(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n = arr.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    shape = [1] * arr.ndim
    shape[axis] = -1
    w = (coords - lo).reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    # a + w*(b - a) keeps constant fields exact
    return a + w * (b - a)


def resample(grid: VoxelGrid, target_spacing, interp: str = "trilinear") -> VoxelGrid:
    """
    Resample ``grid`` onto an axis-aligned grid with ``target_spacing``.

    Voxel centres sit at integer indices and the corner of the field of view
    stays fixed in world space, so new voxel ``i`` samples old coordinate
    ``(i + 0.5) * target / old - 0.5``. New dims are
    ``round(old_dims * old_spacing / target_spacing)``.

    Both interpolators are separable, so memory stays at a few copies of the
    output volume.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise InvalidArgumentError(f"target spacing must be 3 positive values, got {target}")
    if interp not in ("nearest", "trilinear"):
        raise InvalidArgumentError(f"unknown interpolation {interp!r}")
    if grid.kind == "label" and interp != "nearest":
        raise InvalidArgumentError("label maps can only be resampled with nearest neighbour")

    old = np.asarray(grid.spacing)
    scale = np.asarray(target) / old
    dims = [max(1, int(round(n * s / t))) for n, s, t in zip(grid.dims, old, target)]
    if tuple(dims) == grid.dims and np.allclose(scale, 1.0, rtol=0, atol=1e-12):
        return grid.with_data(np.array(grid.data))

    data = grid.data
    if interp == "nearest":
        idx = []
        for n_old, n_new, s in zip(grid.dims, dims, scale):
            c = (np.arange(n_new) + 0.5) * s - 0.5
            idx.append(np.clip(np.floor(c + 0.5).astype(np.intp), 0, n_old - 1))
        out = data[np.ix_(*idx)]
    else:
        out = np.asarray(data, dtype=np.float64)
        for axis, (n_new, s) in enumerate(zip(dims, scale)):
            out = _linear_axis(out, axis, (np.arange(n_new) + 0.5) * s - 0.5)
        if data.dtype == np.float32:
            out = out.astype(np.float32)

    step = np.eye(4)
    step[:3, :3] = np.diag(scale)
    step[:3, 3] = 0.5 * scale - 0.5
    affine = grid.affine @ step
    if isinstance(grid, LabelMap):
        return LabelMap(out, target, affine, num_classes=grid.num_classes)
    return VoxelGrid(out, target, affine, grid.kind)
