import gzip
import struct

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segensemble.errors import (
    CorruptInputError,
    InputMissingError,
    InvalidArgumentError,
    UnsupportedFormatError,
    VolumeIOError,
)
from segensemble.volume_io import (
    LabelMap,
    ProbabilityMap,
    VoxelGrid,
    onehot_view,
    read_label_map,
    read_probability_map,
    read_volume,
    resample,
    write_probability_map,
    write_volume,
)


def _random_grid(rng, kind, shape=(64, 64, 64)):
    if kind == "label":
        return LabelMap(rng.integers(0, 126, shape).astype(np.uint8),
                        (2.0, 2.0, 2.0), num_classes=126)
    if kind == "intensity":
        return VoxelGrid(rng.integers(-1024, 3000, shape).astype(np.int16), (0.5, 0.75, 1.25))
    return VoxelGrid(rng.random(shape, dtype=np.float32), (2.0, 2.0, 2.0), kind=kind)


class TestGridTypes:
    def test_invariants_rejected(self):
        with pytest.raises(InvalidArgumentError):
            VoxelGrid(np.zeros((2, 2)))
        with pytest.raises(InvalidArgumentError):
            VoxelGrid(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
        with pytest.raises(InvalidArgumentError):
            VoxelGrid(np.zeros((2, 2, 2)), affine=np.diag([1.0, 1.0, 0.0, 1.0]))
        with pytest.raises(InvalidArgumentError):
            LabelMap(np.full((2, 2, 2), 5, np.uint8), num_classes=5)
        with pytest.raises(InvalidArgumentError):
            LabelMap(np.zeros((2, 2, 2), np.uint8), num_classes=1)

    def test_grid_is_immutable(self):
        grid = VoxelGrid(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            grid.data[0, 0, 0] = 1

    def test_label_count_inferred(self):
        assert LabelMap(np.zeros((2, 2, 2), np.uint8)).num_classes == 2
        assert LabelMap(np.array([[[0, 4]]], np.uint8)).num_classes == 5

    def test_probability_map_rejects_bad_values(self):
        bad = np.full((2, 3, 3, 3), 0.5, np.float32)
        bad[0, 0, 0, 0] = 1.2
        with pytest.raises(InvalidArgumentError):
            ProbabilityMap(bad)
        unnormalised = np.full((2, 3, 3, 3), 0.4, np.float32)
        with pytest.raises(InvalidArgumentError):
            ProbabilityMap(unnormalised)
        ProbabilityMap(np.full((2, 3, 3, 3), 0.5, np.float32))


class TestOnehotView:
    def test_single_voxel(self):
        labels = LabelMap(np.array([[[3]]], np.uint8), num_classes=5)
        vec = onehot_view(labels).slab()[:, 0, 0, 0]
        assert vec.tolist() == [0, 0, 0, 1, 0]

    def test_background(self):
        pm = onehot_view(LabelMap(np.zeros((4, 4, 4), np.uint8), num_classes=3))
        assert pm.mode == "onehot"
        assert np.all(pm.plane(0) == 1)
        assert np.all(pm.plane(1) == 0) and np.all(pm.plane(2) == 0)

    def test_sums_to_one_exhaustive(self):
        rng = np.random.default_rng(0)
        labels = LabelMap(rng.integers(0, 7, (16, 16, 16)).astype(np.uint8), num_classes=7)
        dense = onehot_view(labels).to_dense()
        assert np.all(dense.sum(axis=0) == 1)
        assert set(np.unique(dense)) == {0.0, 1.0}


class TestNifti:
    def test_zero_volume(self, tmp_path):
        path = tmp_path / "z.nii"
        write_volume(LabelMap(np.zeros((64, 64, 64), np.uint8)), path)
        raw = path.read_bytes()
        assert len(raw) == 352 + 64 ** 3
        assert raw[352:] == bytes(64 ** 3)
        grid = read_volume(path)
        assert grid.dims == (64, 64, 64)
        assert not grid.data.any()

    @pytest.mark.parametrize("kind", ["label", "intensity", "probability", "uncertainty"])
    @pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
    def test_round_trip_bit_exact(self, tmp_path, kind, suffix):
        rng = np.random.default_rng(1)
        grid = _random_grid(rng, kind)
        path = tmp_path / ("v" + suffix)
        write_volume(grid, path)
        back = read_volume(path)
        assert back.kind == kind
        assert back.dims == grid.dims
        assert back.spacing == grid.spacing
        assert back.data.dtype == grid.data.dtype
        assert back.data.tobytes() == grid.data.tobytes()
        np.testing.assert_allclose(back.affine, grid.affine, atol=1e-6)
        if kind == "label":
            assert back.num_classes == 126

    def test_large_label_count_uses_int32(self, tmp_path):
        data = np.arange(27, dtype=np.int32).reshape(3, 3, 3) * 11
        grid = LabelMap(data, num_classes=300)
        write_volume(grid, tmp_path / "l.nii")
        back = read_volume(tmp_path / "l.nii")
        assert back.data.dtype == np.int32 and back.num_classes == 300
        assert np.array_equal(back.data, data)

    def test_pixdim_two_mm(self, tmp_path):
        write_volume(LabelMap(np.zeros((4, 4, 4), np.uint8), (2, 2, 2)), tmp_path / "a.nii")
        raw = (tmp_path / "a.nii").read_bytes()
        assert struct.unpack_from("<3f", raw, 80) == (2.0, 2.0, 2.0)
        assert nib.load(str(tmp_path / "a.nii")).header.get_zooms() == (2.0, 2.0, 2.0)

    def test_scl_slope_intercept(self, tmp_path):
        path = tmp_path / "s.nii"
        write_volume(VoxelGrid(np.full((2, 2, 2), 5, np.int16)), path)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<2f", raw, 112, 2.0, 1.0)
        path.write_bytes(bytes(raw))
        assert np.all(read_volume(path).data == 11)

    def test_nibabel_reads_our_files(self, tmp_path):
        rot = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
        affine = np.eye(4)
        affine[:3, :3] = rot * [2.0, 2.0, 3.0]
        affine[:3, 3] = [-10, 5, 7.5]
        data = np.random.default_rng(2).integers(0, 9, (5, 6, 7)).astype(np.uint8)
        write_volume(LabelMap(data, (2, 2, 3), affine), tmp_path / "r.nii.gz")
        img = nib.load(str(tmp_path / "r.nii.gz"))
        assert np.array_equal(np.asarray(img.dataobj), data)
        np.testing.assert_allclose(img.affine, affine, atol=1e-6)
        # qform mirrors the sform for rigid affines
        np.testing.assert_allclose(img.get_qform(), affine, atol=1e-5)

    def test_we_read_nibabel_files(self, tmp_path):
        data = np.random.default_rng(3).random((4, 5, 6)).astype(np.float32)
        affine = np.diag([1.5, 1.5, 2.0, 1.0])
        affine[:3, 3] = [1, 2, 3]
        nib.save(nib.Nifti1Image(data, affine), str(tmp_path / "n.nii"))
        grid = read_volume(tmp_path / "n.nii")
        assert np.array_equal(grid.data, data)
        np.testing.assert_allclose(grid.affine, affine)

    def test_qform_fallback(self, tmp_path):
        affine = np.array([[0.0, 0, 2, 4], [-2, 0, 0, 5], [0, -2, 0, 6], [0, 0, 0, 1]])
        img = nib.Nifti1Image(np.zeros((3, 3, 3), np.int16), None)
        img.set_qform(affine, code=1)
        img.set_sform(None, code=0)
        nib.save(img, str(tmp_path / "q.nii"))
        np.testing.assert_allclose(read_volume(tmp_path / "q.nii").affine, affine, atol=1e-6)

    def test_mmap_matches_full_read(self, tmp_path):
        grid = _random_grid(np.random.default_rng(4), "label", (10, 11, 12))
        write_volume(grid, tmp_path / "m.nii")
        mapped = read_volume(tmp_path / "m.nii", mmap=True)
        base = mapped.data
        while base.base is not None and not isinstance(base, np.memmap):
            base = base.base
        assert isinstance(base, np.memmap)
        assert np.array_equal(mapped.data, grid.data)

    def test_probability_planes_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        raw = rng.random((4, 6, 6, 6))
        planes = (raw / raw.sum(axis=0)).astype(np.float32)
        write_probability_map(ProbabilityMap(planes, (2, 2, 2)), tmp_path / "p.nii.gz")
        back = read_probability_map(tmp_path / "p.nii.gz")
        assert back.num_classes == 4
        assert back.to_dense().tobytes() == planes.tobytes()

    def test_read_label_map_from_float(self, tmp_path):
        write_volume(VoxelGrid(np.full((2, 2, 2), 3.0, np.float32)), tmp_path / "f.nii")
        labels = read_label_map(tmp_path / "f.nii", num_classes=4)
        assert labels.num_classes == 4 and np.all(labels.data == 3)

    def test_errors(self, tmp_path):
        with pytest.raises(InputMissingError):
            read_volume(tmp_path / "missing.nii")
        path = tmp_path / "t.nii"
        write_volume(LabelMap(np.zeros((8, 8, 8), np.uint8)), path)
        path.write_bytes(path.read_bytes()[:400])
        with pytest.raises(CorruptInputError):
            read_volume(path)
        path.write_bytes(b"\0" * 100)
        with pytest.raises(CorruptInputError):
            read_volume(path)
        raw = bytearray(352 + 8)
        struct.pack_into("<i", raw, 0, 348)
        struct.pack_into("<8h", raw, 40, 3, 2, 2, 2, 1, 1, 1, 1)
        struct.pack_into("<h", raw, 70, 64)  # float64: unsupported
        raw[344:348] = b"n+1\0"
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedFormatError):
            read_volume(path)
        struct.pack_into("<8h", raw, 40, 2, 2, 2, 1, 1, 1, 1, 1)
        struct.pack_into("<h", raw, 70, 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedFormatError):
            read_volume(path)
        raw[344:348] = b"ni1\0"
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedFormatError):
            read_volume(path)
        with pytest.raises(VolumeIOError):
            write_volume(LabelMap(np.zeros((2, 2, 2), np.uint8)), tmp_path / "no" / "x.nii")

    def test_gzip_output_is_reproducible(self, tmp_path):
        grid = _random_grid(np.random.default_rng(6), "label", (8, 8, 8))
        write_volume(grid, tmp_path / "a.nii.gz")
        write_volume(grid, tmp_path / "b.nii.gz")
        assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
        assert gzip.decompress((tmp_path / "a.nii.gz").read_bytes())[344:347] == b"n+1"

    @settings(max_examples=25, deadline=None)
    @given(shape=st.tuples(*[st.integers(1, 9)] * 3), seed=st.integers(0, 2 ** 32 - 1),
           kind=st.sampled_from(["label", "intensity", "probability", "uncertainty"]))
    def test_round_trip_property(self, tmp_path_factory, shape, seed, kind):
        grid = _random_grid(np.random.default_rng(seed), kind, shape)
        path = tmp_path_factory.mktemp("rt") / "g.nii"
        write_volume(grid, path)
        assert read_volume(path).data.tobytes() == grid.data.tobytes()


class TestResample:
    def test_identity(self):
        grid = VoxelGrid(np.random.default_rng(0).random((7, 8, 9)), (1.0, 2.0, 3.0))
        out = resample(grid, (1.0, 2.0, 3.0))
        assert np.array_equal(out.data, grid.data)
        np.testing.assert_array_equal(out.affine, grid.affine)

    @pytest.mark.parametrize("interp", ["nearest", "trilinear"])
    def test_constant_halves_dims(self, interp):
        grid = VoxelGrid(np.full((64, 64, 64), 37.25, np.float32), (1, 1, 1))
        out = resample(grid, (2, 2, 2), interp)
        assert out.dims == (32, 32, 32)
        assert np.all(out.data == 37.25)
        assert out.spacing == (2.0, 2.0, 2.0)

    def test_linear_ramp_preserved(self):
        x = np.arange(64, dtype=np.float64)
        grid = VoxelGrid(np.broadcast_to(x[:, None, None], (64, 8, 8)).copy(), (1, 1, 1))
        out = resample(grid, (2, 1, 1), "trilinear")
        # world x of each new voxel centre from the new affine
        centres = out.affine @ np.stack([np.arange(32), np.zeros(32), np.zeros(32), np.ones(32)])
        interior = slice(1, 31)
        np.testing.assert_allclose(out.data[interior, 4, 4], centres[0, interior], atol=1e-5)

    def test_world_anchoring(self):
        grid = VoxelGrid(np.zeros((10, 10, 10)), (1, 1, 1))
        out = resample(grid, (2, 2, 2))
        # the corner of the field of view stays put
        corner_old = grid.affine @ [-0.5, -0.5, -0.5, 1]
        corner_new = out.affine @ [-0.5, -0.5, -0.5, 1]
        np.testing.assert_allclose(corner_old, corner_new)

    def test_labels_nearest_only(self):
        rng = np.random.default_rng(1)
        labels = LabelMap(rng.choice([0, 3, 7], (20, 20, 20)).astype(np.uint8), num_classes=9)
        with pytest.raises(InvalidArgumentError):
            resample(labels, (2, 2, 2), "trilinear")
        out = resample(labels, (1.7, 2.3, 0.6), "nearest")
        assert isinstance(out, LabelMap) and out.num_classes == 9
        assert set(np.unique(out.data)) <= {0, 3, 7}

    def test_invalid_spacing(self):
        with pytest.raises(InvalidArgumentError):
            resample(VoxelGrid(np.zeros((2, 2, 2))), (1, 0, 1))
