import json
import subprocess
import sys

import numpy as np
import pytest

from segensemble.cli import build_parser, main
from segensemble.tta import TransformSpec, apply, valid_mask
from segensemble.volume_io import LabelMap, VoxelGrid, read_label_map, read_volume, write_volume


def _labels(seed, dims=(12, 10, 8), L=4):
    return LabelMap(np.random.default_rng(seed).integers(0, L, dims).astype(np.uint8),
                    num_classes=L)


def _manifest(tmp_path, maps, transforms=None, name="scan01.json"):
    entries = []
    for i, m in enumerate(maps):
        spec = transforms[i] if transforms else TransformSpec()
        write_volume(apply(spec, m), tmp_path / f"m{i}.nii.gz")
        entries.append({"member_id": f"m{i}", "path": f"m{i}.nii.gz",
                        "transform": spec.to_dict()})
    path = tmp_path / name
    path.write_text(json.dumps(entries))
    return path


def _visible(directory):
    return sorted(p.name for p in directory.iterdir() if not p.name.startswith("."))


class TestParser:
    def test_help_documents_every_flag(self):
        parser = build_parser()
        for sub in parser._subparsers._group_actions[0].choices.values():
            for action in sub._actions:
                assert action.help, action.option_strings

    def test_unknown_flag_is_an_error(self, tmp_path):
        assert main(["rank", "--reports", str(tmp_path), "--budget", "1", "--bogus"]) == 1

    def test_help_exits_zero(self, capsys):
        assert main(["fuse", "--help"]) == 0
        assert "--exclude-background" in capsys.readouterr().out

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "segensemble", "--help"],
                             capture_output=True, text=True)
        assert res.returncode == 0 and "exit codes" in res.stdout

    def test_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SEGENS_THREADS", "3")
        args = build_parser().parse_args(["synth"])
        assert args.threads == 3
        assert build_parser().parse_args(["synth", "--threads", "2"]).threads == 2


class TestFuse:
    def test_single_identity_member(self, tmp_path):
        out = tmp_path / "out"
        assert main(["fuse", "--manifest", str(_manifest(tmp_path, [_labels(0)])),
                     "--output-dir", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["mean_uncertainty"] == 0.0 and report["ensemble_size"] == 1
        assert report["scan_id"] == "scan01"
        assert np.array_equal(read_label_map(out / "fused.nii.gz").data, _labels(0).data)
        assert _visible(out) == ["fused.nii.gz", "report.json", "uncertainty.nii.gz"]

    def test_six_members_with_shifts_and_figure(self, tmp_path):
        maps = [_labels(i) for i in range(6)]
        shifts = [TransformSpec.shift((i % 3 - 1, 0, i % 2)) for i in range(6)]
        out = tmp_path / "out"
        assert main(["fuse", "--inputs", str(_manifest(tmp_path, maps, shifts)),
                     "--output-dir", str(out), "--figures", "--threads", "2"]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["ensemble_size"] == 6
        assert 0 < report["mean_uncertainty"] <= 0.25
        assert (out / "slices.png").stat().st_size > 0
        umap = read_volume(out / "uncertainty.nii.gz")
        assert umap.kind == "uncertainty"
        assert np.mean(umap.data) == pytest.approx(report["mean_uncertainty"], abs=1e-6)

    def test_missing_member_leaves_no_outputs(self, tmp_path, capsys):
        manifest = _manifest(tmp_path, [_labels(0), _labels(1)])
        (tmp_path / "m1.nii.gz").unlink()
        out = tmp_path / "out"
        assert main(["fuse", "--manifest", str(manifest), "--output-dir", str(out)]) == 2
        assert list(out.iterdir()) == []
        assert "m1" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path):
        assert main(["fuse", "--manifest", str(tmp_path / "nope.json"),
                     "--output-dir", str(tmp_path)]) == 2

    def test_member_geometry_mismatch(self, tmp_path):
        manifest = _manifest(tmp_path, [_labels(0), _labels(1, dims=(8, 8, 8))])
        assert main(["fuse", "--manifest", str(manifest), "--output-dir",
                     str(tmp_path / "o")]) == 3

    def test_thread_count_does_not_change_outputs(self, tmp_path):
        manifest = _manifest(tmp_path, [_labels(i, (20, 18, 16)) for i in range(5)])
        for t in ("1", "8"):
            assert main(["fuse", "--manifest", str(manifest), "--output-dir",
                         str(tmp_path / t), "--threads", t]) == 0
        assert (tmp_path / "1" / "report.json").read_bytes() == \
            (tmp_path / "8" / "report.json").read_bytes()
        assert (tmp_path / "1" / "fused.nii.gz").read_bytes() == \
            (tmp_path / "8" / "fused.nii.gz").read_bytes()


class TestMetrics:
    def _pair(self, tmp_path, pred, gt):
        write_volume(pred, tmp_path / "pred.nii.gz")
        write_volume(gt, tmp_path / "gt.nii.gz")
        return ["metrics", "--pred", str(tmp_path / "pred.nii.gz"),
                "--gt", str(tmp_path / "gt.nii.gz"), "--output-dir", str(tmp_path / "out")]

    def test_identical(self, tmp_path):
        m = _labels(3)
        groups = tmp_path / "groups.json"
        groups.write_text(json.dumps({"odd": [1, 3], "even": [2]}))
        assert main(self._pair(tmp_path, m, m) + ["--groups", str(groups), "--csv",
                                                  "--figures"]) == 0
        doc = json.loads((tmp_path / "out" / "metrics.json").read_text())
        for g in doc["groups"].values():
            assert g["median"] == 1.0 and g["detection_ratio"] == 1.0
        assert doc["correction"]["differing_voxels"] == 0
        assert set(doc["groups"]) == {"odd", "even", "all"}
        assert (tmp_path / "out" / "metrics.csv").read_text().startswith("scan_id,label")
        assert (tmp_path / "out" / "groups.png").exists()

    def test_hand_computed_fixture(self, tmp_path):
        # class 1: |P|=4 |G|=3 overlap 2 -> 4/7; class 2: |P|=2 |G|=3 overlap 2 -> 4/5
        gt = np.zeros((8, 8, 8), np.uint8)
        pred = np.zeros((8, 8, 8), np.uint8)
        gt[0, 0, :3] = 1
        pred[0, 0, 1:5] = 1
        gt[1, 1, :3] = 2
        pred[1, 1, :2] = 2
        assert main(self._pair(tmp_path, LabelMap(pred, num_classes=3),
                               LabelMap(gt, num_classes=3))) == 0
        doc = json.loads((tmp_path / "out" / "metrics.json").read_text())
        dsc = {c["label"]: c["dsc"] for c in doc["classes"]}
        assert dsc == {1: 4 / 7, 2: 4 / 5}
        corr = doc["correction"]
        # differing voxels: x=0 row z=0,3,4 and x=1 row z=2
        assert corr["differing_voxels"] == 4
        assert corr["percentage"] == pytest.approx(100 * 4 / 512)

    def test_geometry_mismatch(self, tmp_path):
        assert main(self._pair(tmp_path, _labels(0), _labels(0, dims=(8, 8, 8)))) == 3
        assert not (tmp_path / "out" / "metrics.json").exists()

    def test_gt_foreground_denominator(self, tmp_path):
        m = _labels(1)
        args = self._pair(tmp_path, m, _labels(2)) + ["--denominator", "gt-foreground"]
        assert main(args) == 0
        corr = json.loads((tmp_path / "out" / "metrics.json").read_text())["correction"]
        assert corr["denominator_kind"] == "gt-foreground"
        assert corr["differing_voxels"] <= corr["denominator"]


class TestRank:
    def _reports(self, tmp_path, scores):
        d = tmp_path / "reports"
        d.mkdir()
        for sid, uc in scores.items():
            (d / f"{sid}.json").write_text(json.dumps({
                "scan_id": sid, "ensemble_size": 6, "mean_uncertainty": uc,
                "num_voxels": 100, "num_classes": 3, "correction_percentage": 40 * uc}))
        return d

    def test_one_report(self, tmp_path):
        d = self._reports(tmp_path, {"a": 0.01})
        assert main(["rank", "--reports", str(d), "--budget", "1", "--output-dir",
                     str(tmp_path)]) == 0
        scans = json.loads((tmp_path / "ranking.json").read_text())["scans"]
        assert scans == [{"scan_id": "a", "mean_uncertainty": 0.01, "rank": 1, "selected": True}]

    @pytest.mark.parametrize("mode", ["lowest", "highest"])
    def test_modes(self, tmp_path, mode):
        scores = {"a": 0.03, "b": 0.01, "c": 0.02}
        d = self._reports(tmp_path, scores)
        assert main(["rank", "--reports", str(d), "--budget", "2", "--mode", mode,
                     "--output-dir", str(tmp_path), "--csv", "--figures",
                     "--correlation"]) == 0
        scans = json.loads((tmp_path / "ranking.json").read_text())["scans"]
        oracle = sorted(scores, key=scores.get, reverse=(mode == "highest"))
        assert [s["scan_id"] for s in scans] == oracle
        assert [s["scan_id"] for s in scans if s["selected"]] == oracle[:2]
        corr = json.loads((tmp_path / "correlation.json").read_text())
        assert corr["spearman"] == 1.0
        assert (tmp_path / "ranking.png").exists() and (tmp_path / "ranking.csv").exists()

    def test_needs_budget(self, tmp_path):
        d = self._reports(tmp_path, {"a": 0.01})
        assert main(["rank", "--reports", str(d), "--output-dir", str(tmp_path)]) == 4

    def test_missing_reports(self, tmp_path):
        assert main(["rank", "--reports", str(tmp_path / "none"), "--budget", "1",
                     "--output-dir", str(tmp_path)]) == 2


class TestSynth:
    ARGS = ["synth", "--num-scans", "10", "--dims", "16", "--num-classes", "4",
            "--members", "4", "--seed", "7"]

    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(self.ARGS + ["--output-dir", str(tmp_path / name)]) == 0
        a = (tmp_path / "a" / "experiment.json").read_bytes()
        assert a == (tmp_path / "b" / "experiment.json").read_bytes()
        doc = json.loads(a)
        assert "spearman" in doc["summary"]
        assert (tmp_path / "a" / "experiment.csv").exists()

    def test_zero_noise_grid(self, tmp_path):
        args = self.ARGS + ["--eps-min", "0", "--eps-max", "0", "--beta", "0",
                            "--output-dir", str(tmp_path), "--figures"]
        assert main(args) == 0
        doc = json.loads((tmp_path / "experiment.json").read_text())
        assert doc["summary"]["undefined_correlation"] is True
        assert (tmp_path / "effort.png").exists()

    def test_noise_grid_file(self, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps([{"global_flip_prob": 0.02}, {"global_flip_prob": 0.2}]))
        assert main(self.ARGS + ["--noise-grid", str(grid), "--output-dir",
                                 str(tmp_path / "o")]) == 0

    @pytest.mark.parametrize("extra", [["--num-scans", "3"], ["--eps-min", "0.5"],
                                       ["--dims", "4"], ["--beta", "2"]])
    def test_invalid_spec(self, tmp_path, extra):
        assert main(self.ARGS + extra + ["--output-dir", str(tmp_path)]) == 4
        assert _visible(tmp_path) == []


class TestTta:
    def test_identity(self, tmp_path):
        m = _labels(0)
        write_volume(m, tmp_path / "in.nii.gz")
        assert main(["tta", "--spec", '{"kind": "identity"}', "--input",
                     str(tmp_path / "in.nii.gz"), "--output-dir", str(tmp_path)]) == 0
        assert np.array_equal(read_label_map(tmp_path / "transformed.nii.gz").data, m.data)

    def test_shift_round_trip_on_valid_mask(self, tmp_path):
        m = _labels(5)
        write_volume(m, tmp_path / "in.nii.gz")
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(TransformSpec.shift((2, -1, 3)).to_dict()))
        assert main(["tta", "--spec", str(spec), "--input", str(tmp_path / "in.nii.gz"),
                     "--output-dir", str(tmp_path / "fw")]) == 0
        assert main(["tta", "--spec", str(spec), "--invert", "--valid-mask", "--input",
                     str(tmp_path / "fw" / "transformed.nii.gz"),
                     "--output-dir", str(tmp_path / "bw")]) == 0
        back = read_label_map(tmp_path / "bw" / "transformed.nii.gz").data
        # voxels whose forward position stays inside the volume survive the trip
        keep = np.asarray(valid_mask(TransformSpec.shift((2, -1, 3)), m.dims).data) == 1
        assert np.array_equal(back[keep], np.asarray(m.data)[keep])
        assert (tmp_path / "bw" / "valid_mask.nii.gz").exists()

    def test_intensity_default_trilinear(self, tmp_path):
        grid = VoxelGrid(np.full((8, 8, 8), 5.0, np.float32))
        write_volume(grid, tmp_path / "ct.nii.gz")
        spec = json.dumps(TransformSpec.rotation(10).to_dict())
        assert main(["tta", "--spec", spec, "--input", str(tmp_path / "ct.nii.gz"),
                     "--output-dir", str(tmp_path)]) == 0
        out = read_volume(tmp_path / "transformed.nii.gz").data
        assert set(np.unique(out)) <= {5.0, -1024.0}

    def test_singular_matrix(self, tmp_path, capsys):
        write_volume(_labels(0), tmp_path / "in.nii.gz")
        spec = tmp_path / "bad.json"
        spec.write_text(json.dumps({"kind": "affine",
                                    "matrix": [[1, 0, 0], [0, 1, 0], [1, 1, 0]]}))
        assert main(["tta", "--spec", str(spec), "--input", str(tmp_path / "in.nii.gz"),
                     "--output-dir", str(tmp_path / "o")]) == 5
        assert "determinant" in capsys.readouterr().err

    def test_missing_input(self, tmp_path):
        assert main(["tta", "--spec", '{"kind": "identity"}', "--input",
                     str(tmp_path / "none.nii.gz"), "--output-dir", str(tmp_path)]) == 2
