import json
import math

import numpy as np
import pytest

from csisense.cli import EXIT_CONFIG, EXIT_IO, load_scenario, main

TINY_SCENARIO = dict(
    name="tiny",
    tx=[0.0, 0.5],
    room_side=2.0,
    receivers=[
        {"position": [2.0, 1.5], "boresight": math.pi, "n_antennas": 4},
        {"position": [1.0, 0.0], "boresight": math.pi / 2, "n_antennas": 4},
    ],
    beam_angles=[-0.8, 0.0, 0.8],
    grid_pitch=0.5,
)


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_SCENARIO))
    return str(path)


def read_tree(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


class TestPresets:
    @pytest.mark.parametrize("name,links", [("scenario1", 3), ("scenario2", 2),
                                            ("scenario3", 1)])
    def test_preset_deployments(self, name, links):
        s = load_scenario(name)
        assert s.n_links == links
        assert s.n_antennas == 8
        assert s.n_beams == 7
        assert s.room_side == 5.0

    def test_scenarios_are_nested(self):
        s1, s2, s3 = (load_scenario(f"scenario{i}") for i in (1, 2, 3))
        assert s2.receivers == s1.receivers[:2]
        assert s3.receivers == s1.receivers[:1]

    def test_table_beam_angles(self):
        beams = load_scenario("scenario1").beam_angles
        expected = (-math.pi / 2, -math.pi / 3, -math.pi / 6, 0.0,
                    math.pi / 6, math.pi / 3, math.pi / 2)
        assert np.allclose(beams, expected, atol=1e-12)


class TestGen:
    def test_gen_writes_dataset(self, tmp_path, scenario_file, capsys):
        out = tmp_path / "ds"
        rc = main(["gen", "--scenario", scenario_file, "--protocol", "resolution",
                   "--sigma", "0.4", "--n", "6", "--seed", "7", "--out", str(out)])
        assert rc == 0
        assert {"manifest.json", "frames.bin", "labels.csv"} <= {
            p.name for p in out.iterdir()}
        assert "12 records (6 null, 6 target)" in capsys.readouterr().out

    def test_gen_deterministic_bytes(self, tmp_path, scenario_file):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ["gen", "--scenario", scenario_file, "--sigma", "0.4", "--n", "5",
                "--seed", "3"]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert read_tree(a) == read_tree(b)

    def test_invalid_sigma_exits_2(self, tmp_path, scenario_file, capsys):
        rc = main(["gen", "--scenario", scenario_file, "--sigma", "-1",
                   "--n", "2", "--out", str(tmp_path / "x")])
        assert rc == EXIT_CONFIG

    def test_unknown_scenario_key_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({**TINY_SCENARIO, "bogus": 1}))
        rc = main(["gen", "--scenario", str(bad), "--sigma", "0.4", "--n", "2",
                   "--out", str(tmp_path / "x")])
        assert rc == EXIT_CONFIG

    def test_paper_scale_counts(self, tmp_path, scenario_file, capsys):
        out = tmp_path / "full"
        rc = main(["gen", "--scenario", scenario_file, "--protocol", "resolution",
                   "--sigma", "0.4", "--seed", "1", "--paper-scale",
                   "--out", str(out)])
        assert rc == 0
        assert "4000 records (2000 null, 2000 target)" in capsys.readouterr().out

    def test_binned_protocol(self, tmp_path, scenario_file):
        out = tmp_path / "cov"
        rc = main(["gen", "--scenario", scenario_file, "--protocol", "coverage",
                   "--sigma", "0.4", "--n", "2", "--pitch", "1.0", "--seed", "1",
                   "--out", str(out)])
        assert rc == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["protocol"] == "coverage"
        assert manifest["grid_pitch"] == 1.0


class TestTrainEvalFlow:
    @pytest.fixture
    def dataset_dir(self, tmp_path, scenario_file):
        out = tmp_path / "ds"
        assert main(["gen", "--scenario", scenario_file, "--sigma", "0.6",
                     "--n", "20", "--seed", "5", "--out", str(out)]) == 0
        return out

    def test_train_eval_detect(self, tmp_path, scenario_file, dataset_dir, capsys):
        model = tmp_path / "det.csnn"
        rc = main(["train", "--data", str(dataset_dir), "--task", "detect",
                   "--epochs", "3", "--seed", "1", "--out", str(model)])
        assert rc == 0
        assert model.exists() and model.with_suffix(".csnn.log.csv").exists()
        out_csv = tmp_path / "eval.csv"
        rc = main(["eval", "--model", str(model), "--scenario", scenario_file,
                   "--sigma", "0.6", "--drops", "5", "--seed", "2",
                   "--out", str(out_csv)])
        assert rc == 0
        assert out_csv.read_text().splitlines()[0] == "sigma,P,n"

    def test_resolution_sweep(self, tmp_path, scenario_file, dataset_dir, capsys):
        model = tmp_path / "det.csnn"
        assert main(["train", "--data", str(dataset_dir), "--task", "detect",
                     "--epochs", "2", "--seed", "1", "--out", str(model)]) == 0
        out_csv = tmp_path / "res.csv"
        rc = main(["eval", "--model", str(model), "--scenario", scenario_file,
                   "--sigmas", "0.3,0.6", "--gamma", "0.5", "--drops", "4",
                   "--seed", "2", "--out", str(out_csv)])
        assert rc == 0
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0] == "sigma,P,n" and len(lines) == 3
        assert "resolution at gamma=0.5" in capsys.readouterr().out

    def test_train_rerun_byte_identical(self, tmp_path, dataset_dir):
        args = ["train", "--data", str(dataset_dir), "--task", "detect",
                "--epochs", "2", "--seed", "9"]
        a, b = tmp_path / "a.csnn", tmp_path / "b.csnn"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_detect_eval_defaults_to_700_drops(self, tmp_path, scenario_file,
                                               dataset_dir, capsys):
        model = tmp_path / "det.csnn"
        assert main(["train", "--data", str(dataset_dir), "--task", "detect",
                     "--epochs", "2", "--seed", "1", "--out", str(model)]) == 0
        rc = main(["eval", "--model", str(model), "--scenario", scenario_file,
                   "--sigma", "0.6", "--seed", "2", "--out", str(tmp_path / "e.csv")])
        assert rc == 0
        assert "over 700 drops/hypothesis" in capsys.readouterr().out

    def test_train_missing_dataset_exits_3(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "nope"), "--out",
                   str(tmp_path / "m.csnn")])
        assert rc == EXIT_IO

    def test_locate_train_and_eval(self, tmp_path, scenario_file, capsys):
        ds = tmp_path / "pos"
        assert main(["gen", "--scenario", scenario_file, "--protocol", "positioning",
                     "--sigma", "0.4", "--n", "4", "--pitch", "1.0", "--seed", "4",
                     "--out", str(ds)]) == 0
        model = tmp_path / "loc.csnn"
        assert main(["train", "--data", str(ds), "--task", "locate",
                     "--epochs", "3", "--seed", "1", "--out", str(model)]) == 0
        out_csv = tmp_path / "pos.csv"
        rc = main(["eval", "--model", str(model), "--scenario", scenario_file,
                   "--sigma", "0.4", "--drops", "6", "--seed", "3",
                   "--out", str(out_csv)])
        assert rc == 0
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0] == "drop,err" and len(lines) == 7
        # without --drops the positioning evaluation defaults to 1000
        rc = main(["eval", "--model", str(model), "--scenario", scenario_file,
                   "--sigma", "0.4", "--seed", "3", "--out", str(out_csv)])
        assert rc == 0
        assert len(out_csv.read_text().strip().splitlines()) == 1001


class TestCoverageAndBaseline:
    @pytest.fixture
    def detect_model(self, tmp_path, scenario_file):
        ds = tmp_path / "ds"
        assert main(["gen", "--scenario", scenario_file, "--sigma", "0.6",
                     "--n", "10", "--seed", "5", "--out", str(ds)]) == 0
        model = tmp_path / "m.csnn"
        assert main(["train", "--data", str(ds), "--task", "detect",
                     "--epochs", "2", "--seed", "1", "--out", str(model)]) == 0
        return model

    def test_coverage_outputs(self, tmp_path, scenario_file, detect_model):
        csv_path, pgm_path = tmp_path / "cov.csv", tmp_path / "cov.pgm"
        rc = main(["coverage", "--model", str(detect_model), "--scenario",
                   scenario_file, "--sigma", "0.4", "--pitch", "1.0",
                   "--drops-per-bin", "2", "--seed", "2",
                   "--out", str(csv_path), "--pgm", str(pgm_path)])
        assert rc == 0
        assert csv_path.read_text().splitlines()[0] == "bin_x,bin_y,P,n"
        assert pgm_path.read_text().startswith("P2\n")

    def test_coverage_single_bin_room(self, tmp_path, scenario_file, detect_model):
        csv_path = tmp_path / "one.csv"
        rc = main(["coverage", "--model", str(detect_model), "--scenario",
                   scenario_file, "--sigma", "0.4", "--pitch", "2.0",
                   "--drops-per-bin", "2", "--seed", "2", "--out", str(csv_path)])
        assert rc == 0
        assert len(csv_path.read_text().strip().splitlines()) == 2  # header + 1 bin

    def test_baseline_csv(self, tmp_path, scenario_file, capsys):
        out = tmp_path / "base.csv"
        rc = main(["baseline", "--scenario", scenario_file, "--sigma", "0.4",
                   "--drops", "4", "--seed", "6", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "drop,true_x,true_y,est_x,est_y,error_m,variant"
        assert len(lines) == 1 + 2 * 4  # both variants on the same drops
        printed = capsys.readouterr().out
        assert "swept-7" in printed and "overlapped-180" in printed

    def test_baseline_deterministic(self, tmp_path, scenario_file):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ["baseline", "--scenario", scenario_file, "--sigma", "0.4",
                "--drops", "3", "--seed", "6", "--variant", "swept7"]
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()


class TestVariantFlags:
    def test_no_los_and_snr(self, tmp_path, scenario_file):
        out = tmp_path / "ds"
        rc = main(["gen", "--scenario", scenario_file, "--sigma", "0.4", "--n", "2",
                   "--seed", "1", "--no-los", "--snr-db", "inf",
                   "--scatter-coeff", "0.5", "--out", str(out)])
        assert rc == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["scenario"]["include_los"] is False
        assert manifest["scenario"]["snr_db"] == float("inf")
        assert manifest["scenario"]["scatter_coeff"] == 0.5
