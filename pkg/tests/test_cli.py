"""Tests for confmaplib.cli — argument handling and exit codes"""

import json

import numpy as np
import pytest

from confmaplib.cli import EXIT_INPUT, EXIT_OK, EXIT_SOLVER, build_parser, run_cli
from confmaplib.config import Settings
from confmaplib.formats import grid_from, read_grid, write_grid, write_pgm
from confmaplib.grids import ProbMap
from conftest import square_labels


@pytest.fixture
def image_pgm(tmp_path):
    path = tmp_path / "img.pgm"
    write_pgm(0.4 + 0.1 * np.random.default_rng(7).random((8, 8)), path)
    return path


@pytest.fixture
def labels_cmg(tmp_path):
    path = tmp_path / "labels.cmg"
    write_grid(grid_from(square_labels(8, 2, 6)), path)
    return path


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class TestParser:

    def test_defaults_come_from_settings(self):
        parser = build_parser(Settings(alpha=1.5, workers=3))
        args = parser.parse_args(["compute", "--in", "a.pgm", "--out", "b.cmg"])
        assert args.alpha == 1.5
        assert args.workers == 3
        assert args.max_iter is None

    def test_sweep_lists(self):
        args = build_parser().parse_args([
            "sweep", "--in", "a.pgm", "--out", "d",
            "--alpha-list", "0.5", "0.2", "--beta-list", "100", "400",
        ])
        assert args.alpha_list == [0.5, 0.2]
        assert args.beta_list == [100.0, 400.0]

    def test_metrics_pairs(self):
        args = build_parser().parse_args([
            "metrics", "--pred", "p1", "--gt", "g1", "--pred", "p2", "--gt", "g2",
            "--out", "m.csv", "--spacing", "0.5", "0.5",
        ])
        assert args.pred == ["p1", "p2"]
        assert args.gt == ["g1", "g2"]
        assert args.config_order == "subject_first"

    def test_preconditioner_and_spacing(self):
        """compute takes the preconditioner from settings and an optional spacing."""
        args = build_parser().parse_args([
            "compute", "--in", "a.pgm", "--out", "b.cmg", "--spacing", "0.2", "0.3",
        ])
        assert args.preconditioner == "ilu"
        assert args.spacing == [0.2, 0.3]

    def test_unknown_preconditioner(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([
                "compute", "--in", "a.pgm", "--out", "b.cmg", "--preconditioner", "amg",
            ])


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

class TestExitCodes:

    def test_compute_success(self, image_pgm, tmp_path):
        out = tmp_path / "cm.cmg"
        code = run_cli([
            "compute", "--in", str(image_pgm), "--alpha", "0.5", "--beta", "100",
            "--out", str(out),
        ])
        assert code == EXIT_OK
        assert np.all(read_grid(out).data[0, 0] == 1.0)

    def test_help(self, capsys):
        """--help prints usage and exits 0."""
        assert run_cli(["--help"]) == EXIT_OK
        assert "compute" in capsys.readouterr().out

    def test_unknown_flag(self, capsys):
        assert run_cli(["compute", "--bogus"]) == EXIT_INPUT
        assert "usage" in capsys.readouterr().err

    def test_missing_subcommand(self):
        assert run_cli([]) == EXIT_INPUT

    def test_missing_file(self, tmp_path, capsys):
        """An unreadable input maps to exit code 2."""
        code = run_cli([
            "compute", "--in", str(tmp_path / "nope.pgm"), "--out", str(tmp_path / "o.cmg"),
        ])
        assert code == EXIT_INPUT
        assert "confmaplib: error" in capsys.readouterr().err

    def test_bad_pgm(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P6 1 1 255\n" + bytes(3))
        assert run_cli(["compute", "--in", str(path), "--out", str(tmp_path / "o.cmg")]) == EXIT_INPUT

    def test_invalid_parameter(self, image_pgm, tmp_path):
        code = run_cli([
            "compute", "--in", str(image_pgm), "--alpha", "-1", "--out", str(tmp_path / "o.cmg"),
        ])
        assert code == EXIT_INPUT

    def test_bad_log_level(self, image_pgm, tmp_path):
        code = run_cli([
            "compute", "--in", str(image_pgm), "--out", str(tmp_path / "o.cmg"),
            "--log-level", "LOUD",
        ])
        assert code == EXIT_INPUT

    def test_spacing_needs_two_values_for_images(self, image_pgm, tmp_path):
        code = run_cli([
            "compute", "--in", str(image_pgm), "--out", str(tmp_path / "o.cmg"),
            "--spacing", "0.2",
        ])
        assert code == EXIT_INPUT

    def test_non_convergence(self, tmp_path, capsys):
        """A solver that runs out of iterations maps to exit code 3."""
        path = tmp_path / "noise.pgm"
        write_pgm(np.random.default_rng(3).random((12, 12)), path)
        code = run_cli([
            "compute", "--in", str(path), "--out", str(tmp_path / "o.cmg"),
            "--tol", "1e-14", "--max-iter", "1", "--preconditioner", "jacobi",
        ])
        assert code == EXIT_SOLVER
        assert "solver error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

class TestSubcommands:

    def test_sweep(self, image_pgm, tmp_path):
        out = tmp_path / "sweep"
        code = run_cli([
            "sweep", "--in", str(image_pgm), "--out", str(out),
            "--alpha-list", "0.5", "2", "--beta-list", "100",
        ])
        assert code == EXIT_OK
        assert sorted(p.name for p in out.iterdir()) == [
            "cm_a0.5_b100.cmg", "cm_a2_b100.cmg"
        ]

    def test_compute_records_spacing(self, image_pgm, tmp_path):
        out = tmp_path / "cm.cmg"
        assert run_cli([
            "compute", "--in", str(image_pgm), "--out", str(out), "--spacing", "0.2", "0.3",
        ]) == EXIT_OK
        assert read_grid(out).spacing == pytest.approx((0.2, 0.3, 1.0))

    def test_sweep_is_identical_across_workers(self, image_pgm, tmp_path):
        """--workers 4 writes the same bytes as --workers 1."""
        contents = []
        for workers in ("1", "4"):
            out = tmp_path / f"sweep{workers}"
            assert run_cli([
                "sweep", "--in", str(image_pgm), "--out", str(out),
                "--alpha-list", "0.5", "2", "--beta-list", "100", "90",
                "--spacing", "0.5", "0.5", "--workers", workers,
            ]) == EXIT_OK
            contents.append({p.name: p.read_bytes() for p in out.iterdir()})
        assert contents[0] == contents[1]
        assert len(contents[0]) == 2

    def test_mask_and_loss(self, image_pgm, labels_cmg, tmp_path, capsys):
        cm = tmp_path / "cm.cmg"
        assert run_cli(["compute", "--in", str(image_pgm), "--out", str(cm)]) == EXIT_OK
        masked = tmp_path / "m.cmg"
        assert run_cli([
            "mask", "--labels", str(labels_cmg), "--cm", str(cm), "--out", str(masked)
        ]) == EXIT_OK
        assert read_grid(masked).depth == 2

        pred = tmp_path / "p.cmg"
        write_grid(grid_from(ProbMap(data=np.full((8, 8, 2), 0.5))), pred)
        capsys.readouterr()
        assert run_cli([
            "loss", "--kind", "ce_conf", "--labels", str(labels_cmg),
            "--pred", str(pred), "--cm", str(cm),
        ]) == EXIT_OK
        payload = json.loads(capsys.readouterr().out)
        assert payload["total"] > 0.0

    def test_loss_to_file(self, labels_cmg, tmp_path):
        pred = tmp_path / "p.cmg"
        write_grid(grid_from(ProbMap(data=np.full((8, 8, 2), 0.5))), pred)
        out = tmp_path / "loss.json"
        assert run_cli([
            "loss", "--kind", "ce", "--labels", str(labels_cmg), "--pred", str(pred),
            "--out", str(out),
        ]) == EXIT_OK
        assert json.loads(out.read_text())["total"] == pytest.approx(np.log(2))

    def test_unknown_loss_kind(self, labels_cmg):
        """An unknown --kind exits with the input error code."""
        assert run_cli([
            "loss", "--kind", "focal", "--labels", str(labels_cmg), "--pred", "p.cmg",
        ]) == EXIT_INPUT

    def test_metrics_identical(self, labels_cmg, tmp_path):
        out = tmp_path / "m.csv"
        out_json = tmp_path / "m.json"
        assert run_cli([
            "metrics", "--pred", str(labels_cmg), "--gt", str(labels_cmg),
            "--subject", "s1", "--out", str(out), "--json", str(out_json),
        ]) == EXIT_OK
        header, row = out.read_text().splitlines()
        assert header == "subject,class,dsc,iou,precision,recall,miss_rate,fall_out,asd_mm,hd_mm,hd95_mm"
        fields = row.split(",")
        assert fields[2] == "1"
        assert fields[8] == "0"
        assert json.loads(out_json.read_text())["n_subjects"] == 1

    def test_oracle_mc_is_reproducible(self, image_pgm, tmp_path, capsys):
        outputs, summaries = [], []
        for name, workers in (("a.cmg", "1"), ("b.cmg", "4")):
            out = tmp_path / name
            assert run_cli([
                "oracle", "mc", "--in", str(image_pgm), "--out", str(out),
                "--walks", "200", "--seed", "7", "--workers", workers,
            ]) == EXIT_OK
            outputs.append(out.read_bytes())
            summaries.append(json.loads(capsys.readouterr().out))
        assert outputs[0] == outputs[1]
        assert summaries[0] == summaries[1]

    def test_oracle_dense(self, image_pgm, tmp_path, capsys):
        assert run_cli([
            "oracle", "dense", "--in", str(image_pgm), "--out", str(tmp_path / "d.cmg"),
            "--tol", "1e-12",
        ]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["max_abs_diff"] < 1e-6

    def test_train_toy(self, tmp_path):
        out = tmp_path / "study.json"
        assert run_cli([
            "train-toy", "--out", str(out), "--configs", "1ch-ce", "1ch-ce_conf",
            "--seeds", "2", "--epochs", "3",
        ]) == EXIT_OK
        payload = json.loads(out.read_text())
        assert payload["seeds"] == [0, 1]
        assert len(payload["runs"]) == 4

    def test_train_toy_is_identical_across_workers(self, tmp_path):
        reports = []
        for workers in ("1", "4"):
            out = tmp_path / f"study{workers}.json"
            assert run_cli([
                "train-toy", "--out", str(out), "--configs", "1ch-ce", "2ch-dice",
                "--seeds", "2", "--epochs", "3", "--workers", workers,
            ]) == EXIT_OK
            reports.append(out.read_bytes())
        assert reports[0] == reports[1]

    def test_train_toy_unknown_configuration(self, tmp_path):
        assert run_cli([
            "train-toy", "--out", str(tmp_path / "s.json"), "--configs", "3ch-ce",
            "--seeds", "1", "--epochs", "1",
        ]) == EXIT_INPUT

    def test_entropy(self, tmp_path):
        paths = []
        for i, p in enumerate((0.2, 0.8)):
            paths.append(tmp_path / f"p{i}.cmg")
            data = np.stack([np.full((3, 3), p), np.full((3, 3), 1 - p)], axis=-1)
            write_grid(grid_from(ProbMap(data=data)), paths[-1])
        out = tmp_path / "h.cmg"
        assert run_cli(["entropy", "--in", *map(str, paths), "--out", str(out)]) == EXIT_OK
        assert read_grid(out).data[0, 0, 0] == pytest.approx(np.log(2), abs=1e-6)
