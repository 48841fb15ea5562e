"""Command-line behavior: exit codes, file outputs, and byte determinism.

Commands run in-process through main(argv); one subprocess smoke test
covers the installed entry point.
"""

import subprocess
import sys

import numpy as np
import pytest

from satgate.cli import main


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset plus one SAT and one ORG checkpoint to share."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run_cli("gen-data", "--out", str(data), "--extent", "16",
                   "--samples", "6", "--noise", "0.2", "--seed", "0") == 0
    ckpts = {}
    for variant in ("sat", "org"):
        ckpt = root / f"{variant}.ckpt"
        hist = root / f"{variant}.csv"
        assert run_cli("train", "--arch", "unet", "--variant", variant,
                       "--data", str(data), "--epochs", "1", "--batch", "4",
                       "--seed", "0", "--out", str(ckpt),
                       "--history", str(hist)) == 0
        ckpts[variant] = ckpt
    return {"root": root, "data": data, **ckpts}


class TestParsing:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as info:
            run_cli("--help")
        assert info.value.code == 0
        assert "gen-data" in capsys.readouterr().out

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            run_cli()
        assert info.value.code == 1

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            run_cli("params", "--arch", "unet", "--bogus")
        assert info.value.code == 1

    def test_bad_choice_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            run_cli("train", "--arch", "resnet", "--variant", "sat",
                    "--data", "x", "--out", "y", "--history", "z")
        assert info.value.code == 1

    def test_subcommand_help_lists_flags(self, capsys):
        with pytest.raises(SystemExit) as info:
            run_cli("train", "--help")
        assert info.value.code == 0
        out = capsys.readouterr().out
        for flag in ("--arch", "--variant", "--data", "--epochs", "--batch",
                     "--loss", "--opt", "--seed", "--out", "--history"):
            assert flag in out


class TestGenData:
    def test_writes_pairs_and_manifest(self, workspace):
        names = {p.name for p in workspace["data"].iterdir()}
        assert "img_0000.satt" in names and "msk_0005.satt" in names
        assert "manifest.txt" in names
        assert len(names) == 13  # 6 pairs + manifest

    def test_byte_deterministic(self, tmp_path):
        for sub in ("a", "b"):
            assert run_cli("gen-data", "--out", str(tmp_path / sub),
                           "--extent", "16", "--samples", "3",
                           "--seed", "4") == 0
        for name in ("img_0000.satt", "msk_0002.satt", "manifest.txt"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()


class TestTrain:
    def test_outputs_exist(self, workspace):
        assert workspace["sat"].exists()
        hist = (workspace["root"] / "sat.csv").read_text().splitlines()
        assert hist[0].startswith("epoch,train_loss,val_dice,val_fpr,val_fnr")
        assert "channels_off.gate.skip0" in hist[0]
        assert len(hist) == 2  # header + one epoch

    def test_byte_deterministic(self, tmp_path, workspace):
        outs = []
        for sub in ("a", "b"):
            ckpt = tmp_path / f"{sub}.ckpt"
            hist = tmp_path / f"{sub}.csv"
            assert run_cli("train", "--arch", "unet", "--variant", "sat",
                           "--data", str(workspace["data"]), "--epochs", "1",
                           "--batch", "4", "--seed", "3", "--out", str(ckpt),
                           "--history", str(hist)) == 0
            outs.append((ckpt.read_bytes(), hist.read_bytes()))
        assert outs[0] == outs[1]

    def test_missing_data_dir_is_runtime_error(self, tmp_path, capsys):
        code = run_cli("train", "--arch", "unet", "--variant", "sat",
                       "--data", str(tmp_path / "nope"), "--epochs", "1",
                       "--batch", "2", "--out", str(tmp_path / "c.ckpt"),
                       "--history", str(tmp_path / "h.csv"))
        assert code == 2
        assert "satgate: error:" in capsys.readouterr().err


class TestEval:
    def test_report_and_summary(self, workspace, tmp_path, capsys):
        report = tmp_path / "report.csv"
        assert run_cli("eval", "--ckpt", str(workspace["sat"]), "--data",
                       str(workspace["data"]), "--report", str(report)) == 0
        out = capsys.readouterr().out
        assert "dice " in out and "±" in out
        lines = report.read_text().splitlines()
        assert lines[0] == "sample,dice,fpr,fnr"
        assert len(lines) == 1 + 6 + 2  # header, samples, mean, std
        assert lines[-2].startswith("mean,")
        assert lines[-1].startswith("std,")
        # every metric cell parses back to a float in [0, 1]
        for line in lines[1:]:
            for cell in line.split(",")[1:]:
                assert 0.0 <= float(cell) <= 1.0

    def test_byte_deterministic(self, workspace, tmp_path):
        reports = []
        for sub in ("a", "b"):
            path = tmp_path / f"{sub}.csv"
            assert run_cli("eval", "--ckpt", str(workspace["sat"]), "--data",
                           str(workspace["data"]), "--report", str(path)) == 0
            reports.append(path.read_bytes())
        assert reports[0] == reports[1]

    def test_missing_checkpoint_is_runtime_error(self, workspace, tmp_path):
        assert run_cli("eval", "--ckpt", str(tmp_path / "ghost.ckpt"),
                       "--data", str(workspace["data"]),
                       "--report", str(tmp_path / "r.csv")) == 2


class TestParams:
    def test_single_variant_total(self, capsys):
        assert run_cli("params", "--arch", "unet", "--variant", "sat") == 0
        out = capsys.readouterr().out
        assert "27321 trainable parameters" in out
        assert "head" in out  # per-layer breakdown present

    def test_compare_table(self, capsys):
        assert run_cli("params", "--arch", "unet", "--compare") == 0
        out = capsys.readouterr().out
        totals = {}
        for line in out.splitlines():
            parts = line.split()
            if parts and parts[0] in ("org", "st", "at", "sat"):
                totals[parts[0]] = int(parts[1])
        assert set(totals) == {"org", "st", "at", "sat"}
        assert totals["sat"] < totals["org"]
        assert totals["org"] == 29937
        assert "vs org" in out and "%" in out


class TestSparsity:
    def test_reports_each_gate(self, workspace, capsys):
        assert run_cli("sparsity", "--ckpt", str(workspace["sat"])) == 0
        out = capsys.readouterr().out
        assert "gate.skip0" in out and "gate.skip1" in out
        assert "% off" in out and "hist [" in out

    def test_variant_without_selection_fails(self, workspace, capsys):
        assert run_cli("sparsity", "--ckpt", str(workspace["org"])) == 2
        assert "satgate: error:" in capsys.readouterr().err


class TestAttention:
    def test_exports_maps_prediction_and_truth(self, workspace, tmp_path,
                                               capsys):
        out_dir = tmp_path / "maps"
        assert run_cli("attention", "--ckpt", str(workspace["sat"]),
                       "--input", str(workspace["data"] / "img_0000.satt"),
                       "--out", str(out_dir)) == 0
        names = {p.name for p in out_dir.iterdir()}
        assert {"gate.skip0.f_a.pgm", "gate.skip1.f_a.pgm",
                "gate.skip0.f_s_grid.pgm", "gate.skip1.f_s_grid.pgm",
                "pred.pgm", "ground_truth.pgm"} <= names
        for name in names:
            assert (out_dir / name).read_bytes().startswith(b"P5\n")

    def test_prediction_matches_eval_binarization(self, workspace, tmp_path):
        from satgate.data import load_checkpoint, load_dataset
        from satgate.metrics import binarize
        from satgate.ops import sigmoid
        from satgate.tensor import Tensor

        out_dir = tmp_path / "maps"
        run_cli("attention", "--ckpt", str(workspace["sat"]),
                "--input", str(workspace["data"] / "img_0001.satt"),
                "--out", str(out_dir))
        bundle = load_checkpoint(str(workspace["sat"]))
        sample = load_dataset(str(workspace["data"]))[1]
        x = sample.image[..., np.newaxis]
        probs = sigmoid(bundle.model.forward(x, training=False)).data
        expected = binarize(probs)[..., 0, 0]
        raw = (out_dir / "pred.pgm").read_bytes()
        header = b"P5\n16 16\n255\n"
        assert raw.startswith(header)
        pixels = np.frombuffer(raw[len(header):], dtype=np.uint8) / 255.0
        assert np.array_equal(pixels.reshape(16, 16), expected)


class TestGradcheckCommand:
    def test_single_op_passes(self, capsys):
        assert run_cli("gradcheck", "--op", "trelu") == 0
        out = capsys.readouterr().out
        assert "trelu" in out and "PASS" in out
        assert "worst rel err" in out

    def test_unknown_op_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            run_cli("gradcheck", "--op", "fft")
        assert info.value.code == 1


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "satgate", "params", "--arch", "unet",
             "--variant", "org"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert "29937" in proc.stdout
