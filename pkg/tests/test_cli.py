import filecmp
import io
import sys

import pytest

from gratingscope.cli import main
from gratingscope.dataset import datasets_equal, load_dataset, load_result_maps


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "system.ini"
    path.write_text("""
[detector]
width = 24
height = 24
dark_sigma = 0
shot_noise = false
quantize = false

[phantom]
kind = slab
margin = 6

[scan]
steps = 8
frames_to_average = 1
seed = 3
""")
    return str(path)


def run_cli(*argv):
    return main(list(argv))


class TestScanCommand:
    def test_mode_b_writes_both_arms(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "scan"
        assert run_cli("scan", "--config", tiny_config, "--mode", "b",
                       "--out", str(out)) == 0
        ds = load_dataset(out)
        assert len(ds.entries) == 16  # both arms
        stdout = capsys.readouterr().out
        assert "reference" in stdout and "sample" in stdout

    def test_full_length_scan_counts(self, tiny_config, tmp_path):
        out = tmp_path / "scan50"
        assert run_cli("scan", "--config", tiny_config, "--mode", "b",
                       "--steps", "50", "--avg", "2", "--out", str(out)) == 0
        ds = load_dataset(out)
        assert len(ds.entries) == 100
        assert ds.frames_averaged == 2

    def test_too_few_steps_exits_2(self, tiny_config, tmp_path, capsys):
        assert run_cli("scan", "--config", tiny_config, "--steps", "2",
                       "--out", str(tmp_path / "x")) == 2
        assert "steps" in capsys.readouterr().err

    def test_seed_reproducibility(self, tiny_config, tmp_path):
        cfg_noise = tmp_path / "noisy.ini"
        cfg_noise.write_text("""
[detector]
width = 16
height = 16
quantize = true
shot_noise = true

[phantom]
kind = slab
margin = 4

[scan]
steps = 4
frames_to_average = 1
""")
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_cli("scan", "--config", str(cfg_noise), "--seed", "42",
                       "--out", str(a)) == 0
        assert run_cli("scan", "--config", str(cfg_noise), "--seed", "42",
                       "--out", str(b)) == 0
        assert datasets_equal(load_dataset(a), load_dataset(b))
        raws = sorted(p.name for p in a.glob("*.raw"))
        for name in raws:
            assert filecmp.cmp(a / name, b / name, shallow=False)

    def test_bad_config_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[detector]\nwidth = banana\n")
        assert run_cli("scan", "--config", str(bad), "--out", str(tmp_path / "x")) == 2
        assert "banana" in capsys.readouterr().err


class TestRetrieveCommand:
    def test_round_trip_report(self, tiny_config, tmp_path, capsys):
        scan_dir = tmp_path / "scan"
        run_cli("scan", "--config", tiny_config, "--mode", "b", "--out", str(scan_dir))
        out = tmp_path / "res"
        assert run_cli("retrieve", str(scan_dir), str(scan_dir), "--out", str(out)) == 0
        stdout = capsys.readouterr().out
        assert "visibility" in stdout
        maps, diag = load_result_maps(out)
        assert set(maps) >= {"transmission", "dpc", "darkfield"}
        assert (out / "transmission.pgm").exists()
        assert (out / "diagnostics.txt").exists()
        # reference-arm visibility reported near V0 = 0.2
        assert float(diag["reference-visibility"]) == pytest.approx(0.2, rel=1e-3)

    def test_identical_dirs_unit_report(self, tiny_config, tmp_path):
        scan_dir = tmp_path / "scan"
        run_cli("scan", "--config", tiny_config, "--mode", "b", "--out", str(scan_dir))
        out = tmp_path / "res"
        run_cli("retrieve", str(scan_dir), str(scan_dir), "--out", str(out))
        maps, _ = load_result_maps(out)
        center = maps["transmission"][8:16, 8:16]
        assert abs(center - 0.8).max() < 1e-4  # slab phantom interior

    def test_missing_manifest_exits_2(self, tmp_path, capsys):
        empty = tmp_path / "nothing"
        empty.mkdir()
        assert run_cli("retrieve", str(empty), str(empty), "--out",
                       str(tmp_path / "res")) == 2
        assert "manifest" in capsys.readouterr().err

    def test_incompatible_datasets_exit_2(self, tiny_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_cli("scan", "--config", tiny_config, "--mode", "b", "--steps", "8",
                "--out", str(a))
        run_cli("scan", "--config", tiny_config, "--mode", "b", "--steps", "16",
                "--out", str(b))
        assert run_cli("retrieve", str(a), str(b), "--out", str(tmp_path / "r")) == 2


class TestGeometryCommand:
    def test_check_ok_exit_0(self, tiny_config):
        assert run_cli("geometry", "--config", tiny_config, "check") == 0

    def test_violation_exit_1(self, tmp_path):
        cfg = tmp_path / "geom.ini"
        cfg.write_text("[geometry]\np0 = 20e-6\np2 = 2.4e-6\nl = 1.6\nd = 0.2\n")
        assert run_cli("geometry", "--config", str(cfg), "check") == 1

    def test_invalid_input_exit_2(self, tmp_path):
        cfg = tmp_path / "geom.ini"
        cfg.write_text("[geometry]\np0 = -1\n")
        assert run_cli("geometry", "--config", str(cfg), "check") == 2

    def test_complete_prints_missing_field(self, tmp_path, capsys):
        cfg = tmp_path / "geom.ini"
        cfg.write_text("[geometry]\np0 =\np2 = 2.4e-6\nl = 1.6\nd = 0.2\n")
        assert run_cli("geometry", "--config", str(cfg), "complete") == 0
        out = capsys.readouterr().out
        assert "p0 = 1.920000000e-05 (computed)" in out


class TestProtocolRepl:
    def test_local_repl_annotates(self, monkeypatch, capsys):
        monkeypatch.setattr(sys, "stdin", io.StringIO("?R/\nX:50/\nbogus\n\n"))
        assert run_cli("protocol-repl", "--local") == 0
        out = capsys.readouterr().out
        assert "OK/" in out
        assert "move_relative(axis=X, value=50)" in out
        assert "parse_error" in out


class TestDatasetCommand:
    def test_info_and_verify(self, tiny_config, tmp_path, capsys):
        scan_dir = tmp_path / "scan"
        run_cli("scan", "--config", tiny_config, "--mode", "a", "--out", str(scan_dir))
        assert run_cli("dataset", "info", str(scan_dir)) == 0
        assert run_cli("dataset", "verify", str(scan_dir)) == 0
        out = capsys.readouterr().out
        assert "verify: ok" in out

    def test_verify_detects_corruption(self, tiny_config, tmp_path, capsys):
        scan_dir = tmp_path / "scan"
        run_cli("scan", "--config", tiny_config, "--mode", "a", "--out", str(scan_dir))
        victim = sorted(scan_dir.glob("*.raw"))[0]
        data = bytearray(victim.read_bytes())
        data[0] ^= 0xFF
        victim.write_bytes(bytes(data))
        assert run_cli("dataset", "verify", str(scan_dir)) == 2
        assert "CRC32" in capsys.readouterr().err


class TestUsage:
    def test_unknown_flag_exits_2(self):
        assert run_cli("scan", "--frobnicate") == 2

    def test_unknown_subcommand_exits_2(self):
        assert run_cli("launch-xray") == 2


class TestPhantomCommand:
    def test_writes_loadable_phantom(self, tiny_config, tmp_path):
        out = tmp_path / "ph"
        assert run_cli("phantom", "--config", tiny_config, "disk", "--out", str(out)) == 0
        from gratingscope.dataset import load_phantom
        phantom = load_phantom(out)
        assert phantom.transmission.shape == (24, 24)
