import pytest

from gratingscope.config import SystemConfig, default_stage_map, load_config
from gratingscope.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "system.ini"
    path.write_text(text)
    return path


class TestLoad:
    def test_defaults_without_file(self):
        cfg = load_config(None, apply_env=False)
        assert cfg.detector.width == 512
        assert cfg.tube.voltage_kv == 45.0
        assert len(cfg.stages) == 22  # 21 motor stages + piezo

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.ini")

    def test_values_parsed(self, tmp_path):
        path = write(tmp_path, """
[detector]
width = 64
height = 32
quantize = false

[phantom]
margin = 8

[scan]
steps = 8
mode = a

[geometry]
p0 =
p2 = 2.4e-6
l = 1.6
d = 0.2
""")
        cfg = load_config(path, apply_env=False)
        assert cfg.detector.width == 64
        assert not cfg.detector.quantize
        assert cfg.scan.steps == 8
        assert cfg.geometry.p0 is None
        beamline = cfg.build_beamline()  # completes p0 from the other three
        assert beamline.geometry.p0 == pytest.approx(19.2e-6)

    def test_unknown_key_rejected(self, tmp_path):
        path = write(tmp_path, "[detector]\nwidht = 64\n")
        with pytest.raises(ConfigError, match="widht"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = write(tmp_path, "[detectors]\nwidth = 64\n")
        with pytest.raises(ConfigError, match="detectors"):
            load_config(path)

    def test_invalid_geometry_rejected_at_build(self, tmp_path):
        path = write(tmp_path, "[geometry]\np0 = 1e-6\np2 = 2.4e-6\nl = 1.6\nd = 0.2\n")
        cfg = load_config(path, apply_env=False)
        with pytest.raises(ConfigError, match="matching condition"):
            cfg.build_beamline()

    def test_env_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GRATINGSCOPE_PORT", "9111")
        monkeypatch.setenv("GRATINGSCOPE_DATA_DIR", str(tmp_path / "dd"))
        cfg = load_config(None)
        assert cfg.service.port == 9111
        assert cfg.service.data_dir == str(tmp_path / "dd")


class TestStages:
    def test_custom_stage_map(self, tmp_path):
        path = write(tmp_path, "[stages]\n1.X = translation, 2000, mm\n8.X = piezo, 1, um\n")
        cfg = load_config(path, apply_env=False)
        assert len(cfg.stages) == 2
        assert cfg.resolve_stage(1, "translation", "X").steps_per_unit == 2000

    def test_resolution_requires_triple_match(self):
        cfg = SystemConfig()
        with pytest.raises(ConfigError):
            cfg.resolve_stage(1, "rotary", "X")  # device 1 is translation
        with pytest.raises(ConfigError):
            cfg.resolve_stage(9, "translation", "X")

    def test_duplicate_stage_rejected(self, tmp_path):
        path = write(tmp_path, "[stages]\n1.X = translation, 1, mm\n1.x = rotary, 1, deg\n")
        with pytest.raises(ConfigError, match="duplicate"):
            load_config(path)

    def test_bad_motor_type_rejected(self, tmp_path):
        path = write(tmp_path, "[stages]\n1.X = warp, 1, mm\n")
        with pytest.raises(ConfigError, match="motor_type"):
            load_config(path)

    def test_default_map_covers_21_motor_stages(self):
        stages = default_stage_map()
        motor = [s for s in stages if s.motor_type != "piezo"]
        assert len(motor) == 21
        kinds = {s.motor_type for s in motor}
        assert kinds == {"translation", "rotary", "goniometric"}
