"""System configuration: one INI-style text file, CLI/env overridable.

Sections: ``geometry``, ``tube``, ``detector``, ``piezo``, ``fringe``,
``scan``, ``phantom``, ``service`` and ``stages``. Every key has a default,
so an empty (or absent) file yields the stock simulated instrument. The
environment variables ``GRATINGSCOPE_PORT``, ``GRATINGSCOPE_MOTOR_BASE_PORT``
and ``GRATINGSCOPE_DATA_DIR`` override their file counterparts; CLI flags
override both. See ``docs/config.md`` for the full schema.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .acquisition import ScanConfig
from .beamline import (
    Beamline,
    DetectorConfig,
    FringeModel,
    PiezoStage,
    TubeLimits,
    TubeState,
)
from .dataset import load_phantom
from .errors import ConfigError
from .geometry import BeamlineGeometry, complete_geometry, validate_geometry, wavelength_from_voltage
from .phantoms import build_phantom

ENV_PREFIX = "GRATINGSCOPE_"

MOTOR_TYPES = ("translation", "rotary", "goniometric", "piezo")


@dataclass(frozen=True, slots=True)
class StageInfo:
    device: int          # controller/device number, 1..8
    axis: str            # X | Y | Z
    motor_type: str
    steps_per_unit: float
    unit: str            # mm, deg, um, ...


def default_stage_map() -> list[StageInfo]:
    """21 motor stages over controllers 1..7 plus the piezo as device 8/X."""
    stages = []
    for device in (1, 2, 3, 4, 5):
        for axis in ("X", "Y", "Z"):
            stages.append(StageInfo(device, axis, "translation", 1000.0, "mm"))
    for axis in ("X", "Y", "Z"):
        stages.append(StageInfo(6, axis, "rotary", 500.0, "deg"))
    for axis in ("X", "Y", "Z"):
        stages.append(StageInfo(7, axis, "goniometric", 2000.0, "deg"))
    stages.append(StageInfo(8, "X", "piezo", 1.0, "um"))
    return stages


@dataclass(slots=True)
class PhantomConfig:
    kind: str = "slab"           # uniform | slab | disk | file
    path: Optional[str] = None
    pixel_pitch_m: float = 50e-6
    transmission: float = 0.8
    fringe_shift_rad: float = 0.3
    scatter: float = 0.9
    margin: int = 16
    radius_frac: float = 0.3


@dataclass(slots=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8300
    motor_base_port: int = 8350
    data_dir: str = "./gratingscope-data"
    credentials: str = ""        # default: <data_dir>/credentials.txt
    session_ttl_s: float = 8 * 3600.0
    login_failure_limit: int = 5
    login_cooldown_s: float = 30.0
    stream_buffer: int = 4096
    scan_pacing_s: float = 0.0
    preview_interval_s: float = 0.25
    live_fps: float = 4.0

    def credentials_path(self) -> Path:
        if self.credentials:
            return Path(self.credentials)
        return Path(self.data_dir) / "credentials.txt"


@dataclass(slots=True)
class SystemConfig:
    geometry: BeamlineGeometry = field(
        default_factory=lambda: BeamlineGeometry(
            p0=19.2e-6, p1=4.8e-6, p2=2.4e-6, l=1.6, d=0.2,
            wavelength=wavelength_from_voltage(45.0),
        )
    )
    tube: TubeState = field(default_factory=TubeState)
    tube_limits: TubeLimits = field(default_factory=TubeLimits)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    piezo: PiezoStage = field(default_factory=PiezoStage)
    fringe: FringeModel = field(default_factory=FringeModel)
    scan: ScanConfig = field(default_factory=ScanConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)
    stages: list[StageInfo] = field(default_factory=default_stage_map)

    def build_beamline(self) -> Beamline:
        geometry = complete_geometry(self.geometry) if _has_unset(self.geometry) else self.geometry
        check = validate_geometry(geometry)
        if not check.ok:
            raise ConfigError(
                f"configured geometry violates the matching condition "
                f"(rel error {check.rel_error:.3e})"
            )
        beamline = Beamline(
            geometry=geometry,
            detector=self.detector,
            tube=self.tube,
            tube_limits=self.tube_limits,
            piezo=self.piezo,
            fringe=self.fringe,
        )
        sample = self.build_sample(beamline.detector.frame_shape, geometry)
        if sample is not None:
            beamline.load_sample(sample)
        return beamline

    def build_sample(self, frame_shape, geometry):
        p = self.phantom
        if p.kind == "none":
            return None
        if p.kind == "file":
            if not p.path:
                raise ConfigError("phantom kind 'file' needs a path")
            return load_phantom(p.path)
        kw = dict(
            pixel_pitch_m=p.pixel_pitch_m, transmission=p.transmission,
            fringe_shift_rad=p.fringe_shift_rad, scatter=p.scatter,
        )
        if p.kind == "slab":
            kw["margin"] = p.margin
        elif p.kind == "disk":
            kw["radius_frac"] = p.radius_frac
        try:
            return build_phantom(p.kind, frame_shape, geometry, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def resolve_stage(self, device: int, motor_type: str, axis: str) -> StageInfo:
        matches = [
            s for s in self.stages
            if s.device == device and s.motor_type == motor_type and s.axis == axis
        ]
        if len(matches) != 1:
            raise ConfigError(
                f"stage address (device={device}, motor_type={motor_type!r}, axis={axis!r}) "
                f"matches {len(matches)} configured stages"
            )
        return matches[0]


def _has_unset(g: BeamlineGeometry) -> bool:
    return any(getattr(g, name) is None for name in ("p0", "p2", "l", "d"))


# -- file parsing ----------------------------------------------------------------


def _get(parser, section, key, cast, current):
    if not parser.has_option(section, key):
        return current
    raw = parser.get(section, key).strip()
    if raw == "":
        return None if key in _OPTIONAL_NONE else current
    try:
        if cast is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


_OPTIONAL_NONE = {"p0", "p2", "l", "d"}

_KNOWN_KEYS = {
    "geometry": {"p0", "p1", "p2", "l", "d", "wavelength"},
    "tube": {"voltage_kv", "current_ma", "kv_min", "kv_max", "ma_min", "ma_max",
             "drift_amplitude", "drift_period_s"},
    "detector": {"width", "height", "exposure_s", "binning", "dark_mean", "dark_sigma",
                 "full_well", "shot_noise", "quantize"},
    "piezo": {"travel_min_um", "travel_max_um", "return_error_um", "resolution_um"},
    "fringe": {"reference_visibility", "p2_equiv_um", "reference_phase_turns",
               "flux_per_ma_s"},
    "scan": {"mode", "steps", "step_size_um", "frames_to_average", "exposure_s", "seed",
             "arms", "scan_start_um"},
    "phantom": {"kind", "path", "pixel_pitch_m", "transmission", "fringe_shift_rad",
                "scatter", "margin", "radius_frac"},
    "service": {"host", "port", "motor_base_port", "data_dir", "credentials",
                "session_ttl_s", "login_failure_limit", "login_cooldown_s",
                "stream_buffer", "scan_pacing_s", "preview_interval_s", "live_fps"},
    "stages": None,  # free-form device.axis keys
}


def load_config(path: Optional[str] = None, apply_env: bool = True) -> SystemConfig:
    """Parse the configuration file (all keys optional) and apply env vars."""
    cfg = SystemConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            parser.read_string(p.read_text(encoding="utf-8"), source=str(p))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        for section in parser.sections():
            if section not in _KNOWN_KEYS:
                raise ConfigError(f"unknown config section [{section}]")
            known = _KNOWN_KEYS[section]
            if known is not None:
                for key in parser.options(section):
                    if key not in known:
                        raise ConfigError(f"unknown key {key!r} in section [{section}]")
        _apply_file(cfg, parser)
    if apply_env:
        _apply_env(cfg)
    return cfg


def _apply_file(cfg: SystemConfig, parser: configparser.ConfigParser) -> None:
    g = cfg.geometry
    if parser.has_section("geometry"):
        g.p0 = _get(parser, "geometry", "p0", float, g.p0)
        g.p1 = _get(parser, "geometry", "p1", float, g.p1)
        g.p2 = _get(parser, "geometry", "p2", float, g.p2)
        g.l = _get(parser, "geometry", "l", float, g.l)
        g.d = _get(parser, "geometry", "d", float, g.d)
        g.wavelength = _get(parser, "geometry", "wavelength", float, g.wavelength)
    t = cfg.tube
    if parser.has_section("tube"):
        t.voltage_kv = _get(parser, "tube", "voltage_kv", float, t.voltage_kv)
        t.current_ma = _get(parser, "tube", "current_ma", float, t.current_ma)
        t.drift_amplitude = _get(parser, "tube", "drift_amplitude", float, t.drift_amplitude)
        t.drift_period_s = _get(parser, "tube", "drift_period_s", float, t.drift_period_s)
        lim = cfg.tube_limits
        lim.kv_min = _get(parser, "tube", "kv_min", float, lim.kv_min)
        lim.kv_max = _get(parser, "tube", "kv_max", float, lim.kv_max)
        lim.ma_min = _get(parser, "tube", "ma_min", float, lim.ma_min)
        lim.ma_max = _get(parser, "tube", "ma_max", float, lim.ma_max)
    if parser.has_section("detector"):
        d = cfg.detector
        width = _get(parser, "detector", "width", int, d.width)
        height = _get(parser, "detector", "height", int, d.height)
        cfg.detector = DetectorConfig(
            width=width, height=height,
            exposure_time_s=_get(parser, "detector", "exposure_s", float, d.exposure_time_s),
            binning=_get(parser, "detector", "binning", int, d.binning),
            dark_mean=_get(parser, "detector", "dark_mean", float, d.dark_mean),
            dark_sigma=_get(parser, "detector", "dark_sigma", float, d.dark_sigma),
            full_well=_get(parser, "detector", "full_well", int, d.full_well),
            shot_noise=_get(parser, "detector", "shot_noise", bool, d.shot_noise),
            quantize=_get(parser, "detector", "quantize", bool, d.quantize),
        )
    if parser.has_section("piezo"):
        pz = cfg.piezo
        pz.travel_min_um = _get(parser, "piezo", "travel_min_um", float, pz.travel_min_um)
        pz.travel_max_um = _get(parser, "piezo", "travel_max_um", float, pz.travel_max_um)
        pz.return_error_um = _get(parser, "piezo", "return_error_um", float, pz.return_error_um)
        pz.resolution_um = _get(parser, "piezo", "resolution_um", float, pz.resolution_um)
    if parser.has_section("fringe"):
        f = cfg.fringe
        f.reference_visibility = _get(parser, "fringe", "reference_visibility", float,
                                      f.reference_visibility)
        f.p2_equiv_um = _get(parser, "fringe", "p2_equiv_um", float, f.p2_equiv_um)
        f.reference_phase_turns = _get(parser, "fringe", "reference_phase_turns", float,
                                       f.reference_phase_turns)
        f.flux_per_ma_s = _get(parser, "fringe", "flux_per_ma_s", float, f.flux_per_ma_s)
    if parser.has_section("scan"):
        s = cfg.scan
        s.mode = _get(parser, "scan", "mode", str, s.mode)
        s.steps = _get(parser, "scan", "steps", int, s.steps)
        s.step_size_um = _get(parser, "scan", "step_size_um", float, s.step_size_um)
        s.frames_to_average = _get(parser, "scan", "frames_to_average", int,
                                   s.frames_to_average)
        s.exposure_s = _get(parser, "scan", "exposure_s", float, s.exposure_s)
        s.seed = _get(parser, "scan", "seed", int, s.seed)
        s.arms = _get(parser, "scan", "arms", str, s.arms)
        s.scan_start_um = _get(parser, "scan", "scan_start_um", float, s.scan_start_um)
    if parser.has_section("phantom"):
        ph = cfg.phantom
        ph.kind = _get(parser, "phantom", "kind", str, ph.kind)
        ph.path = _get(parser, "phantom", "path", str, ph.path)
        ph.pixel_pitch_m = _get(parser, "phantom", "pixel_pitch_m", float, ph.pixel_pitch_m)
        ph.transmission = _get(parser, "phantom", "transmission", float, ph.transmission)
        ph.fringe_shift_rad = _get(parser, "phantom", "fringe_shift_rad", float,
                                   ph.fringe_shift_rad)
        ph.scatter = _get(parser, "phantom", "scatter", float, ph.scatter)
        ph.margin = _get(parser, "phantom", "margin", int, ph.margin)
        ph.radius_frac = _get(parser, "phantom", "radius_frac", float, ph.radius_frac)
    if parser.has_section("service"):
        sv = cfg.service
        sv.host = _get(parser, "service", "host", str, sv.host)
        sv.port = _get(parser, "service", "port", int, sv.port)
        sv.motor_base_port = _get(parser, "service", "motor_base_port", int, sv.motor_base_port)
        sv.data_dir = _get(parser, "service", "data_dir", str, sv.data_dir)
        sv.credentials = _get(parser, "service", "credentials", str, sv.credentials)
        sv.session_ttl_s = _get(parser, "service", "session_ttl_s", float, sv.session_ttl_s)
        sv.login_failure_limit = _get(parser, "service", "login_failure_limit", int,
                                      sv.login_failure_limit)
        sv.login_cooldown_s = _get(parser, "service", "login_cooldown_s", float,
                                   sv.login_cooldown_s)
        sv.stream_buffer = _get(parser, "service", "stream_buffer", int, sv.stream_buffer)
        sv.scan_pacing_s = _get(parser, "service", "scan_pacing_s", float, sv.scan_pacing_s)
        sv.preview_interval_s = _get(parser, "service", "preview_interval_s", float,
                                     sv.preview_interval_s)
        sv.live_fps = _get(parser, "service", "live_fps", float, sv.live_fps)
    if parser.has_section("stages"):
        cfg.stages = _parse_stages(parser)


def _parse_stages(parser: configparser.ConfigParser) -> list[StageInfo]:
    stages = []
    for key in parser.options("stages"):
        try:
            device_str, axis = key.split(".")
            device = int(device_str)
            axis = axis.upper()
        except ValueError as exc:
            raise ConfigError(f"[stages] key {key!r} must look like '1.X'") from exc
        if axis not in ("X", "Y", "Z") or not (1 <= device <= 8):
            raise ConfigError(f"[stages] key {key!r}: device must be 1..8, axis X/Y/Z")
        parts = [p.strip() for p in parser.get("stages", key).split(",")]
        if len(parts) != 3:
            raise ConfigError(f"[stages] {key}: expected 'motor_type, steps_per_unit, unit'")
        motor_type, scale_str, unit = parts
        if motor_type not in MOTOR_TYPES:
            raise ConfigError(f"[stages] {key}: motor_type must be one of {MOTOR_TYPES}")
        try:
            scale = float(scale_str)
        except ValueError as exc:
            raise ConfigError(f"[stages] {key}: bad steps_per_unit {scale_str!r}") from exc
        stages.append(StageInfo(device, axis, motor_type, scale, unit))
    seen = set()
    for s in stages:
        if (s.device, s.axis) in seen:
            raise ConfigError(f"[stages] duplicate entry for device {s.device} axis {s.axis}")
        seen.add((s.device, s.axis))
    return stages


def _apply_env(cfg: SystemConfig) -> None:
    port = os.environ.get(ENV_PREFIX + "PORT")
    if port:
        cfg.service.port = int(port)
    motor_port = os.environ.get(ENV_PREFIX + "MOTOR_BASE_PORT")
    if motor_port:
        cfg.service.motor_base_port = int(motor_port)
    data_dir = os.environ.get(ENV_PREFIX + "DATA_DIR")
    if data_dir:
        cfg.service.data_dir = data_dir
