"""On-disk dataset format: one directory per dataset.

``manifest`` is a UTF-8 text file of ``key: value`` lines plus one
``frame:`` record per stored frame (filename, arm, step, piezo position,
metadata, mean and CRC32). Every frame lives in its own raw file:
little-endian row-major pixels with no header, ``u16`` for detector
counts or ``f32`` for corrected frames and phantom grids. Floats are
serialized with ``repr`` so a save/load round-trip is bit-exact.

The same layout stores phantoms (``kind: phantom``, three f32 grids) and
retrieval results (``kind: retrieval``, one f32 grid per channel).
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np

from .beamline import Frame, SampleModel
from .errors import (
    ChecksumError,
    DatasetConsistencyError,
    FrameTruncatedError,
    ManifestError,
)
from .geometry import BeamlineGeometry, PhaseField

MAGIC = "gratingscope-dataset"
FORMAT_VERSION = "1"

ARM_REFERENCE = "reference"
ARM_SAMPLE = "sample"

_DTYPES = {"u16": np.dtype("<u2"), "f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _crc(data: bytes) -> str:
    return f"{zlib.crc32(data) & 0xFFFFFFFF:08x}"


@dataclass(slots=True)
class DatasetFrame:
    arm: str
    step: int
    frame: Frame
    mean: float


@dataclass(slots=True)
class SteppingDataset:
    """Ordered stack of frames indexed by arm and piezo step."""

    width: int
    height: int
    steps: int
    mode: str
    pixel_format: str
    entries: list[DatasetFrame] = dc_field(default_factory=list)
    geometry: Optional[BeamlineGeometry] = None
    p2_equiv_um: float = 2.4
    step_size_um: float = 0.0
    exposure_s: float = 0.1
    frames_averaged: int = 1
    seed: int = 0
    motion_log: list[float] = dc_field(default_factory=list)
    incomplete: bool = False
    calibration_level: Optional[float] = None

    @property
    def arms(self) -> set[str]:
        return {e.arm for e in self.entries}

    def has_arm(self, arm: str) -> bool:
        return any(e.arm == arm for e in self.entries)

    def arm_entries(self, arm: str) -> list[DatasetFrame]:
        return sorted((e for e in self.entries if e.arm == arm), key=lambda e: e.step)

    def arm_stack(self, arm: str) -> np.ndarray:
        """(N, H, W) float64 stack of one arm, ordered by step."""
        entries = self.arm_entries(arm)
        if not entries:
            raise DatasetConsistencyError(f"dataset has no {arm!r} arm")
        return np.stack([np.asarray(e.frame.pixels, dtype=np.float64) for e in entries])

    def frame_means(self) -> list[float]:
        return [e.mean for e in self.entries]

    def single_arm(self) -> str:
        arms = self.arms
        if len(arms) != 1:
            raise DatasetConsistencyError(f"expected a single-arm dataset, found arms {sorted(arms)}")
        return next(iter(arms))


def datasets_equal(a: SteppingDataset, b: SteppingDataset) -> bool:
    if (a.width, a.height, a.steps, a.mode, a.pixel_format, a.incomplete) != (
        b.width, b.height, b.steps, b.mode, b.pixel_format, b.incomplete
    ):
        return False
    if (a.p2_equiv_um, a.step_size_um, a.exposure_s, a.frames_averaged, a.seed) != (
        b.p2_equiv_um, b.step_size_um, b.exposure_s, b.frames_averaged, b.seed
    ):
        return False
    if a.motion_log != b.motion_log or len(a.entries) != len(b.entries):
        return False
    ga, gb = a.geometry, b.geometry
    if (ga is None) != (gb is None):
        return False
    if ga is not None and (ga.p0, ga.p1, ga.p2, ga.l, ga.d, ga.wavelength) != (
        gb.p0, gb.p1, gb.p2, gb.l, gb.d, gb.wavelength
    ):
        return False
    for ea, eb in zip(a.entries, b.entries):
        fa, fb = ea.frame, eb.frame
        if (ea.arm, ea.step, ea.mean) != (eb.arm, eb.step, eb.mean):
            return False
        if (fa.timestamp_s, fa.piezo_um, fa.tube_kv, fa.tube_ma, fa.exposure_s,
                fa.averaged_count) != (fb.timestamp_s, fb.piezo_um, fb.tube_kv,
                fb.tube_ma, fb.exposure_s, fb.averaged_count):
            return False
        if fa.pixels.dtype != fb.pixels.dtype or not np.array_equal(fa.pixels, fb.pixels):
            return False
    return True


# -- manifest serialization -----------------------------------------------------


def _geometry_line(g: BeamlineGeometry) -> str:
    return (
        f"p0={_fmt(g.p0)} p1={_fmt(g.p1)} p2={_fmt(g.p2)} "
        f"l={_fmt(g.l)} d={_fmt(g.d)} wavelength={_fmt(g.wavelength)}"
    )


def _parse_kv_tokens(text: str, context: str) -> dict[str, str]:
    out = {}
    for token in text.split():
        if "=" not in token:
            raise ManifestError(f"malformed token {token!r} in {context}")
        key, _, value = token.partition("=")
        out[key] = value
    return out


def _frame_filename(index: int, arm: str, step: int) -> str:
    return f"frame_{index:04d}_{arm}_{step:03d}.raw"


class DatasetWriter:
    """Streams a dataset to disk as the scan produces frames.

    Raw frame files are written immediately; the manifest is atomically
    rewritten after every frame so the directory is loadable at any time
    (with ``incomplete: true`` until :meth:`finalize`).
    """

    def __init__(self, path, dataset: SteppingDataset) -> None:
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.dataset = dataset
        self.dataset.incomplete = True
        self._write_manifest()

    def add_frame(self, arm: str, step: int, frame: Frame, mean: float) -> None:
        index = len(self.dataset.entries)
        name = _frame_filename(index, arm, step)
        data = _frame_bytes(frame.pixels, self.dataset.pixel_format)
        (self.path / name).write_bytes(data)
        self.dataset.entries.append(DatasetFrame(arm=arm, step=step, frame=frame, mean=mean))
        self._write_manifest()

    def finalize(self, incomplete: bool = False) -> SteppingDataset:
        self.dataset.incomplete = incomplete
        self._write_manifest()
        return self.dataset

    def _write_manifest(self) -> None:
        write_manifest(self.path, self.dataset)


def _frame_bytes(pixels: np.ndarray, pixel_format: str) -> bytes:
    dtype = _DTYPES[pixel_format]
    return np.ascontiguousarray(np.asarray(pixels).astype(dtype, copy=False)).tobytes()


def write_manifest(path: Path, ds: SteppingDataset) -> None:
    lines = [
        f"{MAGIC}: {FORMAT_VERSION}",
        "kind: stepping",
        f"width: {ds.width}",
        f"height: {ds.height}",
        f"steps: {ds.steps}",
        f"mode: {ds.mode}",
        f"pixel-format: {ds.pixel_format}",
        f"incomplete: {'true' if ds.incomplete else 'false'}",
        f"frames: {len(ds.entries)}",
        f"p2-equiv-um: {_fmt(ds.p2_equiv_um)}",
        f"step-size-um: {_fmt(ds.step_size_um)}",
        f"exposure-s: {_fmt(ds.exposure_s)}",
        f"frames-averaged: {ds.frames_averaged}",
        f"seed: {ds.seed}",
    ]
    if ds.geometry is not None:
        lines.append(f"geometry: {_geometry_line(ds.geometry)}")
    if ds.motion_log:
        lines.append("motion-log: " + ",".join(_fmt(x) for x in ds.motion_log))
    if ds.calibration_level is not None:
        lines.append(f"calibration-level: {_fmt(ds.calibration_level)}")
    for index, e in enumerate(ds.entries):
        f = e.frame
        name = _frame_filename(index, e.arm, e.step)
        data = _frame_bytes(f.pixels, ds.pixel_format)
        lines.append(
            "frame: "
            f"index={index} arm={e.arm} step={e.step} file={name} "
            f"piezo={_fmt(f.piezo_um)} t={_fmt(f.timestamp_s)} "
            f"kv={_fmt(f.tube_kv)} ma={_fmt(f.tube_ma)} "
            f"exposure={_fmt(f.exposure_s)} averaged={f.averaged_count} "
            f"mean={_fmt(e.mean)} crc32={_crc(data)}"
        )
    tmp = path / "manifest.tmp"
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path / "manifest")


def save_dataset(ds: SteppingDataset, path) -> Path:
    """Write the whole dataset (frames + manifest) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for index, e in enumerate(ds.entries):
        name = _frame_filename(index, e.arm, e.step)
        (path / name).write_bytes(_frame_bytes(e.frame.pixels, ds.pixel_format))
    write_manifest(path, ds)
    return path


def _parse_manifest_lines(path: Path) -> tuple[dict[str, str], list[dict[str, str]], list[dict[str, str]]]:
    manifest = path / "manifest"
    if not manifest.is_file():
        raise ManifestError(f"manifest not found: {manifest}")
    header: dict[str, str] = {}
    frames: list[dict[str, str]] = []
    grids: list[dict[str, str]] = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise ManifestError(f"{manifest}:{lineno}: expected 'key: value'")
        key, _, value = line.partition(":")
        key = key.strip()
        value = value.strip()
        if key == "frame":
            frames.append(_parse_kv_tokens(value, f"{manifest}:{lineno}"))
        elif key == "grid":
            grids.append(_parse_kv_tokens(value, f"{manifest}:{lineno}"))
        else:
            header[key] = value
    if header.get(MAGIC) != FORMAT_VERSION:
        raise ManifestError(f"{manifest}: missing or unsupported '{MAGIC}' version line")
    return header, frames, grids


def _read_grid_file(path: Path, name: str, shape: tuple[int, int], pixel_format: str,
                    crc: Optional[str]) -> np.ndarray:
    dtype = _DTYPES[pixel_format]
    fpath = path / name
    if not fpath.is_file():
        raise DatasetConsistencyError(f"raw file listed in manifest is missing: {name}")
    data = fpath.read_bytes()
    expected = shape[0] * shape[1] * dtype.itemsize
    if len(data) != expected:
        raise FrameTruncatedError(
            f"raw file {name} has {len(data)} bytes, expected {expected}"
        )
    if crc is not None and _crc(data) != crc:
        raise ChecksumError(f"CRC32 mismatch for {name}: manifest {crc}, file {_crc(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def _require(header: dict[str, str], key: str, path: Path) -> str:
    if key not in header:
        raise ManifestError(f"{path / 'manifest'}: missing required key {key!r}")
    return header[key]


def load_dataset(path) -> SteppingDataset:
    path = Path(path)
    header, frame_records, _ = _parse_manifest_lines(path)
    if header.get("kind", "stepping") != "stepping":
        raise ManifestError(f"{path}: expected a stepping dataset, got kind={header.get('kind')!r}")
    width = int(_require(header, "width", path))
    height = int(_require(header, "height", path))
    declared = int(_require(header, "frames", path))
    if declared != len(frame_records):
        raise DatasetConsistencyError(
            f"manifest declares {declared} frames but lists {len(frame_records)} records"
        )
    raw_files = {p.name for p in path.glob("*.raw")}
    listed = {rec["file"] for rec in frame_records}
    if raw_files != listed:
        raise DatasetConsistencyError(
            f"manifest frame count != files present: {len(listed)} listed, "
            f"{len(raw_files)} on disk"
        )
    pixel_format = _require(header, "pixel-format", path)
    if pixel_format not in ("u16", "f32"):
        raise ManifestError(f"unsupported pixel-format {pixel_format!r}")

    geometry = None
    if "geometry" in header:
        g = _parse_kv_tokens(header["geometry"], "geometry line")
        geometry = BeamlineGeometry(
            p0=float(g["p0"]), p1=float(g["p1"]), p2=float(g["p2"]),
            l=float(g["l"]), d=float(g["d"]), wavelength=float(g["wavelength"]),
        )
    motion_log = []
    if header.get("motion-log"):
        motion_log = [float(x) for x in header["motion-log"].split(",")]

    ds = SteppingDataset(
        width=width,
        height=height,
        steps=int(_require(header, "steps", path)),
        mode=header.get("mode", "A"),
        pixel_format=pixel_format,
        geometry=geometry,
        p2_equiv_um=float(header.get("p2-equiv-um", "2.4")),
        step_size_um=float(header.get("step-size-um", "0.0")),
        exposure_s=float(header.get("exposure-s", "0.1")),
        frames_averaged=int(header.get("frames-averaged", "1")),
        seed=int(header.get("seed", "0")),
        motion_log=motion_log,
        incomplete=header.get("incomplete", "false") == "true",
        calibration_level=(
            float(header["calibration-level"]) if "calibration-level" in header else None
        ),
    )
    for rec in sorted(frame_records, key=lambda r: int(r["index"])):
        try:
            pixels = _read_grid_file(path, rec["file"], (height, width), pixel_format,
                                     rec.get("crc32"))
            frame = Frame(
                pixels=pixels,
                timestamp_s=float(rec["t"]),
                piezo_um=float(rec["piezo"]),
                tube_kv=float(rec["kv"]),
                tube_ma=float(rec["ma"]),
                exposure_s=float(rec["exposure"]),
                averaged_count=int(rec["averaged"]),
            )
            ds.entries.append(DatasetFrame(arm=rec["arm"], step=int(rec["step"]),
                                           frame=frame, mean=float(rec["mean"])))
        except KeyError as exc:
            raise ManifestError(f"frame record missing field {exc}") from exc
    return ds


def dataset_summary(path) -> dict:
    """Manifest-only view of a dataset (no raw files read)."""
    path = Path(path)
    header, frame_records, _ = _parse_manifest_lines(path)
    arms = sorted({rec.get("arm", "?") for rec in frame_records})
    return {
        "name": path.name,
        "path": str(path),
        "kind": header.get("kind", "stepping"),
        "width": int(header.get("width", 0)),
        "height": int(header.get("height", 0)),
        "steps": int(header.get("steps", 0)),
        "mode": header.get("mode", "?"),
        "frames": len(frame_records),
        "arms": arms,
        "incomplete": header.get("incomplete", "false") == "true",
    }


# -- phantom files ----------------------------------------------------------------


def save_phantom(sample: SampleModel, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    h, w = sample.transmission.shape
    grids = {
        "transmission": sample.transmission,
        "phase": sample.phase.values,
        "scatter": sample.scatter,
    }
    lines = [
        f"{MAGIC}: {FORMAT_VERSION}",
        "kind: phantom",
        f"width: {w}",
        f"height: {h}",
        f"pixel-pitch-m: {_fmt(sample.phase.pixel_pitch)}",
    ]
    for name, grid in grids.items():
        fname = f"{name}.raw"
        data = _frame_bytes(grid, "f32")
        (path / fname).write_bytes(data)
        lines.append(f"grid: name={name} file={fname} crc32={_crc(data)}")
    (path / "manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_phantom(path) -> SampleModel:
    path = Path(path)
    header, _, grid_records = _parse_manifest_lines(path)
    if header.get("kind") != "phantom":
        raise ManifestError(f"{path}: expected kind=phantom, got {header.get('kind')!r}")
    w = int(_require(header, "width", path))
    h = int(_require(header, "height", path))
    pitch = float(_require(header, "pixel-pitch-m", path))
    grids = {}
    for rec in grid_records:
        grids[rec["name"]] = _read_grid_file(path, rec["file"], (h, w), "f32",
                                             rec.get("crc32")).astype(np.float64)
    for required in ("transmission", "phase", "scatter"):
        if required not in grids:
            raise ManifestError(f"{path}: phantom manifest lacks grid {required!r}")
    return SampleModel(
        transmission=grids["transmission"],
        phase=PhaseField(pitch, grids["phase"]),
        scatter=grids["scatter"],
    )


# -- retrieval result files --------------------------------------------------------


def save_result_maps(path, maps: dict[str, np.ndarray], diagnostics: dict[str, str]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    first = next(iter(maps.values()))
    h, w = first.shape
    lines = [
        f"{MAGIC}: {FORMAT_VERSION}",
        "kind: retrieval",
        f"width: {w}",
        f"height: {h}",
    ]
    for key, value in diagnostics.items():
        lines.append(f"diag-{key}: {value}")
    for name, grid in maps.items():
        fname = f"{name}.raw"
        data = _frame_bytes(grid, "f32")
        (path / fname).write_bytes(data)
        lines.append(f"grid: name={name} file={fname} crc32={_crc(data)}")
    (path / "manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_result_maps(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    header, _, grid_records = _parse_manifest_lines(path)
    if header.get("kind") != "retrieval":
        raise ManifestError(f"{path}: expected kind=retrieval, got {header.get('kind')!r}")
    w = int(_require(header, "width", path))
    h = int(_require(header, "height", path))
    maps = {}
    for rec in grid_records:
        maps[rec["name"]] = _read_grid_file(path, rec["file"], (h, w), "f32",
                                            rec.get("crc32")).astype(np.float64)
    diagnostics = {k[len("diag-"):]: v for k, v in header.items() if k.startswith("diag-")}
    return maps, diagnostics
