"""Acquisition engine: averaging, offset/gain correction and the two
phase-stepping scan modes.

Mode A runs one arm per pass: the reference pass steps the piezo
monotonically through one fringe period, the piezo returns below the scan
start, then the sample pass repeats the staircase. The return reverses the
stage, so the whole second pass rides on the piezo's return error - fast,
and fine for samples that cannot be fixed, but it biases the phase
difference between the arms.

Mode B acquires both arms at every piezo position (the sample stage
shuttles the sample out and in) before stepping, so the piezo never
reverses inside the scan and the return error never enters.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .beamline import Beamline, Frame
from .dataset import ARM_REFERENCE, ARM_SAMPLE, DatasetFrame, DatasetWriter, SteppingDataset
from .errors import RetrievalInputError, ScanError

Observer = Callable[[dict], None]


@dataclass(frozen=True, slots=True)
class Roi:
    """Rectangle in pixel coordinates: origin (x, y), size (w, h)."""

    x: int
    y: int
    w: int
    h: int

    def validate(self, frame_shape: tuple[int, int]) -> "Roi":
        h, w = frame_shape
        if self.w < 1 or self.h < 1:
            raise RetrievalInputError(f"roi must be non-empty, got {self}")
        if self.x < 0 or self.y < 0 or self.x + self.w > w or self.y + self.h > h:
            raise RetrievalInputError(f"roi {self} exceeds frame {w}x{h}")
        return self

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    @classmethod
    def full(cls, frame_shape: tuple[int, int]) -> "Roi":
        return cls(0, 0, frame_shape[1], frame_shape[0])


@dataclass(slots=True)
class ScanConfig:
    mode: str = "B"                      # 'A' or 'B'
    steps: int = 50
    step_size_um: Optional[float] = None  # default: one period / steps
    exposure_s: float = 0.1
    frames_to_average: int = 30
    roi: Optional[Roi] = None
    seed: int = 0
    arms: str = "both"                   # both | reference | sample
    scan_start_um: float = 0.0

    def resolved(self, p2_equiv_um: float) -> "ScanConfig":
        """Validate and fill defaults against the beamline fringe period."""
        mode = self.mode.upper()
        if mode not in ("A", "B"):
            raise ScanError(f"mode must be 'A' or 'B', got {self.mode!r}")
        if self.steps < 3:
            raise ScanError(f"steps must be >= 3, got {self.steps}")
        if self.frames_to_average < 1:
            raise ScanError(f"frames_to_average must be >= 1, got {self.frames_to_average}")
        if self.exposure_s <= 0:
            raise ScanError("exposure_s must be positive")
        if self.arms not in ("both", "reference", "sample"):
            raise ScanError(f"arms must be both/reference/sample, got {self.arms!r}")
        step = self.step_size_um
        if step is None:
            step = p2_equiv_um / self.steps
        elif abs(self.steps * step - p2_equiv_um) > 1e-9 * p2_equiv_um:
            raise ScanError(
                f"steps*step_size = {self.steps * step} um must span one fringe "
                f"period ({p2_equiv_um} um)"
            )
        return replace(self, mode=mode, step_size_um=step)


@dataclass(slots=True)
class CorrectionMaps:
    """Per-pixel dark offset and flat-field maps."""

    offset: np.ndarray
    gain_flat: np.ndarray
    valid: bool = True
    defect_mask: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.gain_flat = np.asarray(self.gain_flat, dtype=np.float64)
        if self.offset.shape != self.gain_flat.shape:
            raise RetrievalInputError(
                f"offset {self.offset.shape} and gain_flat {self.gain_flat.shape} disagree"
            )
        self.defect_mask = (self.gain_flat - self.offset) <= 0


def correct(frame: Frame | np.ndarray, maps: CorrectionMaps) -> np.ndarray:
    """Offset/gain-correct a frame: subtract dark, even out the gain.

    out = (pixels - offset) / (gain_flat - offset) * mean(gain_flat - offset)
    over well-behaved pixels; pixels where the flat does not exceed the
    dark are defective and are replaced by the mean of their valid
    4-neighbors.
    """
    if not maps.valid:
        raise RetrievalInputError("correction maps are not valid")
    pixels = np.asarray(frame.pixels if isinstance(frame, Frame) else frame, dtype=np.float64)
    if pixels.shape != maps.offset.shape:
        raise RetrievalInputError(
            f"frame shape {pixels.shape} != correction maps {maps.offset.shape}"
        )
    denom = maps.gain_flat - maps.offset
    bad = maps.defect_mask
    good = ~bad
    scale = float(denom[good].mean()) if good.any() else 1.0
    out = np.empty_like(pixels)
    np.divide((pixels - maps.offset) * scale, denom, out=out, where=good)
    if bad.any():
        out[bad] = 0.0
        neighbor_sum = np.zeros_like(out)
        neighbor_cnt = np.zeros_like(out)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            shifted = np.roll(np.where(good, out, 0.0), (dy, dx), axis=(0, 1))
            weight = np.roll(good.astype(np.float64), (dy, dx), axis=(0, 1))
            # np.roll wraps; zero the wrapped edge
            if dy == 1:
                shifted[0, :] = 0.0
                weight[0, :] = 0.0
            elif dy == -1:
                shifted[-1, :] = 0.0
                weight[-1, :] = 0.0
            if dx == 1:
                shifted[:, 0] = 0.0
                weight[:, 0] = 0.0
            elif dx == -1:
                shifted[:, -1] = 0.0
                weight[:, -1] = 0.0
            neighbor_sum += shifted
            neighbor_cnt += weight
        fill = np.divide(neighbor_sum, neighbor_cnt, out=np.zeros_like(out),
                         where=neighbor_cnt > 0)
        out = np.where(bad, fill, out)
    return out


@dataclass(slots=True)
class CurvePoint:
    arm: str
    step: int
    piezo_um: float
    mean: float


class AcquisitionEngine:
    """Drives the beamline through captures and scans.

    One scan at a time; the control service holds the scan mutex. The
    engine derives every render seed from the configured scan seed and a
    running frame counter, so identical (state, seed) runs are
    bit-identical.
    """

    def __init__(self, beamline: Beamline, maps: Optional[CorrectionMaps] = None) -> None:
        self.beamline = beamline
        self.maps = maps
        self._seed_counter = 0

    # -- frame capture ------------------------------------------------------------

    def _next_seed(self, base_seed: int) -> tuple[int, int]:
        seed = (base_seed, self._seed_counter)
        self._seed_counter += 1
        return seed

    def _render(self, base_seed: int) -> Frame:
        return self.beamline.render_frame(self._next_seed(base_seed))

    def _acquire_mean(self, n: int, base_seed: int) -> tuple[np.ndarray, Frame]:
        """Float mean of n renders plus the first frame's metadata."""
        first = self._render(base_seed)
        acc = np.asarray(first.pixels, dtype=np.float64).copy()
        for _ in range(n - 1):
            acc += np.asarray(self._render(base_seed).pixels, dtype=np.float64)
        acc /= n
        return acc, first

    def acquire_averaged(self, n: int, exposure_s: Optional[float] = None,
                         seed: int = 0) -> Frame:
        """Average n exposures pixel-wise; integer frame when quantizing."""
        if n < 1:
            raise ScanError(f"frame count must be >= 1, got {n}")
        det = self.beamline.detector
        old_exposure = det.exposure_time_s
        if exposure_s is not None:
            det.exposure_time_s = exposure_s
        try:
            mean, first = self._acquire_mean(n, seed)
        finally:
            det.exposure_time_s = old_exposure
        if det.quantize:
            pixels = np.clip(np.rint(mean), 0, det.full_well).astype(np.uint16)
        else:
            pixels = mean
        return Frame(
            pixels=pixels,
            timestamp_s=first.timestamp_s,
            piezo_um=first.piezo_um,
            tube_kv=first.tube_kv,
            tube_ma=first.tube_ma,
            exposure_s=first.exposure_s,
            averaged_count=n,
        )

    # -- correction maps ----------------------------------------------------------

    def measure_offset(self, n: int = 16, seed: int = 101) -> np.ndarray:
        """Mean dark frame: tube forced off for the measurement."""
        tube = self.beamline.tube
        was_on = tube.on
        tube.on = False
        try:
            mean, _ = self._acquire_mean(n, seed)
        finally:
            tube.on = was_on
        return mean

    def measure_flat(self, steps: int = 8, avg: int = 4, seed: int = 202) -> np.ndarray:
        """Sample-free flat field, averaged over one full stepping period.

        Averaging the piezo over one period cancels the fringe modulation,
        leaving dark + gain * uniform illumination.
        """
        bl = self.beamline
        if not bl.tube.on:
            raise ScanError("tube must be on to measure a flat field")
        was_in = bl.sample_in_beam
        bl.remove_sample()
        period = bl.fringe.p2_equiv_um
        start = bl.piezo.commanded_um
        acc = None
        try:
            for k in range(steps):
                bl.move_piezo(start + k * period / steps)
                mean, _ = self._acquire_mean(avg, seed)
                acc = mean if acc is None else acc + mean
            bl.move_piezo(start)
        finally:
            if was_in:
                bl.insert_sample()
        return acc / steps

    def measure_correction_maps(self, dark_frames: int = 16, flat_steps: int = 8,
                                flat_avg: int = 4, seed: int = 303) -> CorrectionMaps:
        offset = self.measure_offset(dark_frames, seed)
        flat = self.measure_flat(flat_steps, flat_avg, seed + 1)
        self.maps = CorrectionMaps(offset=offset, gain_flat=flat)
        return self.maps

    # -- scanning -------------------------------------------------------------

    def run_scan(self, config: ScanConfig, out_dir=None, observer: Optional[Observer] = None,
                 abort_event: Optional[threading.Event] = None) -> SteppingDataset:
        """Execute one phase-stepping scan and return the dataset.

        The dataset (and the directory, when ``out_dir`` is given) grows
        frame by frame; an abort finalizes it with ``incomplete=True`` and
        exactly the frames acquired so far. Correction maps, when present,
        are applied to the unrounded float mean of each step and the
        corrected frames are stored as float32.
        """
        bl = self.beamline
        config = config.resolved(bl.fringe.p2_equiv_um)
        if not bl.tube.on:
            raise ScanError("tube must be on to scan")
        if config.arms != "both" and config.mode == "B":
            raise ScanError("mode B is inherently paired; use mode A for a single arm")
        if config.arms in ("sample", "both") and bl.sample is None:
            raise ScanError("no phantom loaded for a sample arm")

        det = bl.detector
        corrected = self.maps is not None
        pixel_format = "f32" if corrected or not det.quantize else "u16"
        h, w = det.frame_shape
        ds = SteppingDataset(
            width=w, height=h, steps=config.steps, mode=config.mode,
            pixel_format=pixel_format, geometry=bl.geometry,
            p2_equiv_um=bl.fringe.p2_equiv_um, step_size_um=config.step_size_um,
            exposure_s=config.exposure_s, frames_averaged=config.frames_to_average,
            seed=config.seed,
        )
        writer = DatasetWriter(out_dir, ds) if out_dir is not None else None
        roi = config.roi.validate(det.frame_shape) if config.roi else Roi.full(det.frame_shape)

        old_exposure = det.exposure_time_s
        det.exposure_time_s = config.exposure_s
        bl.home_piezo(config.scan_start_um)
        positions = [config.scan_start_um + k * config.step_size_um for k in range(config.steps)]
        aborted = False
        emit = observer or (lambda event: None)
        emit({"type": "started", "mode": config.mode, "steps": config.steps,
              "arms": config.arms})

        def capture(arm: str, step: int) -> bool:
            if abort_event is not None and abort_event.is_set():
                return False
            mean, first = self._acquire_mean(config.frames_to_average, config.seed)
            if corrected:
                stored = correct(mean, self.maps).astype(np.float32)
            elif det.quantize:
                stored = np.clip(np.rint(mean), 0, det.full_well).astype(np.uint16)
            else:
                stored = mean.astype(np.float32)
            frame = Frame(
                pixels=stored, timestamp_s=first.timestamp_s, piezo_um=first.piezo_um,
                tube_kv=first.tube_kv, tube_ma=first.tube_ma, exposure_s=first.exposure_s,
                averaged_count=config.frames_to_average,
            )
            mean_value = float(np.asarray(stored, dtype=np.float64).mean())
            if writer is not None:
                writer.add_frame(arm, step, frame, mean_value)
            else:
                ds.entries.append(DatasetFrame(arm=arm, step=step, frame=frame,
                                               mean=mean_value))
            sl = roi.slices()
            roi_mean = float(np.asarray(stored[sl], dtype=np.float64).mean())
            emit({"type": "point", "arm": arm, "step": step,
                  "piezo_um": frame.piezo_um, "mean": roi_mean})
            emit({"type": "frame", "arm": arm, "step": step, "frame": frame})
            return True

        def step_to(target_um: float) -> None:
            bl.move_piezo(target_um)
            ds.motion_log.append(target_um)

        def set_arm(arm: str) -> None:
            if arm == ARM_SAMPLE:
                bl.insert_sample()
            else:
                bl.remove_sample()

        try:
            if config.mode == "A":
                passes = ([ARM_REFERENCE, ARM_SAMPLE] if config.arms == "both"
                          else [ARM_REFERENCE if config.arms == "reference" else ARM_SAMPLE])
                for pass_index, arm in enumerate(passes):
                    set_arm(arm)
                    emit({"type": "arm", "arm": arm})
                    if pass_index > 0:
                        # Return below the start so every stepping move of this
                        # pass travels forward after one reversal.
                        lead_in = config.scan_start_um - config.step_size_um
                        if lead_in < bl.piezo.travel_min_um:
                            raise ScanError(
                                "piezo travel does not allow the mode-A return lead-in; "
                                "raise scan_start_um or extend travel"
                            )
                        step_to(lead_in)
                    for k, x in enumerate(positions):
                        step_to(x)
                        if not capture(arm, k):
                            aborted = True
                            break
                    if aborted:
                        break
            else:  # mode B
                set_arm(ARM_REFERENCE)
                for k, x in enumerate(positions):
                    step_to(x)
                    set_arm(ARM_REFERENCE)
                    if not capture(ARM_REFERENCE, k):
                        aborted = True
                        break
                    set_arm(ARM_SAMPLE)
                    if not capture(ARM_SAMPLE, k):
                        aborted = True
                        break
                set_arm(ARM_REFERENCE)
        finally:
            det.exposure_time_s = old_exposure
            if writer is not None:
                writer.finalize(incomplete=aborted)
            else:
                ds.incomplete = aborted
        emit({"type": "aborted" if aborted else "completed", "frames": len(ds.entries)})
        return ds


def shift_curve(ds: SteppingDataset, roi: Optional[Roi] = None) -> list[CurvePoint]:
    """Mean intensity over the ROI per acquired frame, in acquisition order."""
    if not ds.entries:
        raise RetrievalInputError("dataset has no frames")
    shape = (ds.height, ds.width)
    roi = roi.validate(shape) if roi is not None else Roi.full(shape)
    sl = roi.slices()
    return [
        CurvePoint(
            arm=e.arm, step=e.step, piezo_um=e.frame.piezo_um,
            mean=float(np.asarray(e.frame.pixels[sl], dtype=np.float64).mean()),
        )
        for e in ds.entries
    ]
