"""Virtual beamline: tube, piezo stage, detector and fringe forward model.

The simulation owner is :class:`Beamline`. It advances the clock, mutates
device state, and renders detector frames from a phantom through the
stepping-curve forward model

    I(x, y; s) = F(t) * T * I0 * exp * [1 + V0 * sigma * cos(2*pi*s/p + phi_ref + dphi)]

where ``s`` is the piezo position, ``p`` the piezo travel per fringe
period, ``phi_ref`` a fixed per-pixel reference phase (a slight Moire
ramp), and ``dphi`` the sample-induced fringe phase from the refraction
model. Fringe formation is phenomenological: a pure first harmonic, so
Fourier retrieval of the synthetic data is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import (
    DetectorConfigError,
    InvalidGeometryError,
    PhantomError,
    PiezoRangeError,
    TubeLimitError,
)
from .geometry import BeamlineGeometry, PhaseField, fringe_phase_shift, refraction_angle, validate_geometry


@dataclass(slots=True)
class TubeLimits:
    """Configurable safety bounds for the X-ray tube."""

    kv_min: float = 20.0
    kv_max: float = 60.0
    ma_min: float = 0.0
    ma_max: float = 30.0


@dataclass(slots=True)
class TubeState:
    on: bool = False
    voltage_kv: float = 45.0
    current_ma: float = 22.5
    drift_amplitude: float = 0.0   # fractional flux modulation, in [0, 1)
    drift_period_s: float = 30.0
    clock_s: float = 0.0

    def flux_factor(self, at: Optional[float] = None) -> float:
        """Slow sinusoidal instability of the source around 1.0."""
        if self.drift_amplitude == 0.0:
            return 1.0
        t = self.clock_s if at is None else at
        return 1.0 + self.drift_amplitude * math.sin(2.0 * math.pi * t / self.drift_period_s)


@dataclass(slots=True)
class PiezoStage:
    """Ultra-precision translation stage with encoder and return error.

    Kinematics are idealized except for a systematic return error: a
    direction reversal offsets the physical position by ``return_error_um``
    *against* the new travel direction, and the offset persists until the
    hysteresis state is cleared by :meth:`home`. Monotone move sequences
    are exact.
    """

    commanded_um: float = 0.0
    encoder_um: float = 0.0
    travel_min_um: float = -5.0
    travel_max_um: float = 105.0
    return_error_um: float = 0.0
    resolution_um: float = 0.0
    _offset_um: float = 0.0
    _last_direction: int = 0

    def move(self, target_um: float) -> "PiezoStage":
        if not (self.travel_min_um <= target_um <= self.travel_max_um):
            raise PiezoRangeError(
                f"target {target_um} um outside travel "
                f"[{self.travel_min_um}, {self.travel_max_um}] um"
            )
        direction = 0
        if target_um > self.commanded_um:
            direction = 1
        elif target_um < self.commanded_um:
            direction = -1
        if direction != 0:
            if self._last_direction != 0 and direction != self._last_direction:
                self._offset_um = -self.return_error_um
            self._last_direction = direction
        self.commanded_um = target_um
        raw = target_um + self._offset_um
        if self.resolution_um > 0.0:
            raw = round(raw / self.resolution_um) * self.resolution_um
        # hard stops: the physical position cannot leave the travel range
        self.encoder_um = min(max(raw, self.travel_min_um), self.travel_max_um)
        return self

    def home(self, target_um: float = 0.0) -> "PiezoStage":
        """Move to ``target_um`` and re-reference: clears hysteresis state."""
        self.move(target_um)
        self._offset_um = 0.0
        self._last_direction = 0
        self.encoder_um = self.commanded_um
        return self


@dataclass(slots=True)
class DefectPixel:
    x: int
    y: int
    kind: str = "dead"  # dead -> 0, hot -> full_well


@dataclass(slots=True)
class DetectorConfig:
    width: int = 512
    height: int = 512
    exposure_time_s: float = 0.1
    binning: int = 1
    dark_mean: float = 100.0
    dark_sigma: float = 5.0
    gain_map: Optional[np.ndarray] = None   # per-pixel multiplicative, ~1.0
    full_well: int = 65535
    defects: Sequence[DefectPixel] = ()
    shot_noise: bool = True
    quantize: bool = True  # False = ideal float readout (no 16-bit rounding)

    def __post_init__(self) -> None:
        if self.binning not in (1, 2):
            raise DetectorConfigError(f"binning must be 1 or 2, got {self.binning}")
        if self.width <= 0 or self.height <= 0:
            raise DetectorConfigError("detector dimensions must be positive")
        if self.width % self.binning or self.height % self.binning:
            raise DetectorConfigError(
                f"dimensions {self.width}x{self.height} not divisible by binning {self.binning}"
            )
        if self.dark_mean < 0:
            raise DetectorConfigError("dark_mean must be >= 0")
        if self.gain_map is not None:
            self.gain_map = np.asarray(self.gain_map, dtype=np.float64)
            if self.gain_map.shape != self.frame_shape:
                raise DetectorConfigError(
                    f"gain_map shape {self.gain_map.shape} != frame shape {self.frame_shape}"
                )
            if not np.all(self.gain_map > 0):
                raise DetectorConfigError("gain_map values must be > 0")

    @property
    def frame_shape(self) -> tuple[int, int]:
        return (self.height // self.binning, self.width // self.binning)


@dataclass(slots=True)
class SampleModel:
    """Phantom: transmission, wavefront phase and scatter grids."""

    transmission: np.ndarray       # T in (0, 1]
    phase: PhaseField              # wavefront phase shift, rad
    scatter: np.ndarray            # visibility-reduction factor in [0, 1]
    in_beam: bool = False

    def __post_init__(self) -> None:
        self.transmission = np.asarray(self.transmission, dtype=np.float64)
        self.scatter = np.asarray(self.scatter, dtype=np.float64)
        shape = self.transmission.shape
        if self.scatter.shape != shape or self.phase.values.shape != shape:
            raise PhantomError(
                f"phantom grids disagree: T{shape} phase{self.phase.values.shape} "
                f"scatter{self.scatter.shape}"
            )
        if not np.all((self.transmission > 0) & (self.transmission <= 1.0)):
            raise PhantomError("transmission must lie in (0, 1]")
        if not np.all((self.scatter >= 0) & (self.scatter <= 1.0)):
            raise PhantomError("scatter must lie in [0, 1]")


@dataclass(slots=True)
class FringeModel:
    """Phenomenological fringe parameters of the empty interferometer."""

    reference_visibility: float = 0.2   # V0 of the sample-free stepping curve
    p2_equiv_um: float = 2.4            # piezo travel per fringe period, um
    # Residual Moire: reference phase ramps this many full turns across the
    # frame width. An integer turn count makes full-width row averages of the
    # modulation vanish exactly, which the drift calibration margin relies on.
    reference_phase_turns: float = 2.0
    flux_per_ma_s: float = 8000.0       # mean counts per pixel per mA per second


@dataclass(slots=True)
class Frame:
    """One detector image plus acquisition metadata."""

    pixels: np.ndarray
    timestamp_s: float
    piezo_um: float
    tube_kv: float
    tube_ma: float
    exposure_s: float
    averaged_count: int = 1

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


class Beamline:
    """Single owner of the simulated instruments.

    Mutating calls (tube, piezo, sample, rendering) must come from one
    thread at a time; the control service serializes them. Reading the
    expected-intensity forward model is pure.
    """

    def __init__(
        self,
        geometry: BeamlineGeometry,
        detector: Optional[DetectorConfig] = None,
        tube: Optional[TubeState] = None,
        tube_limits: Optional[TubeLimits] = None,
        piezo: Optional[PiezoStage] = None,
        fringe: Optional[FringeModel] = None,
        sample: Optional[SampleModel] = None,
    ) -> None:
        check = validate_geometry(geometry)
        if not check.ok:
            raise InvalidGeometryError(
                f"geometry violates the matching condition (rel error {check.rel_error:.3e})"
            )
        self.geometry = geometry
        self.detector = detector or DetectorConfig()
        self.tube = tube or TubeState()
        self.tube_limits = tube_limits or TubeLimits()
        self.piezo = piezo or PiezoStage()
        self.fringe = fringe or FringeModel()
        if not (0.0 <= self.tube.drift_amplitude < 1.0):
            raise TubeLimitError("drift_amplitude must lie in [0, 1) to keep flux positive")
        if not (0.0 < self.fringe.reference_visibility <= 1.0):
            raise DetectorConfigError("reference_visibility must lie in (0, 1]")
        self._sample: Optional[SampleModel] = None
        self._dphi_map: Optional[np.ndarray] = None
        self._phi_ref = self._build_reference_phase()
        if sample is not None:
            self.load_sample(sample)

    # -- reference fringe pattern -------------------------------------------------

    def _build_reference_phase(self) -> np.ndarray:
        h, w = self.detector.frame_shape
        ramp = 2.0 * math.pi * self.fringe.reference_phase_turns * np.arange(w) / w
        return np.broadcast_to(ramp, (h, w)).copy()

    @property
    def reference_phase(self) -> np.ndarray:
        return self._phi_ref

    # -- sample handling ----------------------------------------------------------

    def load_sample(self, sample: SampleModel) -> None:
        if sample.transmission.shape != self.detector.frame_shape:
            raise PhantomError(
                f"phantom shape {sample.transmission.shape} != frame shape "
                f"{self.detector.frame_shape}"
            )
        self._sample = sample
        grad = sample.phase.gradient_x()
        scale = fringe_phase_shift(
            refraction_angle(1.0, self.geometry.wavelength), self.geometry.d, self.geometry.p2
        )
        self._dphi_map = scale * grad

    @property
    def sample(self) -> Optional[SampleModel]:
        return self._sample

    def insert_sample(self) -> None:
        if self._sample is None:
            raise PhantomError("no phantom loaded")
        self._sample.in_beam = True

    def remove_sample(self) -> None:
        if self._sample is not None:
            self._sample.in_beam = False

    @property
    def sample_in_beam(self) -> bool:
        return self._sample is not None and self._sample.in_beam

    def fringe_shift_map(self) -> Optional[np.ndarray]:
        """Sample-induced stepping-phase map dphi (rad), None if no phantom."""
        return self._dphi_map

    # -- devices ------------------------------------------------------------------

    def set_tube(self, on: bool, voltage_kv: Optional[float] = None,
                 current_ma: Optional[float] = None) -> TubeState:
        kv = self.tube.voltage_kv if voltage_kv is None else float(voltage_kv)
        ma = self.tube.current_ma if current_ma is None else float(current_ma)
        if on:
            lim = self.tube_limits
            if not (lim.kv_min <= kv <= lim.kv_max):
                raise TubeLimitError(
                    f"voltage {kv} kV outside [{lim.kv_min}, {lim.kv_max}] kV (bound: voltage)"
                )
            if not (lim.ma_min <= ma <= lim.ma_max):
                raise TubeLimitError(
                    f"current {ma} mA outside [{lim.ma_min}, {lim.ma_max}] mA (bound: current)"
                )
        self.tube.on = bool(on)
        self.tube.voltage_kv = kv
        self.tube.current_ma = ma
        return self.tube

    def move_piezo(self, target_um: float) -> PiezoStage:
        return self.piezo.move(target_um)

    def home_piezo(self, target_um: float = 0.0) -> PiezoStage:
        return self.piezo.home(target_um)

    def advance_clock(self, dt_s: float) -> None:
        self.tube.clock_s += dt_s

    # -- forward model ------------------------------------------------------------

    def expected_intensity(self, piezo_um: Optional[float] = None,
                           clock_s: Optional[float] = None) -> np.ndarray:
        """Noise-free expected counts map for the current state.

        Pure with respect to the passed piezo position and clock; defaults
        read the live device state.
        """
        h, w = self.detector.frame_shape
        if not self.tube.on:
            return np.zeros((h, w), dtype=np.float64)
        x = self.piezo.encoder_um if piezo_um is None else piezo_um
        base = (
            self.fringe.flux_per_ma_s
            * self.tube.current_ma
            * self.detector.exposure_time_s
            * self.tube.flux_factor(clock_s)
        )
        theta = 2.0 * math.pi * x / self.fringe.p2_equiv_um
        v0 = self.fringe.reference_visibility
        if self.sample_in_beam:
            amp = base * self._sample.transmission
            vis = v0 * self._sample.scatter
            phase = self._phi_ref + self._dphi_map
        else:
            amp = np.full((h, w), base, dtype=np.float64)
            vis = np.full((h, w), v0, dtype=np.float64)
            phase = self._phi_ref
        return _kernels.stepping_frame(amp, vis, phase, theta)

    def forward_intensity(self, ix: int, iy: int, piezo_um: float,
                          clock_s: Optional[float] = None) -> float:
        """Per-pixel expected counts; same model as :meth:`expected_intensity`."""
        if not self.tube.on:
            return 0.0
        base = (
            self.fringe.flux_per_ma_s
            * self.tube.current_ma
            * self.detector.exposure_time_s
            * self.tube.flux_factor(clock_s)
        )
        theta = 2.0 * math.pi * piezo_um / self.fringe.p2_equiv_um
        if self.sample_in_beam:
            amp = base * self._sample.transmission[iy, ix]
            vis = self.fringe.reference_visibility * self._sample.scatter[iy, ix]
            phase = self._phi_ref[iy, ix] + self._dphi_map[iy, ix]
        else:
            amp = base
            vis = self.fringe.reference_visibility
            phase = self._phi_ref[iy, ix]
        return amp * (1.0 + vis * math.cos(theta + phase))

    def render_frame(self, seed) -> Frame:
        """Expose for one exposure time and return the detector frame.

        Deterministic for a given seed (int or tuple). Advances the tube
        clock by the exposure time.
        """
        det = self.detector
        expected = self.expected_intensity()
        gain = det.gain_map if det.gain_map is not None else None
        lam = expected if gain is None else expected * gain
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        if det.shot_noise:
            counts = rng.poisson(lam).astype(np.float64)
        else:
            counts = lam.copy()
        if det.dark_sigma > 0:
            counts += rng.normal(det.dark_mean, det.dark_sigma, det.frame_shape)
        else:
            counts += det.dark_mean
        if det.quantize:
            pixels = np.clip(np.rint(counts), 0, det.full_well).astype(np.uint16)
        else:
            pixels = np.clip(counts, 0, det.full_well)
        for defect in det.defects:
            pixels[defect.y, defect.x] = det.full_well if defect.kind == "hot" else 0
        frame = Frame(
            pixels=pixels,
            timestamp_s=self.tube.clock_s,
            piezo_um=self.piezo.encoder_um,
            tube_kv=self.tube.voltage_kv,
            tube_ma=self.tube.current_ma,
            exposure_s=det.exposure_time_s,
            averaged_count=1,
        )
        self.advance_clock(det.exposure_time_s)
        return frame

    def snapshot(self) -> dict:
        """Lightweight state dump for status endpoints."""
        return {
            "tube": {
                "on": self.tube.on,
                "kv": self.tube.voltage_kv,
                "ma": self.tube.current_ma,
                "clock_s": self.tube.clock_s,
                "drift_amplitude": self.tube.drift_amplitude,
            },
            "piezo": {
                "commanded_um": self.piezo.commanded_um,
                "encoder_um": self.piezo.encoder_um,
                "travel_um": [self.piezo.travel_min_um, self.piezo.travel_max_um],
            },
            "detector": {
                "width": self.detector.width,
                "height": self.detector.height,
                "binning": self.detector.binning,
                "exposure_s": self.detector.exposure_time_s,
            },
            "sample_in_beam": self.sample_in_beam,
        }
