"""Fourier signal retrieval: transmission, differential phase, dark field.

Per pixel, the stepping curve over one fringe period is reduced to its DC
mean a0 and first-harmonic amplitude/phase (a1, phi). The three contrast
channels are the standard estimators

    transmission = a0_sample / a0_reference
    dpc          = wrap(phi_sample - phi_reference)        in (-pi, pi]
    darkfield    = (a1_s/a0_s) / (a1_r/a0_r)

Curve-level diagnostics (stepping period, start phase, fringe visibility)
come from a harmonic least-squares fit whose period is refined by
maximizing the captured first-harmonic energy (grid search then
golden-section). Flux drift is calibrated away by normalizing every frame
to the mean of its sample-free margin strips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels
from .acquisition import Roi
from .dataset import ARM_REFERENCE, ARM_SAMPLE, DatasetFrame, SteppingDataset
from .errors import (
    CalibrationConfigError,
    NoFringeError,
    RetrievalInputError,
)

DEFAULT_VISIBILITY_FLOOR = 1e-6
DEFAULT_COUNTS_FLOOR = 1.0

TWO_PI = 2.0 * math.pi


def wrap_phase(phi):
    """Wrap angle(s) to the half-open interval (-pi, pi]."""
    wrapped = np.mod(np.asarray(phi, dtype=np.float64) + math.pi, TWO_PI) - math.pi
    wrapped = np.where(wrapped == -math.pi, math.pi, wrapped)
    if np.ndim(phi) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True, slots=True)
class HarmonicComponents:
    a0: float
    a1: float
    phi: float
    degenerate: bool = False


def fourier_components(curve, visibility_floor: float = DEFAULT_VISIBILITY_FLOOR) -> HarmonicComponents:
    """Mean and first-harmonic amplitude/phase of one stepping curve.

    ``curve`` holds N >= 3 samples equally spaced over exactly one period.
    phi follows the convention that curve[k] = a0 + a1*cos(2*pi*k/N + phi).
    Curves whose relative modulation falls below ``visibility_floor`` are
    degenerate: phi is reported as 0 with the flag set.
    """
    y = np.asarray(curve, dtype=np.float64)
    if y.ndim != 1 or y.size < 3:
        raise RetrievalInputError(f"need >= 3 samples over one period, got shape {y.shape}")
    n = y.size
    a0 = float(y.mean())
    k = np.arange(n)
    c1 = (2.0 / n) * np.sum(y * np.exp(-2j * math.pi * k / n))
    a1 = float(abs(c1))
    if a0 <= 0.0 or a1 < visibility_floor * abs(a0):
        return HarmonicComponents(a0=a0, a1=a1, phi=0.0, degenerate=True)
    return HarmonicComponents(a0=a0, a1=a1, phi=wrap_phase(float(np.angle(c1))), degenerate=False)


@dataclass(frozen=True, slots=True)
class CurveStats:
    """Fitted stepping-curve diagnostics for one arm over an ROI."""

    a0: float
    a1: float
    phi: float
    visibility: float
    period_steps: float
    start_phase: float


def _harmonic_energy(y: np.ndarray, period: float) -> float:
    """First-harmonic energy captured by a least-squares fit at ``period``."""
    k = np.arange(y.size)
    design = np.column_stack(
        [np.ones_like(k, dtype=np.float64),
         np.cos(TWO_PI * k / period),
         np.sin(TWO_PI * k / period)]
    )
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = y - design @ coef
    return float(y @ y - residual @ residual)


def _golden_max(fn, lo: float, hi: float, iterations: int = 60) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iterations):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return (a + b) / 2.0


def fit_stepping_curve(curve, visibility_floor: float = DEFAULT_VISIBILITY_FLOOR) -> CurveStats:
    """Fit period, start phase and visibility of an ROI-mean stepping curve.

    The period is scanned over [0.9 N, 1.1 N] and refined by golden
    section on the captured harmonic energy; amplitude and phase come from
    the least-squares fit at the refined period.
    """
    y = np.asarray(curve, dtype=np.float64)
    if y.ndim != 1 or y.size < 3:
        raise RetrievalInputError(f"need >= 3 samples, got shape {y.shape}")
    n = y.size
    centered = y - y.mean()
    total = float(centered @ centered)
    if total <= 0.0:
        raise NoFringeError("stepping curve is constant; no fringe modulation")

    grid = np.linspace(0.9 * n, 1.1 * n, 41)
    energies = [_harmonic_energy(y, p) for p in grid]
    best = int(np.argmax(energies))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    period = _golden_max(lambda p: _harmonic_energy(y, p), lo, hi)

    k = np.arange(n)
    design = np.column_stack(
        [np.ones(n), np.cos(TWO_PI * k / period), np.sin(TWO_PI * k / period)]
    )
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    a0, c, s = (float(v) for v in coef)
    a1 = math.hypot(c, s)
    if a0 <= 0.0 or a1 < visibility_floor * abs(a0):
        raise NoFringeError(
            f"fringe visibility {a1 / a0 if a0 else float('nan'):.3g} below floor "
            f"{visibility_floor}; check alignment"
        )
    phi = wrap_phase(math.atan2(-s, c))
    return CurveStats(a0=a0, a1=a1, phi=phi, visibility=a1 / a0,
                      period_steps=float(period), start_phase=phi)


def _arm_curve(ds: SteppingDataset, arm: str, roi: Optional[Roi]) -> np.ndarray:
    entries = ds.arm_entries(arm)
    if not entries:
        raise RetrievalInputError(f"dataset has no {arm!r} arm")
    shape = (ds.height, ds.width)
    roi = roi.validate(shape) if roi is not None else Roi.full(shape)
    sl = roi.slices()
    return np.array(
        [np.asarray(e.frame.pixels[sl], dtype=np.float64).mean() for e in entries]
    )


def analyze_reference(ds: SteppingDataset, roi: Optional[Roi] = None,
                      visibility_floor: float = DEFAULT_VISIBILITY_FLOOR) -> CurveStats:
    """Fit the reference-arm ROI-mean curve of a dataset."""
    return fit_stepping_curve(_arm_curve(ds, ARM_REFERENCE, roi), visibility_floor)


# -- drift calibration ---------------------------------------------------------


def _margin_mean(pixels: np.ndarray, margin_rows: int) -> float:
    top = np.asarray(pixels[:margin_rows], dtype=np.float64)
    bottom = np.asarray(pixels[-margin_rows:], dtype=np.float64)
    return float((top.sum() + bottom.sum()) / (top.size + bottom.size))


def calibrate_drift(ds: SteppingDataset, margin_rows: int = 8,
                    sample_roi: Optional[Roi] = None,
                    reference_level: Optional[float] = None) -> SteppingDataset:
    """Rescale every frame to a common flux level from its margin strips.

    The margin is the top and bottom ``margin_rows`` full-width rows, which
    must be sample-free; full-width row means cancel the fringe modulation
    because the reference Moire ramp spans whole turns. Frames are
    multiplied by level / margin_mean, with level the mean of margin means
    (or ``reference_level``, to put a sample dataset on its reference
    dataset's scale).
    """
    if margin_rows < 1 or 2 * margin_rows > ds.height:
        raise CalibrationConfigError(
            f"margin_rows {margin_rows} invalid for height {ds.height}"
        )
    if sample_roi is not None:
        if sample_roi.y < margin_rows or sample_roi.y + sample_roi.h > ds.height - margin_rows:
            raise CalibrationConfigError(
                f"sample roi {sample_roi} overlaps the {margin_rows}-row calibration margin"
            )
    if not ds.entries:
        raise RetrievalInputError("dataset has no frames")
    margins = [_margin_mean(e.frame.pixels, margin_rows) for e in ds.entries]
    if min(margins) <= 0:
        raise CalibrationConfigError("margin mean is not positive; cannot normalize")
    level = float(np.mean(margins)) if reference_level is None else float(reference_level)
    entries = []
    for e, m in zip(ds.entries, margins):
        scale = level / m
        pixels = np.asarray(e.frame.pixels, dtype=np.float64) * scale
        frame = replace(e.frame, pixels=pixels)
        entries.append(DatasetFrame(arm=e.arm, step=e.step, frame=frame,
                                    mean=float(pixels.mean())))
    out = replace(ds, entries=entries, pixel_format="f32")
    out.calibration_level = level
    return out


# -- per-pixel retrieval ---------------------------------------------------------


@dataclass(slots=True)
class RetrievalResult:
    """Co-registered contrast maps plus masks and curve diagnostics."""

    transmission: np.ndarray
    dpc: np.ndarray
    darkfield: np.ndarray
    visibility_ref: np.ndarray
    valid: np.ndarray            # a0_reference above the counts floor
    darkfield_valid: np.ndarray  # additionally: reference modulation not degenerate
    roi: Roi
    diagnostics: dict = dc_field(default_factory=dict)


def _pick_arm(ds: SteppingDataset, preferred: str) -> str:
    arms = ds.arms
    if preferred in arms:
        return preferred
    if len(arms) == 1:
        return next(iter(arms))
    raise RetrievalInputError(f"cannot choose arm from {sorted(arms)}; wanted {preferred!r}")


def diagnostic_band(roi: Roi) -> Roi:
    """Narrow central column band for curve diagnostics.

    A wide ROI can average the Moire ramp over whole fringes and cancel the
    stepping modulation; a band much narrower than one fringe keeps it.
    """
    width = max(1, roi.w // 16)
    x = roi.x + (roi.w - width) // 2
    return Roi(x, roi.y, width, roi.h)


def _summary_stats(a0_map: np.ndarray, a1_map: np.ndarray, band_fit: CurveStats) -> CurveStats:
    """Arm diagnostics: amplitudes from the per-pixel maps, period/phase
    from the narrow-band curve fit (ROI means would cancel the Moire)."""
    positive = a0_map > 0
    vis = float(np.mean(a1_map[positive] / a0_map[positive])) if positive.any() else 0.0
    return CurveStats(
        a0=float(a0_map.mean()),
        a1=float(a1_map.mean()),
        phi=band_fit.start_phase,
        visibility=vis,
        period_steps=band_fit.period_steps,
        start_phase=band_fit.start_phase,
    )


def _harmonics(stack: np.ndarray):
    n = stack.shape[0]
    k = np.arange(n)
    cos_k = np.cos(TWO_PI * k / n)
    sin_k = np.sin(TWO_PI * k / n)
    a0, sc, ss = _kernels.harmonic_sums(np.ascontiguousarray(stack, dtype=np.float64),
                                        cos_k, sin_k)
    a1 = (2.0 / n) * np.hypot(sc, ss)
    phi = np.arctan2(-ss, sc)
    phi = np.where(phi == -math.pi, math.pi, phi)
    return a0, a1, phi


def retrieve(sample_ds: SteppingDataset, reference_ds: SteppingDataset,
             roi: Optional[Roi] = None,
             counts_floor: float = DEFAULT_COUNTS_FLOOR,
             visibility_floor: float = DEFAULT_VISIBILITY_FLOOR,
             sample_arm: Optional[str] = None,
             reference_arm: Optional[str] = None) -> RetrievalResult:
    """Per-pixel Fourier retrieval of the three contrast channels."""
    if (sample_ds.width, sample_ds.height) != (reference_ds.width, reference_ds.height):
        raise RetrievalInputError(
            f"frame dimensions disagree: sample {sample_ds.width}x{sample_ds.height}, "
            f"reference {reference_ds.width}x{reference_ds.height}"
        )
    s_arm = sample_arm or _pick_arm(sample_ds, ARM_SAMPLE)
    r_arm = reference_arm or _pick_arm(reference_ds, ARM_REFERENCE)
    s_entries = sample_ds.arm_entries(s_arm)
    r_entries = reference_ds.arm_entries(r_arm)
    if len(s_entries) != len(r_entries):
        raise RetrievalInputError(
            f"step counts disagree: sample {len(s_entries)}, reference {len(r_entries)}"
        )
    if len(s_entries) < 3:
        raise RetrievalInputError("need at least 3 steps per arm")

    shape = (sample_ds.height, sample_ds.width)
    roi = roi.validate(shape) if roi is not None else Roi.full(shape)
    sl = roi.slices()

    s_stack = np.stack([np.asarray(e.frame.pixels[sl], dtype=np.float64) for e in s_entries])
    r_stack = np.stack([np.asarray(e.frame.pixels[sl], dtype=np.float64) for e in r_entries])
    a0_s, a1_s, phi_s = _harmonics(s_stack)
    a0_r, a1_r, phi_r = _harmonics(r_stack)

    band = diagnostic_band(roi)
    bx = band.x - roi.x
    band_cols = slice(bx, bx + band.w)
    band_fit_r = fit_stepping_curve(r_stack[:, :, band_cols].mean(axis=(1, 2)),
                                    visibility_floor)
    band_fit_s = fit_stepping_curve(s_stack[:, :, band_cols].mean(axis=(1, 2)),
                                    visibility_floor)
    n = len(s_entries)
    if abs(band_fit_r.period_steps - band_fit_s.period_steps) > 0.1 * n:
        raise RetrievalInputError(
            f"fitted periods disagree: sample {band_fit_s.period_steps:.3f}, "
            f"reference {band_fit_r.period_steps:.3f} steps"
        )
    diag_ref = _summary_stats(a0_r, a1_r, band_fit_r)
    diag_sample = _summary_stats(a0_s, a1_s, band_fit_s)

    valid = a0_r > counts_floor
    vis_r = np.divide(a1_r, a0_r, out=np.zeros_like(a0_r), where=valid)
    deg_r = ~valid | (vis_r < visibility_floor)
    vis_s_ok = (a0_s > 0) & (a1_s >= visibility_floor * np.abs(a0_s))
    phi_r = np.where(deg_r, 0.0, phi_r)
    phi_s = np.where(~vis_s_ok, 0.0, phi_s)

    transmission = np.divide(a0_s, a0_r, out=np.zeros_like(a0_s), where=valid)
    dpc = wrap_phase(phi_s - phi_r)
    vis_s = np.divide(a1_s, a0_s, out=np.zeros_like(a0_s), where=a0_s > 0)
    darkfield_valid = valid & ~deg_r
    darkfield = np.divide(vis_s, vis_r, out=np.zeros_like(vis_s), where=darkfield_valid)

    return RetrievalResult(
        transmission=np.where(valid, transmission, 0.0),
        dpc=np.where(valid, dpc, 0.0),
        darkfield=darkfield,
        visibility_ref=vis_r,
        valid=valid,
        darkfield_valid=darkfield_valid,
        roi=roi,
        diagnostics={"reference": diag_ref, "sample": diag_sample},
    )


def run_retrieval(sample_ds: SteppingDataset, reference_ds: SteppingDataset,
                  roi: Optional[Roi] = None, margin_rows: Optional[int] = None,
                  counts_floor: float = DEFAULT_COUNTS_FLOOR,
                  visibility_floor: float = DEFAULT_VISIBILITY_FLOOR,
                  sample_arm: Optional[str] = None,
                  reference_arm: Optional[str] = None) -> RetrievalResult:
    """Full pipeline: optional drift calibration (shared level), then retrieval.

    When ``margin_rows`` is given, the reference dataset is calibrated to
    its own margin level and the sample dataset to the *same* level, so the
    transmission ratio stays meaningful across arms.
    """
    if margin_rows is not None:
        reference_ds = calibrate_drift(reference_ds, margin_rows, sample_roi=roi)
        sample_ds = calibrate_drift(sample_ds, margin_rows, sample_roi=roi,
                                    reference_level=reference_ds.calibration_level)
    return retrieve(sample_ds, reference_ds, roi=roi, counts_floor=counts_floor,
                    visibility_floor=visibility_floor, sample_arm=sample_arm,
                    reference_arm=reference_arm)


# -- display windowing ---------------------------------------------------------


def window_image(values: np.ndarray, lo_pct: float, hi_pct: float,
                 valid: Optional[np.ndarray] = None) -> np.ndarray:
    """Linear percentile windowing to an 8-bit grayscale image.

    Pixels outside [lo, hi] clamp to 0/255; invalid pixels render 0; a
    degenerate window (all valid pixels equal) renders mid-gray 128.
    """
    if not (0.0 <= lo_pct < hi_pct <= 100.0):
        raise RetrievalInputError(f"need 0 <= lo < hi <= 100, got ({lo_pct}, {hi_pct})")
    values = np.asarray(values, dtype=np.float64)
    mask = np.ones(values.shape, dtype=bool) if valid is None else valid.astype(bool)
    out = np.zeros(values.shape, dtype=np.uint8)
    if not mask.any():
        return out
    selected = values[mask]
    lo = float(np.percentile(selected, lo_pct))
    hi = float(np.percentile(selected, hi_pct))
    if hi <= lo:
        out[mask] = 128
        return out
    scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    out[mask] = np.rint(255.0 * scaled[mask]).astype(np.uint8)
    return out


def write_pgm(path, image: np.ndarray) -> Path:
    """Binary 8-bit grayscale PGM (P5)."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise RetrievalInputError(f"PGM wants a 2-D image, got shape {image.shape}")
    path = Path(path)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())
    return path
