"""Interferometer geometry: the closed-form relations every module consumes.

All lengths are SI meters, angles radians. The three-grating layout is
described by the source/analyzer periods (p0, p2), the inter-grating
distances (l: G0-G1, d: G1-G2) and the design wavelength. A valid layout
keeps the line-source fringes from each G0 slit overlapping constructively
at the analyzer plane, which pins p0/l = p2/d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import InvalidGeometryError

# hc in keV*m, so wavelength_m = HC_KEV_M / energy_keV.
HC_KEV_M = 1.23984193e-9

# Fraction of the peak tube voltage taken as the mean photon energy of a
# tungsten-anode spectrum. Fixed heuristic; only relative behavior matters.
MEAN_ENERGY_FRACTION = 0.6

# Relative tolerance on the matching condition. Safe for double precision.
MATCHING_REL_TOL = 1e-9


@dataclass(slots=True)
class BeamlineGeometry:
    """Grating periods, distances and wavelength of one interferometer.

    ``p1`` (the beam-splitter period) is carried for completeness but is not
    constrained by the matching condition. Any of ``p0``, ``p2``, ``l``,
    ``d`` may be ``None`` to request completion via the matching condition.
    """

    p0: Optional[float]  # source grating period, m
    p1: float            # beam-splitter grating period, m (informational)
    p2: Optional[float]  # analyzer grating period, m
    l: Optional[float]   # G0 -> G1 distance, m
    d: Optional[float]   # G1 -> G2 distance, m
    wavelength: float    # design wavelength, m


@dataclass(slots=True, frozen=True)
class GeometryCheck:
    """Outcome of the matching-condition check."""

    ok: bool
    rel_error: float


_CONSTRAINED = ("p0", "p2", "l", "d")


def _require_positive(name: str, value: float) -> None:
    if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0.0:
        raise InvalidGeometryError(f"{name} must be a finite positive length, got {value!r}")


def _check_complete(g: BeamlineGeometry) -> None:
    for name in _CONSTRAINED:
        value = getattr(g, name)
        if value is None:
            raise InvalidGeometryError(f"{name} is unset; call complete_geometry first")
        _require_positive(name, value)
    _require_positive("p1", g.p1)
    _require_positive("wavelength", g.wavelength)


def validate_geometry(g: BeamlineGeometry) -> GeometryCheck:
    """Check the fringe-overlap matching condition p0/l = p2/d.

    Returns ``GeometryCheck(ok=True, ...)`` when the relative mismatch
    |p0*d - p2*l| / (p2*l) is within ``MATCHING_REL_TOL``, otherwise
    ``ok=False`` with the relative error. Non-positive or missing fields
    raise :class:`InvalidGeometryError` instead (an invalid input, not a
    violation).
    """
    _check_complete(g)
    ref = g.p2 * g.l
    rel_error = abs(g.p0 * g.d - ref) / ref
    return GeometryCheck(ok=rel_error <= MATCHING_REL_TOL, rel_error=rel_error)


def complete_geometry(g: BeamlineGeometry) -> BeamlineGeometry:
    """Fill in the single unset field of {p0, p2, l, d} from the other three.

    The completed layout satisfies the matching condition exactly (up to one
    floating multiply/divide) and therefore passes :func:`validate_geometry`.
    Zero or two-plus unset fields raise :class:`InvalidGeometryError`.
    """
    unset = [name for name in _CONSTRAINED if getattr(g, name) is None]
    if len(unset) != 1:
        raise InvalidGeometryError(
            f"exactly one of {_CONSTRAINED} must be unset, found {len(unset)} ({unset})"
        )
    for name in _CONSTRAINED:
        if name not in unset:
            _require_positive(name, getattr(g, name))
    _require_positive("p1", g.p1)
    _require_positive("wavelength", g.wavelength)

    missing = unset[0]
    if missing == "p0":
        value = g.p2 * g.l / g.d
    elif missing == "p2":
        value = g.p0 * g.d / g.l
    elif missing == "l":
        value = g.p0 * g.d / g.p2
    else:  # d
        value = g.p2 * g.l / g.p0
    return replace(g, **{missing: value})


def refraction_angle(phase_gradient: float, wavelength: float) -> float:
    """Beam deflection for a wavefront phase gradient (rad/m), sign preserved."""
    if not math.isfinite(phase_gradient):
        raise InvalidGeometryError(f"phase_gradient must be finite, got {phase_gradient!r}")
    _require_positive("wavelength", wavelength)
    return wavelength / (2.0 * math.pi) * phase_gradient


def fringe_phase_shift(alpha: float, d: float, p2: float) -> float:
    """Stepping-curve phase advance for a refraction angle ``alpha``.

    A deflection alpha displaces the fringe pattern by d*alpha at the
    analyzer, i.e. 2*pi*d*alpha/p2 of fringe phase.
    """
    _require_positive("p2", p2)
    if not math.isfinite(alpha) or not math.isfinite(d):
        raise InvalidGeometryError("alpha and d must be finite")
    return 2.0 * math.pi * d * alpha / p2


def wavelength_from_voltage(kvp: float) -> float:
    """Effective wavelength (m) of a tube spectrum at peak voltage ``kvp`` (kV).

    Uses the mean-energy heuristic E_mean = MEAN_ENERGY_FRACTION * kvp keV.
    """
    if not isinstance(kvp, (int, float)) or not math.isfinite(kvp) or kvp <= 0.0:
        raise InvalidGeometryError(f"kvp must be positive, got {kvp!r}")
    return HC_KEV_M / (MEAN_ENERGY_FRACTION * kvp)


@dataclass(slots=True)
class PhaseField:
    """Wavefront phase shift sampled on the detector pixel grid.

    ``values[y, x]`` is the phase shift in radians; ``pixel_pitch`` is the
    grid spacing in meters per pixel.
    """

    pixel_pitch: float
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise InvalidGeometryError(f"phase grid must be 2-D, got shape {self.values.shape}")
        if not (isinstance(self.pixel_pitch, (int, float)) and self.pixel_pitch > 0):
            raise InvalidGeometryError(f"pixel_pitch must be positive, got {self.pixel_pitch!r}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidGeometryError("phase grid contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def gradient_x(self) -> np.ndarray:
        """d(phase)/dx in rad/m: central differences, one-sided at borders."""
        if self.width == 1:
            return np.zeros_like(self.values)
        return np.gradient(self.values, self.pixel_pitch, axis=1)
