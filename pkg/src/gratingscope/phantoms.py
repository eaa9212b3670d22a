"""Synthetic phantoms for the virtual beamline.

Each builder returns a :class:`SampleModel` whose wavefront phase is a
linear ramp chosen so the induced stepping-phase shift equals the
requested ``fringe_shift_rad`` (exactly, since the ramp gradient is
constant and central differences of a linear function are exact).
"""

from __future__ import annotations

import numpy as np

from .beamline import SampleModel
from .geometry import BeamlineGeometry, PhaseField


def _ramp_phase(shape: tuple[int, int], pixel_pitch_m: float,
                fringe_shift_rad: float, geometry: BeamlineGeometry) -> np.ndarray:
    # Invert dphi = (wavelength * d / p2) * dPhi/dx for the ramp slope.
    slope = fringe_shift_rad * geometry.p2 / (geometry.wavelength * geometry.d)  # rad/m
    h, w = shape
    x = np.arange(w, dtype=np.float64) * pixel_pitch_m
    return np.broadcast_to(slope * x, (h, w)).copy()


def uniform_phantom(shape: tuple[int, int], geometry: BeamlineGeometry,
                    pixel_pitch_m: float = 50e-6, transmission: float = 0.8,
                    fringe_shift_rad: float = 0.3, scatter: float = 0.9) -> SampleModel:
    """Spatially uniform sample filling the whole field of view."""
    h, w = shape
    return SampleModel(
        transmission=np.full((h, w), transmission),
        phase=PhaseField(pixel_pitch_m, _ramp_phase(shape, pixel_pitch_m, fringe_shift_rad, geometry)),
        scatter=np.full((h, w), scatter),
    )


def slab_phantom(shape: tuple[int, int], geometry: BeamlineGeometry,
                 pixel_pitch_m: float = 50e-6, transmission: float = 0.8,
                 fringe_shift_rad: float = 0.3, scatter: float = 0.9,
                 margin: int = 16) -> SampleModel:
    """Rectangular slab centered in the frame, clear border of ``margin`` px.

    The clear border keeps drift-calibration margin strips sample-free and
    gives profile tools a sharp transmission step to cross.
    """
    h, w = shape
    if 2 * margin >= min(h, w):
        raise ValueError(f"margin {margin} leaves no slab in a {w}x{h} frame")
    t = np.ones((h, w))
    s = np.ones((h, w))
    phi = np.zeros((h, w))
    inner = (slice(margin, h - margin), slice(margin, w - margin))
    t[inner] = transmission
    s[inner] = scatter
    phi[inner] = _ramp_phase(shape, pixel_pitch_m, fringe_shift_rad, geometry)[inner]
    return SampleModel(transmission=t, phase=PhaseField(pixel_pitch_m, phi), scatter=s)


def disk_phantom(shape: tuple[int, int], geometry: BeamlineGeometry,
                 pixel_pitch_m: float = 50e-6, transmission: float = 0.8,
                 fringe_shift_rad: float = 0.3, scatter: float = 0.9,
                 radius_frac: float = 0.3) -> SampleModel:
    """Disk in the frame center; background is empty beam."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = (yy - (h - 1) / 2.0) ** 2 + (xx - (w - 1) / 2.0) ** 2
    inside = r2 <= (radius_frac * min(h, w)) ** 2
    t = np.where(inside, transmission, 1.0)
    s = np.where(inside, scatter, 1.0)
    phi = np.where(inside, _ramp_phase(shape, pixel_pitch_m, fringe_shift_rad, geometry), 0.0)
    return SampleModel(transmission=t, phase=PhaseField(pixel_pitch_m, phi), scatter=s)


def build_phantom(kind: str, shape: tuple[int, int], geometry: BeamlineGeometry, **kw) -> SampleModel:
    builders = {"uniform": uniform_phantom, "slab": slab_phantom, "disk": disk_phantom}
    if kind not in builders:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {sorted(builders)}")
    return builders[kind](shape, geometry, **kw)
