import numpy as np
import pytest

from gratingscope.beamline import Beamline, DetectorConfig, FringeModel, PiezoStage, TubeState
from gratingscope.geometry import BeamlineGeometry, wavelength_from_voltage
from gratingscope.phantoms import uniform_phantom

STOCK_KV = 45.0
STOCK_MA = 22.5


def make_geometry() -> BeamlineGeometry:
    return BeamlineGeometry(
        p0=19.2e-6, p1=4.8e-6, p2=2.4e-6, l=1.6, d=0.2,
        wavelength=wavelength_from_voltage(STOCK_KV),
    )


def make_beamline(
    shape=(32, 32),
    noiseless=False,
    quantize=True,
    dark_mean=100.0,
    dark_sigma=5.0,
    return_error_um=0.0,
    drift_amplitude=0.0,
    drift_period_s=30.0,
    reference_phase_turns=2.0,
    tube_on=True,
) -> Beamline:
    h, w = shape
    detector = DetectorConfig(
        width=w, height=h, exposure_time_s=0.1,
        dark_mean=dark_mean, dark_sigma=0.0 if noiseless else dark_sigma,
        shot_noise=not noiseless, quantize=quantize,
    )
    bl = Beamline(
        geometry=make_geometry(),
        detector=detector,
        tube=TubeState(drift_amplitude=drift_amplitude, drift_period_s=drift_period_s),
        piezo=PiezoStage(return_error_um=return_error_um),
        fringe=FringeModel(reference_phase_turns=reference_phase_turns),
    )
    if tube_on:
        bl.set_tube(True, STOCK_KV, STOCK_MA)
    return bl


def add_uniform_phantom(bl: Beamline, transmission=0.8, fringe_shift_rad=0.3, scatter=0.9):
    sample = uniform_phantom(
        bl.detector.frame_shape, bl.geometry,
        transmission=transmission, fringe_shift_rad=fringe_shift_rad, scatter=scatter,
    )
    bl.load_sample(sample)
    return sample


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
