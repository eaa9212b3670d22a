import math

import numpy as np
import pytest

from gratingscope.beamline import DefectPixel, PiezoStage
from gratingscope.errors import PiezoRangeError, TubeLimitError
from tests.conftest import STOCK_MA, add_uniform_phantom, make_beamline

FLUX = 8000.0
EXPOSURE = 0.1
V0 = 0.2
BASE = FLUX * STOCK_MA * EXPOSURE  # 18000 counts


class TestForwardModel:
    def test_peak_of_cosine_at_zero(self):
        bl = make_beamline(noiseless=True, reference_phase_turns=0.0)
        out = bl.expected_intensity(piezo_um=0.0)
        assert np.allclose(out, BASE * (1 + V0), rtol=1e-12)

    def test_trough_at_half_period(self):
        bl = make_beamline(noiseless=True, reference_phase_turns=0.0)
        out = bl.expected_intensity(piezo_um=bl.fringe.p2_equiv_um / 2)
        assert np.allclose(out, BASE * (1 - V0), rtol=1e-9)

    def test_uniform_phantom_curve_matches_closed_form(self):
        bl = make_beamline(shape=(8, 16), noiseless=True)
        add_uniform_phantom(bl, transmission=0.8, fringe_shift_rad=0.3, scatter=0.9)
        bl.insert_sample()
        period = bl.fringe.p2_equiv_um
        phi_ref = bl.reference_phase
        for k in range(8):
            x = k * period / 8
            got = bl.expected_intensity(piezo_um=x)
            want = 0.8 * BASE * (
                1 + 0.9 * V0 * np.cos(2 * np.pi * x / period + phi_ref + 0.3)
            )
            assert np.allclose(got, want, rtol=1e-9)

    def test_scalar_and_map_paths_agree(self):
        bl = make_beamline(shape=(6, 9), noiseless=True)
        add_uniform_phantom(bl)
        bl.insert_sample()
        full = bl.expected_intensity(piezo_um=0.7)
        for iy, ix in [(0, 0), (3, 5), (5, 8)]:
            assert bl.forward_intensity(ix, iy, 0.7) == pytest.approx(full[iy, ix], rel=1e-12)

    def test_periodicity_in_piezo_travel(self):
        bl = make_beamline(noiseless=True)
        a = bl.expected_intensity(piezo_um=0.3)
        b = bl.expected_intensity(piezo_um=0.3 + bl.fringe.p2_equiv_um)
        assert np.allclose(a, b, rtol=1e-12)

    def test_sample_ratio_equals_transmission(self):
        bl = make_beamline(shape=(8, 8), noiseless=True)
        add_uniform_phantom(bl, transmission=0.8)
        steps = 12
        period = bl.fringe.p2_equiv_um
        xs = [k * period / steps for k in range(steps)]
        bl.remove_sample()
        ref = np.mean([bl.expected_intensity(piezo_um=x) for x in xs], axis=0)
        bl.insert_sample()
        samp = np.mean([bl.expected_intensity(piezo_um=x) for x in xs], axis=0)
        assert np.allclose(samp / ref, 0.8, rtol=1e-12)

    def test_tube_off_is_dark_only(self):
        bl = make_beamline(noiseless=True)
        bl.set_tube(False)
        assert np.all(bl.expected_intensity(piezo_um=0.0) == 0.0)
        frame = bl.render_frame(seed=0)
        assert np.all(frame.pixels == 100)

    def test_drift_modulates_flux(self):
        bl = make_beamline(noiseless=True, drift_amplitude=0.05, drift_period_s=20.0)
        base = bl.expected_intensity(piezo_um=0.0, clock_s=0.0)
        quarter = bl.expected_intensity(piezo_um=0.0, clock_s=5.0)
        assert np.allclose(quarter / base, 1.05, rtol=1e-9)


class TestRenderFrame:
    def test_degenerate_noise_is_exact_dark(self):
        bl = make_beamline(noiseless=True, dark_mean=100.0)
        bl.set_tube(False)
        frame = bl.render_frame(seed=7)
        assert frame.pixels.dtype == np.uint16
        assert np.all(frame.pixels == 100)

    def test_same_seed_bit_identical(self):
        bl1 = make_beamline()
        bl2 = make_beamline()
        f1 = bl1.render_frame(seed=(5, 0))
        f2 = bl2.render_frame(seed=(5, 0))
        assert np.array_equal(f1.pixels, f2.pixels)

    def test_different_seed_differs(self):
        bl = make_beamline()
        f1 = bl.render_frame(seed=(5, 0))
        f2 = bl.render_frame(seed=(5, 1))
        assert not np.array_equal(f1.pixels, f2.pixels)

    def test_sample_mean_matches_noise_law(self):
        # 10^4 single-pixel renders: mean within 3*sqrt(var/n) of expectation
        bl = make_beamline(shape=(1, 1), dark_mean=100.0, dark_sigma=5.0,
                           reference_phase_turns=0.0)
        lam = float(bl.expected_intensity(piezo_um=0.0)[0, 0])
        n = 10_000
        samples = np.array([float(bl.render_frame(seed=(9, i)).pixels[0, 0]) for i in range(n)])
        expected_mean = lam + 100.0
        tol = 3.0 * math.sqrt((lam + 25.0) / n)
        assert abs(samples.mean() - expected_mean) < tol + 0.5  # +0.5 rounding slack

    def test_defect_pixels_forced(self):
        bl = make_beamline(shape=(4, 4))
        bl.detector.defects = [DefectPixel(1, 2, "dead"), DefectPixel(0, 0, "hot")]
        frame = bl.render_frame(seed=3)
        assert frame.pixels[2, 1] == 0
        assert frame.pixels[0, 0] == bl.detector.full_well

    def test_clamp_at_full_well(self):
        bl = make_beamline(shape=(2, 2), noiseless=True)
        bl.fringe.flux_per_ma_s = 1e9
        frame = bl.render_frame(seed=0)
        assert np.all(frame.pixels == bl.detector.full_well)

    def test_quantize_false_returns_float(self):
        bl = make_beamline(shape=(2, 2), noiseless=True, quantize=False)
        frame = bl.render_frame(seed=0)
        assert frame.pixels.dtype == np.float64

    def test_clock_advances_per_exposure(self):
        bl = make_beamline()
        t0 = bl.tube.clock_s
        bl.render_frame(seed=0)
        assert bl.tube.clock_s == pytest.approx(t0 + EXPOSURE)


class TestPiezo:
    def test_monotone_sequence_is_exact(self):
        pz = PiezoStage(return_error_um=0.1)
        for target in (0.0, 1.0, 2.0):
            pz.move(target)
            assert pz.encoder_um == target

    def test_reversal_reads_low_by_return_error(self):
        pz = PiezoStage(return_error_um=0.1)
        pz.move(0.0)
        pz.move(2.0)
        pz.move(1.0)
        assert pz.encoder_um == pytest.approx(0.9, abs=1e-12)

    def test_offset_persists_for_following_moves(self):
        pz = PiezoStage(return_error_um=0.1)
        pz.move(2.0)
        pz.move(1.0)   # reversal
        pz.move(0.5)   # same direction; still offset
        assert pz.encoder_um == pytest.approx(0.4, abs=1e-12)
        pz.move(1.5)   # reversal again
        assert pz.encoder_um == pytest.approx(1.4, abs=1e-12)

    def test_out_of_range_rejected_state_unchanged(self):
        pz = PiezoStage()
        pz.move(5.0)
        with pytest.raises(PiezoRangeError):
            pz.move(1e4)
        assert pz.commanded_um == 5.0
        assert pz.encoder_um == 5.0

    def test_home_clears_hysteresis(self):
        pz = PiezoStage(return_error_um=0.1)
        pz.move(2.0)
        pz.move(1.0)
        pz.home(0.0)
        assert pz.encoder_um == 0.0
        pz.move(1.0)
        assert pz.encoder_um == 1.0

    def test_resolution_quantizes_encoder(self):
        pz = PiezoStage(resolution_um=0.05)
        pz.move(1.02)
        assert pz.encoder_um == pytest.approx(1.0, abs=1e-12)

    def test_encoder_stays_within_error_bound(self):
        pz = PiezoStage(return_error_um=0.3, resolution_um=0.01)
        rng = np.random.default_rng(5)
        for target in rng.uniform(0, 100, size=200):
            pz.move(float(target))
            assert abs(pz.encoder_um - pz.commanded_um) <= 0.3 + 0.01 + 1e-12


class TestTube:
    def test_stock_settings_accepted(self):
        bl = make_beamline(tube_on=False)
        state = bl.set_tube(True, 45.0, 22.5)
        assert state.on and state.voltage_kv == 45.0 and state.current_ma == 22.5

    def test_negative_current_rejected_naming_bound(self):
        bl = make_beamline(tube_on=False)
        with pytest.raises(TubeLimitError, match="current"):
            bl.set_tube(True, 45.0, -1.0)

    def test_overvoltage_rejected_naming_bound(self):
        bl = make_beamline(tube_on=False)
        with pytest.raises(TubeLimitError, match="voltage"):
            bl.set_tube(True, 75.0, 10.0)

    def test_off_allows_any_stored_values(self):
        bl = make_beamline(tube_on=False)
        state = bl.set_tube(False)
        assert not state.on
