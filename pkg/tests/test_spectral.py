import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from serrodyne import rf_chain as rf
from serrodyne import spectral as sp
from serrodyne import waveform as wf
from serrodyne.spectral import OpticalSpectrum, ShiftMetrics, SweepRow
from serrodyne.waveform import SampledWaveform, SawtoothSpec

from oracles import (
    bessel_j,
    best_line_power,
    piecewise_linear_lines,
    sawtooth_samples,
    sinc2,
    truncated_sawtooth_power,
)


def ideal_record(a=1.0, n=1, per=4096, f_s=1.0):
    return wf.sample_ideal(SawtoothSpec(f_s / per, n, a=a), f_s, 1)


# --- modulate ------------------------------------------------------------------------


def test_modulate_unmodulated_is_carrier():
    s = sp.modulate(SampledWaveform(1.0, np.zeros(64), f_fund=1 / 16))
    assert s.power_at(0.0) == pytest.approx(1.0, abs=1e-15)
    m = sp.metrics(s, 1 / 16)
    assert m.conversion_loss_db == math.inf


def test_modulate_ideal_sawtooth_single_line():
    s = sp.modulate(ideal_record(per=128))
    it = s.index_of(1 / 128)
    assert s.power[it] == pytest.approx(1.0, abs=1e-9)
    assert np.max(np.delete(s.power, it)) < 1e-9


def test_modulate_sinc_a09_against_quadrature():
    mpmath.mp.dps = 30
    integrand_re = lambda x: mpmath.cos(0.9 * 2 * mpmath.pi * (x - 0.5) - 2 * mpmath.pi * x)
    integrand_im = lambda x: mpmath.sin(0.9 * 2 * mpmath.pi * (x - 0.5) - 2 * mpmath.pi * x)
    c = complex(mpmath.quad(integrand_re, [0, 1]), mpmath.quad(integrand_im, [0, 1]))
    expected = abs(c) ** 2
    assert expected == pytest.approx(0.96753, abs=1e-5)
    s = sp.modulate(ideal_record(a=0.9, per=8192))
    assert s.power_at(1 / 8192) == pytest.approx(expected, abs=1e-6)


def test_modulate_scale_argument():
    phi = ideal_record(a=1.0, per=4096)
    np.testing.assert_allclose(
        sp.modulate(phi, 0.9).power, sp.modulate(phi.scaled(0.9)).power, atol=1e-15
    )


def test_modulate_rejects_short_and_non_coherent():
    with pytest.raises(sp.NonCoherentRecord):
        sp.modulate(SampledWaveform(1.0, [0.0, 1.0, 2.0]))
    with pytest.raises(sp.NonCoherentRecord):
        sp.modulate(SampledWaveform(1.0, np.zeros(10), f_fund=0.125))


@pytest.mark.parametrize("amp", [0.5, 0.9, 1.0, 2.0, 3.0])
def test_sideband_powers_match_analytic(amp):
    n = max(1, int(amp))
    s = sp.modulate(ideal_record(a=amp / n, n=n, per=4096))
    for k in range(-5, 6):
        assert s.power_at(k / 4096) == pytest.approx(sp.sideband_power_analytic(amp, k), abs=1e-6)


def test_sideband_power_analytic_examples():
    assert sp.sideband_power_analytic(1, 1) == 1.0
    assert sp.sideband_power_analytic(1, 0) == pytest.approx(0.0, abs=1e-30)
    assert sp.sideband_power_analytic(0.5, 0) == pytest.approx(4 / math.pi**2)
    assert sp.sideband_power_analytic(0.5, 1) == pytest.approx(4 / math.pi**2)
    with pytest.raises(ValueError):
        sp.sideband_power_analytic(-1, 0)


@given(st.floats(0, 10), st.integers(-20, 20))
def test_sideband_power_analytic_matches_sinc(amp, k):
    assert sp.sideband_power_analytic(amp, k) == pytest.approx(sinc2(amp - k), abs=1e-12)


# --- metrics -----------------------------------------------------------------------------


def test_metrics_ideal():
    m = sp.metrics(sp.modulate(ideal_record(per=256)), 1 / 256)
    assert m.conversion_loss_db <= 1e-8
    assert m.suppression_db >= 80
    assert m.spur_offset_hz != m.target_hz


def test_metrics_dsb_floor():
    beta, per = 1.84, 64
    t = np.arange(per)
    phi = SampledWaveform(1.0, beta * np.sin(2 * np.pi * t / per), f_fund=1 / per)
    m = sp.metrics(sp.modulate(phi), 1 / per)
    expected = -10 * math.log10(bessel_j(1, beta) ** 2)
    assert m.conversion_loss_db == pytest.approx(expected, abs=1e-9)
    assert m.conversion_loss_db == pytest.approx(4.7, abs=0.1)
    # strongest spur is the mirror sideband at equal power
    assert m.spur_offset_hz == pytest.approx(-1 / per)
    assert m.suppression_db == pytest.approx(0.0, abs=1e-9)


def test_metrics_equal_power_two_bins():
    f = np.arange(-4, 4) * 1.0
    p = np.zeros(8)
    p[[2, 6]] = 0.5
    m = sp.metrics(OpticalSpectrum(f, p), 2.0)
    assert m.suppression_db == 0.0
    assert m.spur_offset_hz == -2.0
    assert m.conversion_loss_db == pytest.approx(10 * math.log10(2))


def test_metrics_exclusion_guard():
    f = np.arange(-4, 4) * 1.0
    p = np.array([0, 0, 0, 0, 0.1, 0.7, 0.2, 0.0])
    # both neighbours fall inside the guard, nothing else carries power
    assert sp.metrics(OpticalSpectrum(f, p), 1.0, exclusion_bins=1).suppression_unbounded
    m0 = sp.metrics(OpticalSpectrum(f, p), 1.0, exclusion_bins=0)
    assert m0.spur_offset_hz == 2.0
    assert m0.suppression_db == pytest.approx(10 * math.log10(0.7 / 0.2))


def test_metrics_unbounded_suppression_and_off_grid():
    f = np.arange(-2, 2) * 1.0
    m = sp.metrics(OpticalSpectrum(f, np.array([0, 0, 0, 1.0])), 1.0)
    assert m.suppression_unbounded
    assert m.conversion_loss_db == 0.0
    assert m.shifted_power == 1.0
    with pytest.raises(sp.TargetOffGrid):
        sp.metrics(OpticalSpectrum(f, np.array([0, 0, 0, 1.0])), 5.0)


@settings(max_examples=50)
@given(
    st.integers(1, 3),
    st.floats(0.3, 2.0),
    st.integers(16, 200),
    st.sampled_from(["flat", "bandpass", "att"]),
    st.sampled_from(["linear", "zoh"]),
)
def test_spectrum_normalized(n, a, per, tf_kind, kind):
    f_s = 1e9
    tf = {"flat": rf.flat(), "bandpass": rf.synth_bandpass(1e6, 3e8), "att": rf.flat(-4)}[tf_kind]
    phi = sp.drive_phase(SawtoothSpec(f_s / per, n), tf, f_s, 2, 4, kind)
    s = sp.modulate(phi, a)
    assert abs(s.power.sum() - 1) < 1e-9
    assert np.all(s.power >= 0)


# --- sampling model against an exact continuous oracle ----------------------------------


@pytest.mark.parametrize("length", [640, 320, 256, 220])
@pytest.mark.parametrize("oversample,loss_tol,sup_tol", [(8, 5e-3, 0.2), (32, 1e-3, 0.05)])
def test_sampling_model_matches_piecewise_oracle(length, oversample, loss_tol, sup_tol):
    n_per = 32
    spec = SawtoothSpec(n_per / length, 1)
    a, m = sp.optimize_amplitude(spec, rf.flat(), 1.0, n_per, oversample=oversample)
    lines = np.arange(-8 * length, 8 * length)
    p = piecewise_linear_lines(a * sawtooth_samples(n_per, length), 1.0, lines)
    target = p[lines == n_per][0]
    spur = p[np.abs(lines - n_per) > 1].max()
    assert m.conversion_loss_db == pytest.approx(-10 * math.log10(target), abs=loss_tol)
    assert m.suppression_db == pytest.approx(10 * math.log10(target / spur), abs=sup_tol)


# --- amplitude optimisation ----------------------------------------------------------


def test_golden_section_quadratic():
    x, fx = sp.golden_section(lambda a: (a - 0.3) ** 2, 0.0, 1.0, 1e-8)
    assert x == pytest.approx(0.3, abs=1e-7)
    assert fx == pytest.approx(0.0, abs=1e-14)


def test_optimize_flat_ideal_ramp():
    a, m = sp.optimize_amplitude(SawtoothSpec(1 / 20, 1), rf.flat(), 1.0, 1, oversample=1)
    assert a == pytest.approx(1.0, abs=1e-3)
    assert m.conversion_loss_db <= 1e-6


def test_optimize_flat_interpolated_slow_ramp():
    a, m = sp.optimize_amplitude(SawtoothSpec(1 / 2000, 1), rf.flat(), 1.0, 1)
    assert a == pytest.approx(1.0, abs=1e-3)
    assert m.conversion_loss_db < 0.01


@pytest.mark.parametrize("oversample,per", [(1, 20), (8, 2000)])
def test_optimize_compensates_attenuation(oversample, per):
    a, m = sp.optimize_amplitude(
        SawtoothSpec(1 / per, 1), rf.flat(-6.0206), 1.0, 1, oversample=oversample
    )
    assert a == pytest.approx(2.0, abs=1e-3)


def test_optimize_brickwall_against_exhaustive_scan():
    per = 2048
    f_m = 1.0 / per
    tf = rf.TransferFunction([10 * f_m, 10.5 * f_m], [0.0, -400.0], [0.0, 0.0])
    a, m = sp.optimize_amplitude(SawtoothSpec(f_m, 1), tf, 1.0, 1)
    grid = np.arange(0.5, 1.5 + 5e-5, 1e-4)
    p = truncated_sawtooth_power(grid, 1, 10, points=per)
    i = int(np.argmax(p))
    assert m.conversion_loss_db > 0
    assert abs(a - 1) > 5e-3
    assert a == pytest.approx(grid[i], abs=5e-4)
    assert m.conversion_loss_db == pytest.approx(-10 * math.log10(p[i]), abs=1e-3)


def test_optimize_deterministic():
    spec = SawtoothSpec(9.85e9 * 0.08, 2)
    tf = rf.synth_bandpass(10e6, 4.2e9)
    runs = [sp.optimize_amplitude(spec, tf, 9.85e9, 32) for _ in range(3)]
    assert all(r[0] == runs[0][0] for r in runs)
    assert all(r[1] == runs[0][1] for r in runs)


def test_amplitude_bracket_scales_with_gain():
    spec = SawtoothSpec(1e8, 2)
    assert sp.amplitude_bracket(spec, rf.flat()) == (0.5, 3.0, 0.02)
    lo, hi, step = sp.amplitude_bracket(spec, rf.flat(-6.0206))
    assert (lo, hi, step) == pytest.approx((1.0, 6.0, 0.04), rel=1e-4)


@pytest.mark.parametrize("ratio", [0.03, 0.08])
def test_n_scaling(ratio):
    f_s = 1e9
    f_m, n_per = sp.snap_frequency(ratio * f_s, f_s)
    results = {}
    for n in (1, 2, 3):
        a, m = sp.optimize_amplitude(SawtoothSpec(f_m, n), rf.flat(), f_s, n_per)
        s = sp.modulate(sp.drive_phase(SawtoothSpec(f_m, n), rf.flat(), f_s, n_per), a)
        assert s.f_bin[np.argmax(s.power)] == pytest.approx(n * f_m)
        assert m.target_hz == pytest.approx(n * f_m)
        assert a == pytest.approx(1.0, abs=0.1)
        results[n] = m
        # scale invariance: only f_m / f_s matters
        a2, m2 = sp.optimize_amplitude(SawtoothSpec(3 * f_m, n), rf.flat(), 3 * f_s, n_per)
        assert a2 == pytest.approx(a, abs=1e-9)
        assert m2.conversion_loss_db == pytest.approx(m.conversion_loss_db, abs=1e-9)
    assert results[1].conversion_loss_db < 1.0


# --- sweeps ------------------------------------------------------------------------------


@given(st.floats(1e3, 4.9e8), st.integers(1, 64), st.integers(1, 4096))
def test_snap_frequency_coherent(f_m, periods, min_samples):
    f_s = 1e9
    f_snap, n = sp.snap_frequency(f_m, f_s, periods, min_samples)
    length = wf.record_length(f_snap, f_s, n)
    assert n >= periods
    assert length >= 2 * n + 1
    assert abs(n * f_s / f_m - length) <= 0.5 or length == 2 * n + 1


def test_snap_frequency_rejects_nyquist():
    with pytest.raises(ValueError):
        sp.snap_frequency(0.5, 1.0)


def test_sweep_loss_monotone_and_oracle_agreement():
    ratios = np.linspace(0.01, 0.2, 20)
    rows = sp.sweep(ratios, 1, rf.flat(), 1.0, min_samples=1024)
    loss = np.array([r.metrics.conversion_loss_db for r in rows])
    assert np.all(np.diff(loss) >= -1e-9)
    # independent check at a few points: exact continuous spectrum of the
    # linearly reconstructed ramp
    for r in rows[::6]:
        f_m, n_per = sp.snap_frequency(r.f_requested, 1.0, 32, 1024)
        length = round(n_per / f_m)
        oracle = -10 * math.log10(best_line_power(n_per, length))
        # 8x reconstruction grid: discretisation error grows with f_m/f_s
        assert r.metrics.conversion_loss_db == pytest.approx(oracle, rel=5e-3, abs=1e-3)


def test_sweep_rows_ordered_and_errors_annotated():
    f_s = 1e9
    rows = sp.sweep([1e8, 6e8, 5e7], 1, rf.flat(), f_s, min_samples=512)
    assert [r.ok for r in rows] == [True, False, True]
    assert rows[1].f_m == 6e8 and math.isnan(rows[1].a_star) and rows[1].metrics is None
    assert rows[0].f_m == pytest.approx(1e8, rel=1e-3)
    assert rows[2].f_requested == 5e7
    assert all(r.a_star > 0 for r in rows if r.ok)


def test_sweep_parallel_matches_serial():
    f = np.linspace(2e7, 4e8, 6)
    tf = rf.synth_bandpass(10e6, 4.2e9)
    serial = sp.sweep(f, 2, tf, 9.85e9, min_samples=512)
    parallel = sp.sweep(f, 2, tf, 9.85e9, min_samples=512, max_workers=3)
    assert [(r.f_m, r.a_star, r.metrics) for r in serial] == [
        (r.f_m, r.a_star, r.metrics) for r in parallel
    ]


# --- band extraction -------------------------------------------------------------------


def _rows(losses, sups=None):
    sups = sups if sups is not None else [20.0] * len(losses)
    return [
        SweepRow(float(i), 1, 1.0, ShiftMetrics(float(i), float(l), float(s), 0.0))
        for i, (l, s) in enumerate(zip(losses, sups))
    ]


def test_bands_all_pass():
    assert sp.extract_bands(_rows([0.1] * 5), loss_below=1) == [(0.0, 4.0)]


def test_bands_alternating():
    rows = _rows([0.1, 2, 0.1, 2, 0.1])
    assert sp.extract_bands(rows, loss_below=1) == [(0.0, 0.0), (2.0, 2.0), (4.0, 4.0)]


def test_bands_widest_first_and_suppression():
    rows = _rows([0.1, 2, 0.1, 0.1, 0.1, 2], sups=[10, 20, 20, 5, 16, 16])
    assert sp.extract_bands(rows, loss_below=1) == [(2.0, 4.0), (0.0, 0.0)]
    assert sp.extract_bands(rows, suppression_above=15) == [(1.0, 2.0), (4.0, 5.0)]
    with pytest.raises(ValueError):
        sp.extract_bands(rows)
    with pytest.raises(ValueError):
        sp.extract_bands(rows, loss_below=1, suppression_above=15)


def test_bands_skip_error_rows():
    rows = _rows([0.1, 0.1, 0.1])
    rows[1] = SweepRow(1.0, 1, math.nan, None, error="boom")
    assert sp.extract_bands(rows, loss_below=1) == [(0.0, 0.0), (2.0, 2.0)]


@given(st.integers(1, 40))
def test_bands_synthetic_crossing(cross):
    # loss rises linearly through 1 dB just after index ``cross``
    losses = 0.5 + (np.arange(50) - cross) * 0.01
    losses[cross + 1 :] += 1.0
    rows = _rows(losses)
    last = max(i for i, l in enumerate(losses) if l < 1)
    assert sp.extract_bands(rows, loss_below=1) == [(0.0, float(last))]


@given(st.lists(st.booleans(), min_size=0, max_size=60))
def test_bands_match_linear_scan(mask):
    rows = _rows([0.1 if ok else 3.0 for ok in mask])
    runs, start = [], None
    for i, ok in enumerate(mask + [False]):
        if ok and start is None:
            start = i
        if not ok and start is not None:
            runs.append((float(start), float(i - 1)))
            start = None
    got = sp.extract_bands(rows, loss_below=1)
    assert sorted(got) == sorted(runs)
    widths = [b - a for a, b in got]
    assert widths == sorted(widths, reverse=True)


# --- table I/O ------------------------------------------------------------------------------


def test_sweep_table_round_trip():
    rows = sp.sweep([1e8, 6e8, 3e8], 2, rf.flat(), 1e9, min_samples=256)
    text = sp.format_sweep_table(rows, footer=["band x"])
    assert text.startswith("# schema=1\n# f_m_hz,N,a_star,")
    assert "# error f_m_hz=600000000.0" in text
    assert text.rstrip().endswith("# band x")
    parsed = sp.parse_sweep_table(text)
    assert len(parsed) == 2
    assert sp.format_sweep_table(parsed, footer=["band x"]) == sp.format_sweep_table(
        [r for r in rows if r.ok], footer=["band x"]
    )
    again = sp.parse_sweep_table(sp.format_sweep_table(parsed))
    assert [(r.f_m, r.n, r.a_star, r.metrics) for r in again] == [
        (r.f_m, r.n, r.a_star, r.metrics) for r in parsed
    ]


def test_parse_sweep_table_rejects_bad_rows():
    with pytest.raises(ValueError):
        sp.parse_sweep_table("# schema=1\n1,2,3\n")
