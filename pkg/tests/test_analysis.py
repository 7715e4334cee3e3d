import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spinpair.core import DensityMatrix4
from spinpair.errors import ConfigurationError, FitError, SamplingError
from spinpair.fitting import (
    damped_cosine,
    fit_damped_cosine,
    fit_power_law,
    fit_stretched_exponential,
    spectral_peak_significance,
    spectrum_and_linewidth,
    stretched_exponential,
)
from spinpair.readout import ReadoutModel, population_estimate, simulate_readout
from spinpair.records import ExperimentRecord

RO = ReadoutModel()


def _electron_state(p_up):
    return DensityMatrix4(np.diag([p_up, 0, 1 - p_up, 0]).astype(complex))


# -- readout -------------------------------------------------------------------


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_readout_extremes(p):
    sig, ref, _ = simulate_readout(_electron_state(p), RO, 10**6, 1)
    expect = RO.counts_bright * (1 - RO.contrast * p) * 10**6
    assert sig == pytest.approx(expect, rel=5 / np.sqrt(expect))
    assert ref == pytest.approx(RO.counts_bright * 10**6, rel=5e-3)


def test_readout_estimate_unbiased_over_seeds():
    p = 0.37
    est = np.array([simulate_readout(_electron_state(p), RO, 50, s)[2] for s in range(1000)])
    se = est.std(ddof=1) / np.sqrt(len(est))
    assert abs(est.mean() - p) < 4 * se


def test_readout_standard_error_scales_as_inverse_sqrt_shots():
    rho = _electron_state(0.5)
    spread = {n: np.std([simulate_readout(rho, RO, n, s)[2] for s in range(400)]) for n in (100, 1600)}
    assert spread[100] / spread[1600] == pytest.approx(4.0, rel=0.15)


def test_readout_validation():
    with pytest.raises(ConfigurationError):
        ReadoutModel(counts_bright=0.0)
    with pytest.raises(ConfigurationError):
        ReadoutModel(contrast=1.0)
    with pytest.raises(ValueError):
        simulate_readout(_electron_state(0.5), RO, 0, 0)


def test_population_estimate_formula():
    assert population_estimate(70, 100, 5, ReadoutModel(counts_bright=20, contrast=0.3)) == pytest.approx(1.0)


# -- records -------------------------------------------------------------------


def _record():
    x = np.linspace(0, 1, 5)
    return ExperimentRecord(
        "rabi", "time_us", x, [100, 95, 90, 85, 80], [100, 101, 99, 100, 100], 5, RO,
        {"expected": x**2 + 0.1}, {"seed": 3, "note": "x"},
    )


def test_record_csv_round_trip(tmp_path):
    rec = _record()
    path = tmp_path / "r.csv"
    rec.write_csv(path)
    back = ExperimentRecord.read_csv(path)
    assert back.name == rec.name and back.x_label == rec.x_label and back.shots == rec.shots
    assert np.array_equal(back.x, rec.x)
    assert np.array_equal(back.counts_signal, rec.counts_signal)
    assert np.array_equal(back.counts_reference, rec.counts_reference)
    assert np.array_equal(back.columns["expected"], rec.columns["expected"])
    assert back.metadata == rec.metadata and back.readout == rec.readout
    assert back.to_csv_text() == rec.to_csv_text()


def test_record_header_and_columns():
    text = _record().to_csv_text()
    lines = text.split("\r\n")
    assert lines[0] == "# record: rabi"
    assert "up" in lines[1].lower()
    assert lines[5] == "time_us,counts_signal,counts_reference,population,expected"


def test_record_length_validation():
    with pytest.raises(ValueError):
        ExperimentRecord("a", "x", [0, 1], [1], [1, 2], 1, RO)
    with pytest.raises(ValueError):
        ExperimentRecord("a", "x", [0, 1], [1, 2], [1, 2], 1, RO, {"c": [1.0]})


# -- fitting -------------------------------------------------------------------

T = np.linspace(0, 10, 201)


def test_damped_cosine_exact_recovery():
    truth = [0.4, 0.73, 0.6, 0.05, 0.5]
    fit = fit_damped_cosine(T, damped_cosine(T, *truth))
    assert fit.converged
    assert np.allclose(fit.values, truth, atol=1e-8)


def test_damped_cosine_error_bars_cover_truth():
    truth = dict(amplitude=0.4, frequency=0.73, phase=0.6, decay_rate=0.05, offset=0.5)
    clean = damped_cosine(T, **truth)
    hits = 0
    trials = 200
    for seed in range(trials):
        y = clean + np.random.default_rng(seed).normal(0, truth["amplitude"] / 10, T.size)
        fit = fit_damped_cosine(T, y)
        hits += abs(fit["frequency"] - truth["frequency"]) <= 1.96 * fit.error("frequency")
    assert hits / trials >= 0.90


def test_damped_cosine_uncertainty_scales_as_inverse_sqrt_n():
    truth = [0.4, 0.73, 0.6, 0.05, 0.5]
    errs = []
    for n in (200, 800):
        t = np.linspace(0, 10, n)
        y = damped_cosine(t, *truth) + np.random.default_rng(n).normal(0, 0.04, n)
        errs.append(fit_damped_cosine(t, y).error("frequency"))
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.15)


def test_constant_data_rejected():
    with pytest.raises(FitError):
        fit_damped_cosine(T, np.ones_like(T))
    with pytest.raises(FitError):
        fit_stretched_exponential(T, np.ones_like(T))
    with pytest.raises(FitError):
        fit_damped_cosine(T[:5], T[:5])


def test_stretched_exponential_exact():
    y = stretched_exponential(T, 0.9, 3.0, 3.0, 0.05)
    fit = fit_stretched_exponential(T, y)
    assert fit["t2"] == pytest.approx(3.0, abs=1e-6)
    assert fit["n"] == pytest.approx(3.0, abs=1e-6)
    assert not fit.flags


def test_stretched_exponential_flags_bound():
    # a true exponent of 6 cannot be reached inside [0.5, 4]
    y = stretched_exponential(T, 1.0, 4.0, 6.0)
    fit = fit_stretched_exponential(T, y, fit_offset=False)
    assert fit["n"] == pytest.approx(4.0, abs=1e-6)
    assert "n_at_bound" in fit.flags


def test_power_law_exact_and_standard_error():
    n = np.array([1, 2, 4, 8, 16, 32.0])
    fit = fit_power_law(n, 0.15 * n**0.8)
    assert fit["beta"] == pytest.approx(0.8, abs=1e-12)
    assert fit["a"] == pytest.approx(0.15, rel=1e-12)
    noise = np.array([0.02, -0.01, 0.03, -0.02, 0.0, 0.01])
    fit = fit_power_law(n, 0.15 * n**0.8 * np.exp(noise))
    # textbook OLS slope standard error on the log-log data
    lx, ly = np.log(n), np.log(0.15) + 0.8 * np.log(n) + noise
    slope, icpt = np.polyfit(lx, ly, 1)
    s2 = np.sum((ly - slope * lx - icpt) ** 2) / (len(n) - 2)
    assert fit["beta"] == pytest.approx(slope, abs=1e-12)
    assert fit.error("beta") == pytest.approx(np.sqrt(s2 / np.sum((lx - lx.mean()) ** 2)), rel=1e-10)
    with pytest.raises(FitError):
        fit_power_law([1, 2], [1, -1])


def test_hann_linewidth_of_pure_tone():
    t = np.arange(400) * 0.5
    spec = spectrum_and_linewidth(t, np.cos(2 * np.pi * 0.2 * t))
    assert spec.peak_frequency == pytest.approx(0.2, abs=1e-3)
    assert spec.linewidth == pytest.approx(1.44 / (400 * 0.5), rel=0.03)


def test_white_noise_has_no_significant_peak():
    t = np.arange(256.0)
    for seed in range(20):
        spec = spectrum_and_linewidth(t, np.random.default_rng(seed).normal(size=t.size))
        assert spectral_peak_significance(spec) < 5


def test_tone_in_noise_is_significant():
    t = np.arange(256.0)
    y = np.cos(2 * np.pi * 0.1 * t) + np.random.default_rng(0).normal(0, 0.5, t.size)
    assert spectral_peak_significance(spectrum_and_linewidth(t, y)) > 5


@given(shift=st.floats(-50, 50, allow_nan=False))
def test_spectrum_translation_covariant(shift):
    t = np.arange(200) * 0.25
    y = np.cos(2 * np.pi * 0.3 * t + 0.4) * np.exp(-t / 30)
    a = spectrum_and_linewidth(t, y)
    b = spectrum_and_linewidth(t + shift, y)
    assert b.peak_frequency == pytest.approx(a.peak_frequency, abs=1e-9)
    assert b.linewidth == pytest.approx(a.linewidth, abs=1e-9)


def test_nonuniform_axis_rejected():
    with pytest.raises(SamplingError):
        spectrum_and_linewidth([0, 1, 2, 4, 5], np.ones(5))
