import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from conftest import random_density
from spinpair.core import partial_trace
from spinpair.errors import ConfigurationError, StepSizeError
from spinpair.fitting import fit_power_law
from spinpair.noise import (
    CAL_SIGMA,
    CAL_TAU_C,
    DEFAULT_T_PI,
    NoiseModel,
    analytic_t2,
    cpmg_coherence_analytic,
    dephasing_exponent,
    free_dephasing_exponent,
    relaxation_channel,
    sample_batch,
    sample_ou,
    trajectory_rng,
)

OU = NoiseModel(ou_sigma=2.0, ou_tau_c=0.5, spectrum_order=1)


def test_zero_sigma_gives_zero_trajectory():
    assert not np.any(sample_ou(NoiseModel(ou_sigma=0.0), 1.0, 0.001, 0))


def test_exact_ou_update_reproduced():
    dt, n = 0.01, 50
    b = sample_ou(OU, n * dt, dt, 7)
    xi = trajectory_rng(7, 0).standard_normal(n + 1)
    a = np.exp(-dt / OU.ou_tau_c)
    ref = [OU.ou_sigma * xi[0]]
    for k in range(n):
        ref.append(a * ref[-1] + OU.ou_sigma * np.sqrt(1 - a * a) * xi[k + 1])
    assert np.allclose(b, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("order", [1, 2])
def test_ou_variance_and_autocorrelation(order):
    m = NoiseModel(ou_sigma=2.0, ou_tau_c=0.5, spectrum_order=order)
    dt = m.ou_tau_c / 12
    b = sample_ou(m, 1e5 * dt, dt, 2024)
    assert b.var() == pytest.approx(m.ou_sigma**2, rel=0.03)
    lag = int(round(m.ou_tau_c / dt))
    acf = np.mean((b[:-lag] - b.mean()) * (b[lag:] - b.mean()))
    assert acf == pytest.approx(float(m.autocorrelation(m.ou_tau_c)), rel=0.05)
    if order == 1:
        assert float(m.autocorrelation(m.ou_tau_c)) == pytest.approx(m.ou_sigma**2 / np.e)


def test_coarse_step_rejected():
    with pytest.raises(StepSizeError):
        sample_ou(OU, 1.0, OU.ou_tau_c / 5, 0)


def test_batch_rows_independent_of_split():
    full = sample_batch(OU, 40, 0.01, 3, [0, 1, 2, 3])
    part = sample_batch(OU, 40, 0.01, 3, [2, 3])
    assert np.array_equal(full[2:], part)


def test_spectrum_normalisation():
    for order in (1, 2):
        m = NoiseModel(ou_sigma=1.7, ou_tau_c=0.3, spectrum_order=order)
        total, _ = integrate.quad(m.spectrum, -np.inf, np.inf)
        assert total / (2 * np.pi) == pytest.approx(m.ou_sigma**2, rel=1e-8)


def _chi_oracle(model, n, tau):
    """Ideal-pulse CPMG: chi = 2 pi int_0^inf S |Y|^2 with Y from switching times."""
    total = 2 * n * tau
    edges = np.concatenate([[0.0], tau * (2 * np.arange(1, n + 1) - 1), [total]])
    signs = (-1.0) ** np.arange(n + 1)

    def y2(w):
        if w < 1e-9:
            return float(np.sum(signs * np.diff(edges)) ** 2)
        y = np.sum(signs * (np.exp(1j * w * edges[1:]) - np.exp(1j * w * edges[:-1]))) / (1j * w)
        return abs(y) ** 2

    period = 2 * np.pi / total
    w_max = 400 / model.ou_tau_c + 400 * period
    pts = np.arange(period, w_max, period)[:2000]
    val, _ = integrate.quad(lambda w: model.spectrum(w) * y2(w), 0, w_max, points=pts, limit=5000)
    return 2 * np.pi * val


@pytest.mark.parametrize("order", [1, 2])
@pytest.mark.parametrize("n,tau", [(1, 0.05), (4, 0.02), (16, 0.01)])
def test_dephasing_exponent_matches_quadrature_oracle(order, n, tau):
    m = NoiseModel(ou_sigma=3.0, ou_tau_c=0.2, spectrum_order=order)
    assert dephasing_exponent(m, n, tau) == pytest.approx(_chi_oracle(m, n, tau), rel=1e-4)


@pytest.mark.parametrize("order", [1, 2])
def test_free_dephasing_matches_autocorrelation_integral(order):
    m = NoiseModel(ou_sigma=1.3, ou_tau_c=0.4, spectrum_order=order)
    for t in (1e-4, 0.05, 0.4, 3.0):
        var, _ = integrate.quad(lambda u: (t - u) * m.autocorrelation(u), 0, t)
        assert free_dephasing_exponent(m, t) == pytest.approx((2 * np.pi) ** 2 * var, rel=1e-6)


def test_analytic_coherence_limits():
    assert cpmg_coherence_analytic(4, 0.1, NoiseModel(ou_sigma=0.0), relaxation=False) == 1.0
    m = NoiseModel(ou_sigma=2.0, ou_tau_c=1.0, spectrum_order=1)
    total = 2.0
    c = [cpmg_coherence_analytic(n, total / (2 * n), m, relaxation=False) for n in (1, 4, 16, 64, 256)]
    assert np.all(np.diff(c) > 0) and c[-1] > 0.99


def test_lorentzian_t2_scaling_exponent():
    # tau_c far beyond every spacing: the N^(2/3) regime
    m = NoiseModel(ou_sigma=0.05, ou_tau_c=1e4, spectrum_order=1, t1_electron=np.inf)
    ns = [1, 2, 4, 8, 16, 32, 64]
    t2 = [analytic_t2(m, n, relaxation=False) for n in ns]
    assert fit_power_law(ns, t2)["beta"] == pytest.approx(2 / 3, abs=0.03)


def test_calibrated_defaults_hit_targets():
    m = NoiseModel()
    assert (m.ou_sigma, m.ou_tau_c) == (CAL_SIGMA, CAL_TAU_C)
    assert analytic_t2(m, 1, DEFAULT_T_PI, DEFAULT_T_PI / 2) == pytest.approx(0.148, rel=1e-5)
    assert analytic_t2(m, 1024, DEFAULT_T_PI, DEFAULT_T_PI / 2) == pytest.approx(38.0, rel=1e-5)


def test_noise_model_validation():
    with pytest.raises(ConfigurationError) as err:
        NoiseModel(ou_sigma=-1.0, ou_tau_c=0.0)
    assert {v[0] for v in err.value.violations} == {"ou_sigma", "ou_tau_c"}
    assert NoiseModel(ou_sigma=1.0).t2_star == pytest.approx(np.sqrt(2) / (2 * np.pi))


def test_relaxation_examples():
    m = NoiseModel(t1_electron=10.0, t1_nuclear=100.0)
    rho = np.diag([1.0, 0, 0, 0]).astype(complex)
    assert np.allclose(relaxation_channel(rho, 0.0, m), rho)
    out = relaxation_channel(rho, 10.0, m)
    e = partial_trace(out, "electron")
    assert (e[0, 0] - e[1, 1]).real == pytest.approx(np.exp(-1), rel=1e-12)
    n = partial_trace(out, "nuclear")
    assert (n[0, 0] - n[1, 1]).real == pytest.approx(np.exp(-0.1), rel=1e-12)


@given(seed=st.integers(0, 2**32 - 1), t1=st.floats(0, 50), t2=st.floats(0, 50))
def test_relaxation_semigroup_trace_positivity(seed, t1, t2):
    m = NoiseModel(t1_electron=13.0, t1_nuclear=170.0)
    rho = random_density(np.random.default_rng(seed))
    two = relaxation_channel(relaxation_channel(rho, t1, m), t2, m)
    one = relaxation_channel(rho, t1 + t2, m)
    assert np.abs(two - one).max() < 1e-12
    assert np.trace(one).real == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.eigvalsh(one).min() > -1e-12


def test_relaxation_coherence_rate():
    m = NoiseModel(t1_electron=10.0, t1_nuclear=np.inf)
    psi = np.array([1, 0, 1, 0]) / np.sqrt(2)  # electron superposition, nucleus up
    out = relaxation_channel(np.outer(psi, psi), 4.0, m)
    assert abs(out[0, 2]) == pytest.approx(0.5 * np.exp(-4.0 / 20.0), rel=1e-12)
