"""Electron dephasing noise and relaxation.

The dephasing field is a stationary Gaussian process ``delta(t)`` (MHz)
adding ``delta * S_z`` to the Hamiltonian. Order 1 is the Ornstein-Uhlenbeck
process with a Lorentzian spectrum; order 2 passes it through a second
identical low-pass stage, giving ``S(w) = C / (1 + w^2 tau_c^2)^2``. The
second form has a steeper high-frequency tail, which is what lets long CPMG
trains beat the N^(2/3) ceiling of the Lorentzian.

Spectra use angular frequency (rad/us) and are normalised so that
``integral S(w) dw / 2pi = sigma^2``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, optimize

from .errors import ConfigurationError, NumericError, StepSizeError

# (sigma MHz, tau_c us) for the order-2 default, from calibrate_noise()
CAL_SIGMA = 5.4733084
CAL_TAU_C = 0.11471277

DEFAULT_T_PI = 0.020  # us, CPMG pi pulse used for calibration


@dataclass(frozen=True)
class NoiseModel:
    ou_sigma: float = CAL_SIGMA  # MHz, rms detuning
    ou_tau_c: float = CAL_TAU_C  # us
    t1_electron: float = 130.0  # us
    t1_nuclear: float = 1000.0  # us
    spectrum_order: int = 2

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigurationError(problems)

    def violations(self):
        out = []
        if not np.isfinite(self.ou_sigma) or self.ou_sigma < 0:
            out.append(("ou_sigma", f"must be >= 0, got {self.ou_sigma!r}"))
        if not np.isfinite(self.ou_tau_c) or self.ou_tau_c <= 0:
            out.append(("ou_tau_c", f"must be > 0, got {self.ou_tau_c!r}"))
        for name in ("t1_electron", "t1_nuclear"):
            v = getattr(self, name)
            if not (v > 0):
                out.append((name, f"must be > 0, got {v!r}"))
        if self.spectrum_order not in (1, 2):
            out.append(("spectrum_order", f"must be 1 or 2, got {self.spectrum_order!r}"))
        return out

    @classmethod
    def off(cls):
        """No dephasing and no relaxation."""
        return cls(ou_sigma=0.0, t1_electron=np.inf, t1_nuclear=np.inf)

    @property
    def t2_star(self) -> float:
        """1/e time of a free-induction decay in the quasi-static limit."""
        return np.sqrt(2) / (2 * np.pi * self.ou_sigma) if self.ou_sigma > 0 else np.inf

    def without_dephasing(self):
        return replace(self, ou_sigma=0.0)

    def without_relaxation(self):
        return replace(self, t1_electron=np.inf, t1_nuclear=np.inf)

    def spectrum(self, omega):
        tc, k = self.ou_tau_c, self.spectrum_order
        c = (2.0 if k == 1 else 4.0) * self.ou_sigma**2 * tc
        return c / (1.0 + (np.asarray(omega) * tc) ** 2) ** k

    def autocorrelation(self, s):
        x = np.abs(np.asarray(s, dtype=float)) / self.ou_tau_c
        if self.spectrum_order == 1:
            return self.ou_sigma**2 * np.exp(-x)
        return self.ou_sigma**2 * (1 + x) * np.exp(-x)

    def snapshot(self) -> dict:
        return {
            "ou_sigma": self.ou_sigma,
            "ou_tau_c": self.ou_tau_c,
            "t1_electron": self.t1_electron,
            "t1_nuclear": self.t1_nuclear,
            "spectrum_order": self.spectrum_order,
        }


# -- sampling ------------------------------------------------------------------


def _order2_discretization(tau_c, dt):
    """Exact one-step transition and noise covariance of the two-stage filter,
    scaled so the output has unit stationary variance."""
    f = np.array([[-1.0, 0.0], [1.0, -1.0]]) / tau_c
    g = np.array([[1.0], [0.0]])
    p_inf = linalg.solve_continuous_lyapunov(f, -g @ g.T)
    g = g / np.sqrt(p_inf[1, 1])
    p_inf = p_inf / p_inf[1, 1]
    # Van Loan: exp([[-F, GG'], [0, F']] dt)
    m = np.zeros((4, 4))
    m[:2, :2], m[:2, 2:], m[2:, 2:] = -f, g @ g.T, f.T
    e = linalg.expm(m * dt)
    phi = e[2:, 2:].T
    q = phi @ e[:2, 2:]
    return phi, (q + q.T) / 2, p_inf


def trajectory_rng(seed, index):
    """Independent stream for trajectory ``index`` of a run seeded ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def sample_batch(model: NoiseModel, n_steps: int, dt: float, seed, indices):
    """Detuning samples on the grid ``k * dt``, ``k = 0..n_steps``.

    Row ``r`` depends only on ``(seed, indices[r])``, so results do not
    depend on how trajectories are split across workers.
    """
    indices = np.atleast_1d(indices)
    out = np.zeros((len(indices), n_steps + 1))
    if model.ou_sigma == 0:
        return out
    if dt >= model.ou_tau_c / 10:
        raise StepSizeError(f"dt={dt} must be < tau_c/10={model.ou_tau_c / 10}")
    order = model.spectrum_order
    xi = np.stack([trajectory_rng(seed, i).standard_normal((n_steps + 1) * order) for i in indices])
    sigma = model.ou_sigma
    if order == 1:
        a = np.exp(-dt / model.ou_tau_c)
        s = np.sqrt(1 - a * a)
        out[:, 0] = xi[:, 0]
        for k in range(n_steps):
            out[:, k + 1] = a * out[:, k] + s * xi[:, k + 1]
        return sigma * out
    phi, q, p_inf = _order2_discretization(model.ou_tau_c, dt)
    xi = xi.reshape(len(indices), n_steps + 1, 2)
    lq = np.linalg.cholesky(q + 1e-300 * np.eye(2))
    z = xi[:, 0] @ np.linalg.cholesky(p_inf).T
    out[:, 0] = z[:, 1]
    for k in range(n_steps):
        z = z @ phi.T + xi[:, k + 1] @ lq.T
        out[:, k + 1] = z[:, 1]
    return sigma * out


def sample_ou(model: NoiseModel, duration: float, dt: float, seed) -> np.ndarray:
    """One detuning trajectory (MHz) on ``0, dt, ..., >= duration``.

    For order 1 this is the exact OU update
    ``b[k+1] = b[k] exp(-dt/tau_c) + sigma sqrt(1 - exp(-2 dt/tau_c)) xi[k]``
    started from the stationary distribution.
    """
    if duration < 0:
        raise ValueError("duration must be >= 0")
    n = int(np.ceil(duration / dt - 1e-12))
    return sample_batch(model, n, dt, seed, [0])[0]


def cumulative_phase(samples, dt):
    """Running integral of a linearly interpolated trajectory (MHz us)."""
    samples = np.asarray(samples)
    inc = 0.5 * (samples[..., 1:] + samples[..., :-1]) * dt
    head = np.zeros(samples.shape[:-1] + (1,))
    return np.concatenate([head, np.cumsum(inc, axis=-1)], axis=-1)


class DetuningTrace:
    """Batch of trajectories with exact integrals of their linear interpolant."""

    def __init__(self, samples, dt):
        self.samples = np.atleast_2d(np.asarray(samples, dtype=float))
        self.dt = float(dt)
        self.phase = cumulative_phase(self.samples, dt)

    @property
    def batch(self):
        return self.samples.shape[0]

    def integral(self, t):
        """``int_0^t delta`` for every trajectory."""
        n = self.samples.shape[1] - 1
        u = t / self.dt
        k = min(int(np.floor(u)), n - 1) if n > 0 else 0
        if n == 0:
            return self.samples[:, 0] * t
        s = (u - k) * self.dt
        d0, d1 = self.samples[:, k], self.samples[:, k + 1]
        return self.phase[:, k] + d0 * s + (d1 - d0) * s * s / (2 * self.dt)


# -- filter function --------------------------------------------------------------


def _eint(k, d):
    """int_0^d exp(i k s) ds, stable near k = 0."""
    k = np.asarray(k, dtype=float)
    x = k * d
    small = np.abs(x) < 1e-6
    safe = np.where(small, 1.0, k)
    val = np.expm1(1j * x) / (1j * safe)
    series = d * (1 + 0.5j * x - x * x / 6)
    return np.where(small, series, val)


def _cos_ramp(omega, a, c, d):
    """int_0^d cos(a s + c) exp(i omega s) ds."""
    if d == 0:
        return np.zeros_like(omega, dtype=complex)
    return 0.5 * (np.exp(1j * c) * _eint(omega + a, d) + np.exp(-1j * c) * _eint(omega - a, d))


def _dirichlet(x, n):
    """sum_{k<n} exp(i k x), evaluated stably at the poles."""
    half = np.sin(x / 2)
    near = np.abs(half) < 1e-9
    ratio = np.sin(n * x / 2) / np.where(near, 1.0, half)
    m = np.round(x / (2 * np.pi))
    limit = n * np.where(np.mod(m * (n - 1), 2) == 0, 1.0, -1.0)
    return np.exp(1j * (n - 1) * x / 2) * np.where(near, limit, ratio)


def cpmg_sensitivity(omega, n_pulses, tau, t_pi=0.0, t_pi2=0.0):
    """Fourier transform Y(w) of the CPMG sensing function.

    Timing: pi/2 - tau - pi - 2tau - pi ... pi - tau - pi/2, i.e. N units of
    (tau, pi, tau). Inside pulses the sensing function follows the cosine of
    the rotation angle, which is how finite pulse widths enter.
    """
    w = np.asarray(omega, dtype=float)
    n = int(n_pulses)
    period = 2 * tau + t_pi
    unit = _eint(w, tau)
    if t_pi > 0:
        unit = unit + np.exp(1j * w * tau) * _cos_ramp(w, np.pi / t_pi, 0.0, t_pi)
    unit = unit - np.exp(1j * w * (tau + t_pi)) * _eint(w, tau)
    core = unit * _dirichlet(w * period + np.pi, n)
    y = np.exp(1j * w * t_pi2) * core
    if t_pi2 > 0:
        a = np.pi / (2 * t_pi2)
        y = y + _cos_ramp(w, a, -np.pi / 2, t_pi2)
        end = t_pi2 + n * period
        y = y + (-1) ** n * np.exp(1j * w * end) * _cos_ramp(w, a, 0.0, t_pi2)
    return y


_GL8 = np.polynomial.legendre.leggauss(8)
_GL16 = np.polynomial.legendre.leggauss(16)


def _panel_sum(f, edges, rule):
    x, wts = rule
    a, b = edges[:-1, None], edges[1:, None]
    mid, half = (a + b) / 2, (b - a) / 2
    nodes = mid + half * x
    return np.sum(f(nodes) * wts * half)


def _panel_edges(lo, hi, narrow, wide):
    """Panel edges on [lo, hi]: width max(narrow, w / 5) capped at wide."""
    edges, e = [lo], lo
    while e < hi and max(narrow, 0.2 * e) < wide:
        e = min(hi, e + max(narrow, 0.2 * e))
        edges.append(e)
    if e < hi:
        edges.extend(np.linspace(e, hi, int(np.ceil((hi - e) / wide)) + 1)[1:])
    return np.asarray(edges)


def dephasing_exponent(model: NoiseModel, n_pulses, tau, t_pi=0.0, t_pi2=0.0, rtol=1e-6):
    """chi = 2 pi int_0^inf S(w) |Y(w)|^2 dw, by composite Gauss-Legendre.

    Panels stay narrower than the sequence's spectral feature size 2 pi / T;
    near zero they also resolve the noise bandwidth 1/tau_c and then grow
    geometrically, since the spectrum only varies on the scale of w itself
    out there. An 8- versus 16-node comparison supplies the error estimate;
    the upper cut-off comes from the bound |Y| <= TV(y) / w on the sensing
    function's total variation.
    """
    if model.ou_sigma == 0:
        return 0.0
    n = int(n_pulses)
    if n < 1 or tau < 0:
        raise ValueError("need n_pulses >= 1 and tau >= 0")
    total = n * (2 * tau + t_pi) + 2 * t_pi2

    def integrand(w):
        return model.spectrum(w) * np.abs(cpmg_sensitivity(w, n, tau, t_pi, t_pi2)) ** 2

    def chunk(lo, hi, scale):
        for _ in range(4):
            edges = _panel_edges(lo, hi, narrow * scale, wide * scale)
            coarse = _panel_sum(integrand, edges, _GL8)
            fine = _panel_sum(integrand, edges, _GL16)
            if abs(fine - coarse) <= 0.1 * rtol * abs(fine) + 1e-300:
                return fine, scale
            scale /= 2
        raise NumericError(f"filter-function quadrature did not reach rtol={rtol}")

    wide = np.pi / total
    narrow = min(wide, 0.25 / model.ou_tau_c)
    # mean of |Y|^2 far above the sequence's harmonics: sum of squared jumps / w^2
    jumps = 4.0 * n + 2.0
    lo, hi = 0.0, 20 * np.pi / (2 * tau + t_pi) + 20 / model.ou_tau_c
    acc, scale = 0.0, 1.0
    for _ in range(40):
        part, scale = chunk(lo, hi, scale)
        acc += part
        if model.spectrum(hi) * jumps / hi <= 0.1 * rtol * acc:
            return 2 * np.pi * acc
        lo, hi = hi, 2 * hi
    raise NumericError(f"filter-function quadrature did not reach rtol={rtol}")


def free_dephasing_exponent(model: NoiseModel, duration) -> float:
    """Ensemble coherence exponent Var(phi)/2 after free evolution.

    ``phi = 2 pi int_0^T delta``; the double integral of the autocorrelation
    is closed-form for both spectrum orders.
    """
    if model.ou_sigma == 0 or duration <= 0:
        return 0.0
    tc = model.ou_tau_c
    x = duration / tc
    small = x < 1e-3  # closed forms cancel catastrophically; use the series
    if model.spectrum_order == 1:
        g = x * x * (0.5 - x / 6 + x * x / 24) if small else x - 1.0 + np.exp(-x)
    else:
        g = x * x * (0.5 - x * x / 24 + x**3 / 60) if small else 2.0 * x - 3.0 + (x + 3.0) * np.exp(-x)
    var = (2 * np.pi) ** 2 * 2 * model.ou_sigma**2 * tc**2 * g
    return float(var / 2)


def cpmg_coherence_analytic(n_pulses, tau, model: NoiseModel, t_pi=0.0, t_pi2=0.0, relaxation=True) -> float:
    """Coherence exp(-chi) after CPMG-N with half-spacing ``tau`` (us),
    times the electron T1 factor exp(-T / 2 T1) unless ``relaxation`` is off."""
    chi = dephasing_exponent(model, n_pulses, tau, t_pi, t_pi2)
    if relaxation:
        chi += (n_pulses * (2 * tau + t_pi) + 2 * t_pi2) / (2 * model.t1_electron)
    return float(np.exp(-chi))


def cpmg_total_time(n_pulses, tau, t_pi=0.0):
    return n_pulses * (2 * tau + t_pi)


def analytic_t2(model: NoiseModel, n_pulses, t_pi=0.0, t_pi2=0.0, relaxation=True):
    """Total CPMG time (pi pulses only) at which the analytic coherence
    falls to 1/e."""

    def g(log_t):
        t = np.exp(log_t)
        tau = (t / n_pulses - t_pi) / 2
        chi = dephasing_exponent(model, n_pulses, tau, t_pi, t_pi2)
        if relaxation:
            chi += (t + 2 * t_pi2) / (2 * model.t1_electron)
        return chi - 1.0

    lo = np.log(n_pulses * t_pi + 1e-4)
    if g(lo) > 0:
        raise NumericError("coherence already lost with zero free evolution")
    hi = lo + np.log(2.0)
    while g(hi) < 0:
        lo, hi = hi, hi + np.log(2.0)
        if hi > np.log(1e5):
            raise NumericError("no 1/e crossing below 0.1 s")
    return float(np.exp(optimize.brentq(g, lo, hi, xtol=1e-10)))


def calibrate_noise(t2_echo=0.148, t2_long=38.0, n_long=1024, order=2, t_pi=DEFAULT_T_PI, x0=(CAL_SIGMA, CAL_TAU_C)):
    """(sigma, tau_c) reproducing a Hahn-echo and a long-CPMG coherence time,
    with the default electron T1 folded into both."""

    def resid(p):
        m = NoiseModel(ou_sigma=np.exp(p[0]), ou_tau_c=np.exp(p[1]), spectrum_order=order)
        return [
            np.log(analytic_t2(m, 1, t_pi, t_pi / 2) / t2_echo),
            np.log(analytic_t2(m, n_long, t_pi, t_pi / 2) / t2_long),
        ]

    sol = optimize.root(resid, np.log(x0), method="hybr", options={"xtol": 1e-8})
    if not sol.success:
        raise NumericError(f"noise calibration failed: {sol.message}")
    return float(np.exp(sol.x[0])), float(np.exp(sol.x[1]))


# -- relaxation ------------------------------------------------------------------


def _pauli_factors(t, t1):
    if not np.isfinite(t1):
        return np.ones(4)
    z = np.exp(-t / t1)
    x = np.exp(-t / (2 * t1))
    return np.array([1.0, x, x, z])


def relaxation_factors(duration, model: NoiseModel):
    """Pauli-transfer multipliers, shape (4, 4) over (electron, nuclear)."""
    return np.outer(_pauli_factors(duration, model.t1_electron), _pauli_factors(duration, model.t1_nuclear))


@functools.lru_cache(maxsize=256)
def _relaxation_superop(duration, t1_e, t1_n):
    """16x16 matrix acting on row-major flattened density matrices."""
    from .core import PAULI_2Q

    f = np.outer(_pauli_factors(duration, t1_e), _pauli_factors(duration, t1_n)).ravel()
    p = PAULI_2Q.reshape(16, 16)
    # rho -> sum_k f_k Tr(P_k rho) P_k / 4
    return np.einsum("k,ka,kb->ab", f, p, p.conj()) / 4


def relaxation_channel(rho, duration, model: NoiseModel):
    """Independent depolarizing relaxation toward I/4.

    Population differences decay at 1/T1 and coherences at 1/(2 T1) for
    each spin. Accepts a DensityMatrix4 or an array of shape (..., 4, 4).
    """
    from .core import DensityMatrix4

    if duration < 0:
        raise ValueError("duration must be >= 0")
    wrap = isinstance(rho, DensityMatrix4)
    r = np.asarray(rho.rho if wrap else rho, dtype=complex)
    if not (np.isfinite(model.t1_electron) or np.isfinite(model.t1_nuclear)):
        return rho
    sop = _relaxation_superop(float(duration), float(model.t1_electron), float(model.t1_nuclear))
    out = (r.reshape(r.shape[:-2] + (16,)) @ sop.T).reshape(r.shape)
    return DensityMatrix4.coerce(out) if wrap else out
