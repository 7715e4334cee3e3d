"""Least-squares fits and spectral estimates used by the protocols."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import least_squares

from .errors import FitError, SamplingError


@dataclass(frozen=True)
class FitResult:
    names: tuple
    values: np.ndarray
    errors: np.ndarray
    units: tuple
    residual_norm: float
    converged: bool
    iterations: int
    model: object = field(repr=False, default=None)
    flags: tuple = ()

    def __getitem__(self, name):
        return float(self.values[self.names.index(name)])

    def error(self, name):
        return float(self.errors[self.names.index(name)])

    def __call__(self, x):
        return self.model(np.asarray(x, float), *self.values)

    def as_dict(self):
        out = {n: float(v) for n, v in zip(self.names, self.values)}
        out.update({f"{n}_err": float(e) for n, e in zip(self.names, self.errors)})
        out.update(residual_norm=self.residual_norm, converged=self.converged, iterations=self.iterations)
        if self.flags:
            out["flags"] = list(self.flags)
        return out


def _check_xy(x, y, minimum):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.shape != y.shape or x.ndim != 1:
        raise FitError("x and y must be 1-d arrays of equal length")
    if len(x) < minimum:
        raise FitError(f"need at least {minimum} points, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitError("non-finite data")
    if np.ptp(y) == 0:
        raise FitError("data have zero variance", {"value": float(y[0])})
    return x, y


def _solve(model, x, y, p0, names, units, lower=None, upper=None, x_scale="jac"):
    def resid(p):
        return model(x, *p) - y

    bounds = (-np.inf, np.inf) if lower is None else (lower, upper)
    res = least_squares(resid, p0, bounds=bounds, method="trf", x_scale=x_scale, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
    jac = res.jac
    dof = max(len(x) - len(p0), 1)
    s2 = 2 * res.cost / dof
    try:
        cov = np.linalg.pinv(jac.T @ jac) * s2
        err = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        err = np.full(len(p0), np.nan)
    # first-order optimality is bound-aware, so a parameter pinned at a bound still counts
    scale = max(1.0, float(np.linalg.norm(jac, ord="fro") * np.linalg.norm(y)))
    converged = bool(res.status > 0 and res.optimality <= 1e-6 * scale)
    return FitResult(tuple(names), np.asarray(res.x, float), err, tuple(units), float(np.linalg.norm(res.fun)), converged, int(res.nfev), model)


def fft_peak_frequency(x, y):
    """Frequency of the largest non-DC FFT bin (uniform x assumed)."""
    n = len(x)
    dx = (x[-1] - x[0]) / (n - 1)
    spec = np.abs(np.fft.rfft(y - np.mean(y)))
    freqs = np.fft.rfftfreq(n, dx)
    k = 1 + int(np.argmax(spec[1:]))
    return float(freqs[k])


def damped_cosine(t, amplitude, frequency, phase, decay_rate, offset):
    return amplitude * np.cos(2 * np.pi * frequency * t + phase) * np.exp(-decay_rate * t) + offset


def fit_damped_cosine(x, y, p0=None) -> FitResult:
    """A cos(2 pi f t + phi) exp(-t/tau) + c, seeded from the FFT peak.

    The decay enters as a rate 1/tau so an undamped trace sits at rate 0
    rather than at infinity.
    """
    x, y = _check_xy(x, y, 8)
    if p0 is None:
        f0 = fft_peak_frequency(x, y)
        c0 = float(np.mean(y))
        # best phase and amplitude at f0 by linear least squares
        basis = np.column_stack([np.cos(2 * np.pi * f0 * x), np.sin(2 * np.pi * f0 * x)])
        (a, b), *_ = np.linalg.lstsq(basis, y - c0, rcond=None)
        p0 = [np.hypot(a, b), f0, np.arctan2(-b, a), 0.1 / max(np.ptp(x), 1e-300), c0]
    res = _solve(damped_cosine, x, y, np.asarray(p0, float), ("amplitude", "frequency", "phase", "decay_rate", "offset"), ("", "1/x", "rad", "1/x", ""))
    if res["amplitude"] < 0:  # canonical sign: positive amplitude
        v = res.values.copy()
        v[0], v[2] = -v[0], v[2] + np.pi
        res = FitResult(res.names, v, res.errors, res.units, res.residual_norm, res.converged, res.iterations, res.model, res.flags)
    v = res.values.copy()
    v[2] = np.angle(np.exp(1j * v[2]))
    return FitResult(res.names, v, res.errors, res.units, res.residual_norm, res.converged, res.iterations, res.model, res.flags)


def decay_time(fit: FitResult) -> float:
    rate = fit["decay_rate"]
    return float(1.0 / rate) if rate > 0 else np.inf


N_BOUNDS = (0.5, 4.0)


def stretched_exponential(t, amplitude, t2, n, offset=0.0):
    return amplitude * np.exp(-((np.abs(t) / t2) ** n)) + offset


def fit_stretched_exponential(x, y, fit_offset=True, p0=None) -> FitResult:
    """A exp(-(t/T2)^n) + c with n constrained to [0.5, 4].

    ``fit_offset=False`` pins c = 0 (coherence data decaying to zero). A
    stretch exponent ending on a bound is reported in ``flags``.
    """
    x, y = _check_xy(x, y, 4)
    y0, y1 = y[np.argmin(x)], y[np.argmax(x)]
    c0 = float(min(y0, y1)) if fit_offset else 0.0
    a0 = float(y0 - c0)
    if p0 is None:
        target = c0 + a0 / np.e
        below = np.nonzero((y - target) * np.sign(a0) < 0)[0]
        t2_0 = float(x[below[0]]) if len(below) else float(np.max(x))
        p0 = [a0, max(t2_0, 1e-12), 2.0] + ([c0] if fit_offset else [])
    lo = [-np.inf, 1e-300, N_BOUNDS[0]] + ([-np.inf] if fit_offset else [])
    hi = [np.inf, np.inf, N_BOUNDS[1]] + ([np.inf] if fit_offset else [])
    names = ("amplitude", "t2", "n") + (("offset",) if fit_offset else ())
    units = ("", "x", "") + (("",) if fit_offset else ())
    model = stretched_exponential
    p0 = np.clip(np.asarray(p0, float), np.array(lo) + 1e-12, np.array(hi) - 1e-12)
    res = _solve(model, x, y, p0, names, units, np.array(lo), np.array(hi))
    flags = []
    n = res["n"]
    if min(abs(n - N_BOUNDS[0]), abs(n - N_BOUNDS[1])) < 1e-6:
        flags.append("n_at_bound")
    if res["t2"] > 10 * np.max(x):
        flags.append("t2_beyond_window")
    return FitResult(res.names, res.values, res.errors, res.units, res.residual_norm, res.converged, res.iterations, model, tuple(flags))


def power_law(n, a, beta):
    return a * np.asarray(n, float) ** beta


def fit_power_law(n, t2) -> FitResult:
    """T2 = a N^beta by ordinary least squares on log-log axes."""
    n, t2 = np.asarray(n, float), np.asarray(t2, float)
    if n.shape != t2.shape or len(n) < 2:
        raise FitError("need at least two (N, T2) pairs")
    if np.any(n <= 0) or np.any(t2 <= 0) or not np.all(np.isfinite(t2)):
        raise FitError("power-law fit needs positive finite data", {"t2": t2.tolist()})
    lx, ly = np.log(n), np.log(t2)
    if np.ptp(lx) == 0:
        raise FitError("all N identical")
    xm = lx.mean()
    sxx = np.sum((lx - xm) ** 2)
    beta = np.sum((lx - xm) * (ly - ly.mean())) / sxx
    icpt = ly.mean() - beta * xm
    resid = ly - (icpt + beta * lx)
    dof = len(n) - 2
    s2 = np.sum(resid**2) / dof if dof > 0 else 0.0
    se_beta = np.sqrt(s2 / sxx)
    se_icpt = np.sqrt(s2 * (1 / len(n) + xm**2 / sxx))
    a = np.exp(icpt)
    return FitResult(("a", "beta"), np.array([a, beta]), np.array([a * se_icpt, se_beta]), ("x", ""), float(np.linalg.norm(resid)), True, 1, power_law)


@dataclass(frozen=True)
class Spectrum:
    frequency: np.ndarray
    magnitude: np.ndarray
    peak_frequency: float
    linewidth: float  # FWHM of |X|^2, same units as frequency
    samples: int = 0  # length of the record before padding


def spectrum_and_linewidth(t, p, pad=8) -> Spectrum:
    """Hann-windowed magnitude spectrum of a uniformly sampled trace.

    The mean is removed first and the record is zero-padded ``pad`` times
    to interpolate the line shape; the peak comes from a parabola through
    the top three bins of the power, the width from linear interpolation
    of the half-power crossings. A Hann-windowed pure tone gives a width of
    about 1.44 / (N dt).
    """
    t, p = np.asarray(t, float), np.asarray(p, float)
    if t.ndim != 1 or t.shape != p.shape or len(t) < 4:
        raise SamplingError("need matching 1-d arrays with at least 4 samples")
    steps = np.diff(t)
    dt = float(np.mean(steps))
    if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise SamplingError("time axis is not uniformly sampled")
    n = len(t)
    x = (p - p.mean()) * np.hanning(n)
    m = pad * n
    mag = np.abs(np.fft.rfft(x, m))
    freqs = np.fft.rfftfreq(m, dt)
    power = mag**2
    k = int(np.argmax(power[1:])) + 1
    if 1 <= k < len(power) - 1:
        a, b, c = power[k - 1], power[k], power[k + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
    else:
        shift = 0.0
    df = freqs[1] - freqs[0]
    peak = float(freqs[k] + shift * df)
    half = power[k] / 2
    i = k
    while i > 0 and power[i] > half:
        i -= 1
    j = k
    while j < len(power) - 1 and power[j] > half:
        j += 1

    def cross(i0, i1):
        y0, y1 = power[i0], power[i1]
        return freqs[i0] + (half - y0) * (freqs[i1] - freqs[i0]) / (y1 - y0) if y1 != y0 else freqs[i0]

    left = cross(i, i + 1)
    right = cross(j - 1, j)
    return Spectrum(freqs, mag, peak, float(right - left), n)


def spectral_peak_significance(spec: Spectrum) -> float:
    """Gaussian-equivalent significance of the tallest spectral peak.

    White-noise power per bin is exponential, with mean estimated robustly
    as median / ln 2. The chance that any of the ~n/2 independent bins
    beats the observed peak is converted to a one-sided z-score, so pure
    noise sits below 5 almost always.
    """
    power = spec.magnitude[1:] ** 2
    mean = np.median(power) / np.log(2)
    if mean <= 0:
        return np.inf
    independent = max(1, spec.samples // 2)
    p_any = -np.expm1(independent * np.log1p(-np.exp(-power.max() / mean)))
    return float(stats.norm.isf(max(p_any, 1e-300)))
