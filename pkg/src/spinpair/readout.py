"""Spin-dependent photoluminescence readout with Poisson shot noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class ReadoutModel:
    """Photon statistics of one readout window.

    ``counts_bright`` is the mean number of detected photons per shot with
    the electron in |dn>; an electron in |up> reduces that by the fraction
    ``contrast``.
    """

    counts_bright: float = 20.0
    contrast: float = 0.3

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigurationError(problems)

    def violations(self):
        out = []
        cb, c = self.counts_bright, self.contrast
        if not np.isfinite(cb) or cb <= 0:
            out.append(("counts_bright", f"must be > 0, got {cb!r}"))
        if not np.isfinite(c) or not 0 < c < 1:
            out.append(("contrast", f"must lie in (0, 1), got {c!r}"))
        return out

    def mean_counts(self, p_up):
        return self.counts_bright * (1.0 - self.contrast * np.asarray(p_up, dtype=float))


def electron_up_population(rho) -> float:
    rho = getattr(rho, "rho", rho)
    rho = np.asarray(rho)
    return float(np.real(rho[..., 0, 0] + rho[..., 1, 1]))


def simulate_readout(rho, readout: ReadoutModel, shots: int, seed):
    """Sample photon totals for ``shots`` repetitions of ``rho``.

    Returns ``(counts_signal, counts_reference, p_estimate)``. The reference
    totals come from an interleaved shot with the electron left in |dn>
    (p = 0). The estimate divides the reference-minus-signal difference by
    the model's expected full-contrast difference, which keeps it unbiased
    for any shot count.
    """
    if int(shots) < 1:
        raise ValueError("shots must be >= 1")
    shots = int(shots)
    rng = np.random.default_rng(seed)
    p = float(np.clip(electron_up_population(rho), 0.0, 1.0))
    counts_signal = int(rng.poisson(shots * readout.mean_counts(p)))
    counts_reference = int(rng.poisson(shots * readout.counts_bright))
    p_hat = population_estimate(counts_signal, counts_reference, shots, readout)
    return counts_signal, counts_reference, p_hat


def population_estimate(counts_signal, counts_reference, shots, readout: ReadoutModel):
    scale = shots * readout.counts_bright * readout.contrast
    return (np.asarray(counts_reference, float) - np.asarray(counts_signal, float)) / scale
