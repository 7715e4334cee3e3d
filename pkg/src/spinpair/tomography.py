"""Two-qubit state tomography with electron-only fluorescence readout.

Every setting ends in the same measurement, the electron |up> population.
Electron Pauli components are rotated onto z with local (dual-tone) pi/2
gates; nuclear components are first rotated with a pair of selective RF
gates (one per electron manifold, together a local nuclear rotation) and
then copied onto the electron, by a SWAP for ``I sigma`` settings and by a
c-NOT_e (which turns Z_e into -Z_e Z_n) for product settings.

The measurement operator of each setting is computed from the compiled
pulses, so reconstruction solves against what the pulses actually measure
rather than against an idealised Pauli.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .core import PAULI_2Q, PAULI_LABELS, DensityMatrix4, UnconstrainedEstimate, fidelity
from .errors import ConsistencyError, ConvergenceError, DomainError
from .pulses import IDENTITY_CALIBRATION, GateSpec, PulseSequence, compile_program, sel_n
from .readout import ReadoutModel

UP_E = np.diag([1.0, 1.0, 0.0, 0.0]).astype(complex)

# local electron rotation taking the named Pauli onto z
_E_ROT = {"I": [], "Z": [], "X": [GateSpec("LOCAL_E_PI2", axis_phase="-y")], "Y": [GateSpec("LOCAL_E_PI2", axis_phase="+x")]}


def _n_rot(pauli):
    if pauli == "X":
        return [sel_n("RF1", np.pi / 2, "-y"), sel_n("RF2", np.pi / 2, "-y")]
    if pauli == "Y":
        return [sel_n("RF1", np.pi / 2, "+x"), sel_n("RF2", np.pi / 2, "+x")]
    return []


@dataclass(frozen=True)
class MeasurementSetting:
    label: str
    gates: tuple
    pre_rotation: PulseSequence
    mapping_note: str
    povm: np.ndarray = field(repr=False, default=None)  # electron-up projector pulled back


def setting_gates(label):
    e, n = label
    if label == "II":
        # Pi_dn of the electron: together with ZI this fixes the trace
        return [GateSpec("LOCAL_E_PI")], "electron flipped: reads the |dn> projector"
    if n == "I":
        return list(_E_ROT[e]), "electron only"
    if e == "I":
        return _n_rot(n) + [GateSpec("SWAP")], "nucleus swapped onto electron"
    return list(_E_ROT[e]) + _n_rot(n) + [GateSpec("CNOT_E")], "c-NOT_e parity mapping (-Z_e Z_n)"


def setting_unitary(seq, h=None, config=None):
    """Interaction-frame unitary of a noiseless pre-rotation, column by column."""
    from .propagate import engine

    eng = engine(h, config)
    u = np.eye(4, dtype=complex)
    t = 0.0
    for seg in seq:
        if seg.channel in ("MW", "RF") and seg.duration > 0:
            u = eng.segment_unitary(seg, t)[0] @ u
        t += seg.duration
    return u


def measurement_settings(table, calib=IDENTITY_CALIBRATION, drive=None, h=None, config=None):
    """The 16 settings, labelled electron-Pauli then nuclear-Pauli."""
    settings = []
    for label in PAULI_LABELS:
        gates, note = setting_gates(label)
        seq = compile_program(gates, table, calib, drive)
        u = setting_unitary(seq, h, config)
        povm = u.conj().T @ UP_E @ u
        settings.append(MeasurementSetting(label, tuple(gates), seq, note, povm))
    gram = design_matrix(settings)
    if np.linalg.matrix_rank(gram, tol=1e-8) < 16:
        raise ConsistencyError("measurement settings are not informationally complete")
    return tuple(settings)


def design_matrix(settings):
    """A[s, k] = Tr(E_s P_k) / 4, so that p_s = A @ c for Pauli vector c."""
    e = np.array([s.povm for s in settings])
    return np.real(np.einsum("sab,kba->sk", e, PAULI_2Q)) / 4


@dataclass(frozen=True)
class TomogramData:
    labels: tuple
    counts_signal: np.ndarray
    counts_reference: np.ndarray
    shots: int
    povm: np.ndarray  # (16, 4, 4)

    def __post_init__(self):
        s, r = np.asarray(self.counts_signal, float), np.asarray(self.counts_reference, float)
        if len(self.labels) != 16 or s.shape != (16,) or r.shape != (16,) or np.shape(self.povm) != (16, 4, 4):
            raise DomainError("tomogram needs all 16 settings")
        if int(self.shots) < 1:
            raise DomainError("shots must be >= 1")
        object.__setattr__(self, "counts_signal", s)
        object.__setattr__(self, "counts_reference", r)

    def populations(self, readout: ReadoutModel):
        scale = self.shots * readout.counts_bright * readout.contrast
        return (self.counts_reference - self.counts_signal) / scale


def simulate_tomography(rho_true, settings, readout: ReadoutModel, shots, seed, noisy=None):
    """Poisson counts for every setting.

    ``shots=None`` gives the infinite-statistics limit (expected counts per
    shot). ``noisy`` may be a callable ``(setting, index) -> rho_after``
    replacing the ideal pre-rotation, e.g. a noisy trajectory average.
    """
    rho = np.asarray(getattr(rho_true, "rho", rho_true))
    if not isinstance(rho_true, DensityMatrix4):
        DensityMatrix4.coerce(rho)
    p = np.empty(16)
    for k, st in enumerate(settings):
        if noisy is None:
            p[k] = np.real(np.trace(st.povm @ rho))
        else:
            after = np.asarray(getattr(noisy(st, k), "rho", noisy(st, k)))
            p[k] = np.real(after[0, 0] + after[1, 1])
    p = np.clip(p, 0.0, 1.0)
    labels = tuple(s.label for s in settings)
    povm = np.array([s.povm for s in settings])
    if shots is None:
        return TomogramData(labels, readout.mean_counts(p), np.full(16, readout.counts_bright), 1, povm)
    rng = np.random.default_rng(seed)
    sig = rng.poisson(shots * readout.mean_counts(p))
    ref = rng.poisson(np.full(16, shots * readout.counts_bright))
    return TomogramData(labels, sig, ref, int(shots), povm)


def _design(data):
    return np.real(np.einsum("sab,kba->sk", data.povm, PAULI_2Q)) / 4


def estimate_correlators(data: TomogramData, readout: ReadoutModel):
    """Pauli vector (entry 0 fixed to 1) by least squares on the settings."""
    a = _design(data)
    p = data.populations(readout)
    c_rest, *_ = np.linalg.lstsq(a[:, 1:], p - a[:, 0], rcond=None)
    return np.concatenate([[1.0], c_rest])


def linear_inversion(data: TomogramData, readout: ReadoutModel = None) -> UnconstrainedEstimate:
    readout = readout or ReadoutModel()
    c = estimate_correlators(data, readout)
    rho = np.einsum("k,kab->ab", c, PAULI_2Q) / 4
    return UnconstrainedEstimate((rho + rho.conj().T) / 2)


def project_to_physical(rho):
    """Closest physical state in the 2-norm: clip eigenvalues onto the
    simplex (sorted water-filling)."""
    rho = np.asarray(getattr(rho, "rho", rho))
    w, v = np.linalg.eigh((rho + rho.conj().T) / 2)
    u = np.sort(w)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.nonzero(u - css / np.arange(1, 5) > 0)[0][-1]
    lam = np.clip(w - css[k] / (k + 1), 0, None)
    return DensityMatrix4.coerce((v * lam) @ v.conj().T)


def _rates(rho, data, readout):
    p = np.real(np.einsum("sab,ba->s", data.povm, rho))
    return data.shots * readout.mean_counts(np.clip(p, 0.0, 1.0))


def log_likelihood(rho, data: TomogramData, readout: ReadoutModel) -> float:
    """Poisson log-likelihood of the signal counts (reference counts do not
    depend on the state and are dropped)."""
    rho = np.asarray(getattr(rho, "rho", rho))
    lam = _rates(rho, data, readout)
    return float(np.sum(data.counts_signal * np.log(lam) - lam))


def _unpack(x):
    t = np.zeros((4, 4), dtype=complex)
    il = np.tril_indices(4)
    n = len(il[0])
    t[il] = x[:n] + 1j * x[n:]
    return t


def mle_reconstruct(data: TomogramData, readout: ReadoutModel = None, maxiter=5000, gtol=1e-8) -> DensityMatrix4:
    """Maximum-likelihood state with rho = T T^dag / Tr(T T^dag).

    L-BFGS on the count-normalised negative log-likelihood, started twice:
    from the maximally mixed state and from the projected linear-inversion
    estimate. The better optimum wins. The second start matters for nearly
    pure states, where T's small entries make the gradient vanish long
    before the eigenvalues reach zero.
    """
    readout = readout or ReadoutModel()
    il = np.tril_indices(4)
    n = len(il[0])
    norm = max(float(np.sum(data.counts_signal)), 1.0)
    k = data.shots * readout.counts_bright * readout.contrast
    s = data.counts_signal

    def objective(x):
        t = _unpack(x)
        m = t @ t.conj().T
        tr = np.real(np.trace(m))
        rho = m / tr
        lam = _rates(rho, data, readout)
        f = -np.sum(s * np.log(lam) - lam) / norm
        # dL/drho = sum_s (s/lam - 1) * (-k E_s)
        g_rho = -np.einsum("s,sab->ab", (s / lam - 1.0) * (-k), data.povm) / norm
        g_m = (g_rho - np.real(np.trace(g_rho @ rho)) * np.eye(4)) / tr
        g_t = 2 * (g_m @ t)  # gradient w.r.t. conj(T), Hermitian g_m
        gt = g_t[il]
        return f, np.concatenate([gt.real, gt.imag])

    def start(rho):
        t = np.linalg.cholesky(rho)[il]
        return np.concatenate([t.real, t.imag])

    warm = project_to_physical(linear_inversion(data, readout).rho).rho
    best = None
    for x0 in (start(np.eye(4) / 4), start((1 - 1e-12) * warm + 1e-12 * np.eye(4) / 4)):
        res = minimize(objective, x0, jac=True, method="L-BFGS-B", options={"maxiter": maxiter, "gtol": gtol * 1e-2, "ftol": 1e-16, "maxcor": 30})
        if best is None or res.fun < best.fun:
            best = res
    t = _unpack(best.x)
    m = t @ t.conj().T
    rho = m / np.real(np.trace(m))
    gnorm = float(np.linalg.norm(best.jac))
    # a stalled line search at the likelihood's floating-point floor is fine;
    # only running out of iterations counts as failure
    if gnorm > gtol and best.nit >= maxiter:
        raise ConvergenceError(f"MLE stopped after {best.nit} iterations", last_iterate=rho, gradient_norm=gnorm)
    return DensityMatrix4.coerce(rho)


def pseudo_pure_decomposition(rho):
    """(epsilon, rho_pp) with rho = (1 - eps) I/4 + eps rho_pp.

    eps = 1 - 4 lambda_min removes the largest identity fraction that
    leaves rho_pp positive semidefinite.
    """
    rho = np.asarray(getattr(rho, "rho", rho))
    lam_min = float(np.linalg.eigvalsh((rho + rho.conj().T) / 2).min())
    eps = 1.0 - 4.0 * max(lam_min, 0.0)
    if eps <= 1e-12:
        raise DomainError("state is maximally mixed: no pseudo-pure part")
    pp = (rho - (1 - eps) * np.eye(4) / 4) / eps
    return eps, DensityMatrix4.coerce(pp, tol=1e-8)


def pseudo_pure_fidelity(rho, target) -> float:
    _, pp = pseudo_pure_decomposition(rho)
    return fidelity(pp, target)


def format_matrix(rho, title=""):
    """4x4 real and imaginary blocks in basis order, as plain text."""
    from .core import BASIS_HEADER

    rho = np.asarray(getattr(rho, "rho", rho))
    lines = [f"# {title}".rstrip(), f"# {BASIS_HEADER}", "# real part"]
    lines += [" ".join(f"{v:+.6f}" for v in row) for row in rho.real]
    lines.append("# imaginary part")
    lines += [" ".join(f"{v:+.6f}" for v in row) for row in rho.imag]
    return "\n".join(lines) + "\n"
