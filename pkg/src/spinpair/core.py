"""Static physics of the electron / 13C pair.

Conventions used throughout the package:

* frequencies and Hamiltonian entries in MHz (plain, not angular),
  durations in microseconds, fields in tesla;
* two-qubit basis order ``[up_e up_n, up_e dn_n, dn_e up_n, dn_e dn_n]``
  with the electron as the first tensor factor and "up" the +1/2 state;
* the logical qubit basis of a coupled system is the set of dressed
  eigenstates of the static Hamiltonian, each assigned to the product
  state it overlaps most and phased so that overlap is real positive.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.optimize import least_squares

from .errors import ConfigurationError, DegeneracyError, DomainError
from .readout import ReadoutModel

GAMMA_E = 28024.95  # MHz/T
GAMMA_C13 = 10.7084  # MHz/T

BASIS_LABELS = ("up_up", "up_dn", "dn_up", "dn_dn")
BASIS_HEADER = "basis order: |up_e up_n>, |up_e dn_n>, |dn_e up_n>, |dn_e dn_n>"

DEGENERACY_TOL = 1e-6  # MHz

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}
PAULI_LABELS = tuple(a + b for a in "IXYZ" for b in "IXYZ")
PAULI_2Q = np.array([np.kron(PAULI[a], PAULI[b]) for a in "IXYZ" for b in "IXYZ"])

_E2 = np.eye(2)
SX, SY, SZ = (np.kron(PAULI[k] / 2, _E2) for k in "XYZ")
IX, IY, IZ = (np.kron(_E2, PAULI[k] / 2) for k in "XYZ")
S_OPS = (SX, SY, SZ)
I_OPS = (IX, IY, IZ)

# hyperfine tensor fitted to the 141/145 MHz nuclear lines at 73.5 mT,
# see fit_hyperfine(); the MW line gap then equals their sum (286.44 MHz)
FITTED_A_ZZ = -286.44444444444446
FITTED_A_PERP = 151.61095173
FITTED_A_XZ = 0.0


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class HyperfineTensor:
    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.shape != (3, 3):
            raise ConfigurationError([("hyperfine", f"expected 3x3 tensor, got shape {a.shape}")])
        if not np.all(np.isfinite(a)):
            raise ConfigurationError([("hyperfine", "entries must be finite")])
        object.__setattr__(self, "a", _readonly(a))

    @classmethod
    def from_components(cls, a_zz, a_perp, a_xz=0.0):
        """Tensor with A_xx = A_yy = a_perp and a symmetric xz coupling."""
        return cls(np.array([[a_perp, 0.0, a_xz], [0.0, a_perp, 0.0], [a_xz, 0.0, a_zz]]))

    @classmethod
    def fitted(cls):
        return cls.from_components(FITTED_A_ZZ, FITTED_A_PERP, FITTED_A_XZ)


@dataclass(frozen=True)
class SystemConfig:
    """Physical parameters of the two-spin system.

    ``b0_field`` is either a magnitude along z or a 3-vector (T). Relaxation
    times are in seconds here, as a config file would carry them.
    """

    b0_field: Union[float, tuple] = 0.0735
    gamma_e: float = GAMMA_E
    gamma_n: float = GAMMA_C13
    hyperfine: HyperfineTensor = field(default_factory=HyperfineTensor.fitted)
    t1_electron: float = 130e-6
    t1_nuclear: float = 1e-3
    readout: ReadoutModel = field(default_factory=ReadoutModel)

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigurationError(problems)

    def violations(self):
        out = []
        try:
            b = self.field_vector()
        except (TypeError, ValueError):
            return [("b0_field", f"not a scalar or 3-vector: {self.b0_field!r}")]
        if not np.all(np.isfinite(b)):
            out.append(("b0_field", "must be finite"))
        elif np.linalg.norm(b) <= 0:
            out.append(("b0_field", "magnitude must be > 0"))
        for name in ("gamma_e", "gamma_n", "t1_electron", "t1_nuclear"):
            v = getattr(self, name)
            if not isinstance(v, (int, float, np.floating)) or not np.isfinite(v):
                out.append((name, f"must be a finite number, got {v!r}"))
        for name in ("gamma_e", "t1_electron", "t1_nuclear"):
            v = getattr(self, name)
            if isinstance(v, (int, float, np.floating)) and np.isfinite(v) and v <= 0:
                out.append((name, f"must be > 0, got {v!r}"))
        return out

    def field_vector(self) -> np.ndarray:
        b = np.asarray(self.b0_field, dtype=float)
        if b.ndim == 0:
            return np.array([0.0, 0.0, float(b)])
        if b.shape != (3,):
            raise ValueError("b0_field must be scalar or length 3")
        return b

    def snapshot(self) -> dict:
        return {
            "b0_field": np.asarray(self.b0_field, float).tolist(),
            "gamma_e": self.gamma_e,
            "gamma_n": self.gamma_n,
            "hyperfine": self.hyperfine.a.tolist(),
            "t1_electron": self.t1_electron,
            "t1_nuclear": self.t1_nuclear,
            "readout": {"counts_bright": self.readout.counts_bright, "contrast": self.readout.contrast},
        }


@dataclass(frozen=True)
class Hamiltonian4:
    h: np.ndarray
    basis: tuple = BASIS_LABELS

    def __post_init__(self):
        h = np.asarray(self.h, dtype=complex)
        if h.shape != (4, 4):
            raise DomainError(f"Hamiltonian must be 4x4, got {h.shape}")
        scale = max(np.abs(h).max(), 1.0)
        if np.abs(h - h.conj().T).max() > 1e-12 * scale:
            raise DomainError("Hamiltonian is not Hermitian")
        if tuple(self.basis) != BASIS_LABELS:
            raise DomainError("basis ordering is fixed")
        object.__setattr__(self, "h", _readonly(h))

    def shifted(self, c: float) -> "Hamiltonian4":
        return Hamiltonian4(self.h + c * np.eye(4))


def build_hamiltonian(config: SystemConfig) -> Hamiltonian4:
    b = config.field_vector()
    a = config.hyperfine.a
    values = np.concatenate([b, a.ravel(), [config.gamma_e, config.gamma_n]])
    if not np.all(np.isfinite(values)):
        raise ConfigurationError([("system", "non-finite entry")])
    h = np.zeros((4, 4), dtype=complex)
    for k in range(3):
        h += config.gamma_e * b[k] * S_OPS[k] + config.gamma_n * b[k] * I_OPS[k]
        for m in range(3):
            h += a[k, m] * S_OPS[k] @ I_OPS[m]
    return Hamiltonian4(h)


def eigensystem(h):
    """Dressed eigenstates in label order.

    Returns ``(energies, vectors)`` where column ``k`` of ``vectors`` is the
    eigenstate assigned to ``BASIS_LABELS[k]``.
    """
    h = getattr(h, "h", h)
    w, v = np.linalg.eigh(h)
    if np.min(np.diff(w)) < DEGENERACY_TOL:
        raise DegeneracyError(f"eigenvalues closer than {DEGENERACY_TOL} MHz")
    weight = np.abs(v) ** 2  # weight[basis, eigen]
    best = max(itertools.permutations(range(4)), key=lambda p: sum(weight[p[k], k] for k in range(4)))
    # best[k] is the basis label taken by eigenvector k
    order = np.argsort(best)
    energies = w[order]
    vectors = v[:, order].copy()
    for k in range(4):
        c = vectors[k, k]
        vectors[:, k] *= np.conj(c) / abs(c)
    return energies, vectors


@dataclass(frozen=True)
class Transition:
    label: str
    frequency: float  # MHz
    states: tuple  # (i, j) label indices, i < j
    matrix_element: float  # |<i|V|j>|, bare value 1/2
    element_phase: float  # arg <i|V|j>
    channel: str  # "MW" or "RF"
    upper: int  # label index of the higher-energy state

    @property
    def enhancement(self) -> float:
        return self.matrix_element / 0.5


@dataclass(frozen=True)
class TransitionTable:
    entries: dict
    energies: np.ndarray
    vectors: np.ndarray
    drive_operators: dict  # channel -> 4x4 operator in the dressed basis

    def __getitem__(self, label) -> Transition:
        return self.entries[label]

    def __iter__(self):
        return iter(self.entries.values())

    @property
    def labels(self):
        return tuple(self.entries)

    def frequencies(self):
        return {k: t.frequency for k, t in self.entries.items()}

    def condition(self, label):
        """Which state of the *other* qubit a transition is conditioned on."""
        i, j = self.entries[label].states
        if self.entries[label].channel == "MW":
            return BASIS_LABELS[i].split("_")[1]
        return BASIS_LABELS[i].split("_")[0]


def drive_operator(channel: str, config: SystemConfig) -> np.ndarray:
    """Spin operator a linearly polarised x field couples to, normalised so
    the addressed species enters with unit weight."""
    if channel == "MW":
        return SX + (config.gamma_n / config.gamma_e) * IX
    if channel == "RF":
        return IX + (config.gamma_e / config.gamma_n) * SX
    raise ValueError(f"no drive operator for channel {channel!r}")


def transition_table(h: Hamiltonian4, config: SystemConfig) -> TransitionTable:
    energies, vecs = eigensystem(h)
    sx = vecs.conj().T @ SX @ vecs
    ix = vecs.conj().T @ IX @ vecs
    ops = {ch: vecs.conj().T @ drive_operator(ch, config) @ vecs for ch in ("MW", "RF")}
    pairs = list(itertools.combinations(range(4), 2))
    mw = sorted(pairs, key=lambda p: -abs(sx[p]))[:2]
    rest = [p for p in pairs if p not in mw]
    rf = sorted(rest, key=lambda p: -abs(ix[p]))[:2]
    if set(mw[0]) & set(mw[1]) or set(rf[0]) & set(rf[1]):
        raise DegeneracyError("transition classification is ambiguous")
    entries = {}
    for channel, group in (("MW", mw), ("RF", rf)):
        group = sorted(group, key=lambda p: abs(energies[p[1]] - energies[p[0]]))
        for n, (i, j) in enumerate(group, start=1):
            el = ops[channel][i, j]
            entries[f"{channel}{n}"] = Transition(
                label=f"{channel}{n}",
                frequency=float(abs(energies[j] - energies[i])),
                states=(i, j),
                matrix_element=float(abs(el)),
                element_phase=float(np.angle(el)),
                channel=channel,
                upper=j if energies[j] > energies[i] else i,
            )
    return TransitionTable(entries, _readonly(energies), _readonly(vecs), {k: _readonly(v) for k, v in ops.items()})


# -- states ---------------------------------------------------------------


def _check_physical(rho, tol=1e-10):
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise DomainError(f"density matrix must be 4x4, got {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise DomainError("density matrix has non-finite entries")
    if np.abs(rho - rho.conj().T).max() > tol:
        raise DomainError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1) > tol:
        raise DomainError(f"trace {np.trace(rho).real:.3g} != 1")
    lam = np.linalg.eigvalsh((rho + rho.conj().T) / 2)
    if lam.min() < -tol:
        raise DomainError(f"negative eigenvalue {lam.min():.3g}")
    return rho


@dataclass(frozen=True)
class DensityMatrix4:
    rho: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", _readonly(_check_physical(self.rho)))

    @classmethod
    def from_ket(cls, psi):
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))

    @classmethod
    def basis_state(cls, label):
        k = BASIS_LABELS.index(label)
        return cls.from_ket(np.eye(4)[k])

    @classmethod
    def maximally_mixed(cls):
        return cls(np.eye(4) / 4)

    @classmethod
    def coerce(cls, rho, tol=1e-10):
        """Accept a DensityMatrix4 or array; tidy tiny numerical drift."""
        if isinstance(rho, cls):
            return rho
        rho = np.asarray(rho, dtype=complex)
        rho = (rho + rho.conj().T) / 2
        return cls(rho / np.trace(rho).real)

    def populations(self):
        return np.real(np.diag(self.rho)).copy()


@dataclass(frozen=True)
class UnconstrainedEstimate:
    """Hermitian, unit-trace estimate that may have negative eigenvalues."""

    rho: np.ndarray

    @property
    def eigenvalues(self):
        return np.linalg.eigvalsh(self.rho)

    @property
    def is_physical(self):
        return bool(self.eigenvalues.min() >= -1e-10)


BELL_KINDS = ("psi+", "psi-", "phi+", "phi-")
_BELL_ALIASES = {"Ψ+": "psi+", "Ψ-": "psi-", "Ψ−": "psi-", "Φ+": "phi+", "Φ-": "phi-", "Φ−": "phi-"}


def normalize_bell_kind(kind: str) -> str:
    k = _BELL_ALIASES.get(kind, str(kind).lower().replace("−", "-"))
    if k not in BELL_KINDS:
        raise ValueError(f"unknown Bell state {kind!r}")
    return k


def bell_ket(kind: str) -> np.ndarray:
    k = normalize_bell_kind(kind)
    sign = 1.0 if k.endswith("+") else -1.0
    psi = np.zeros(4, dtype=complex)
    if k.startswith("psi"):
        psi[0], psi[3] = 1, sign
    else:
        psi[1], psi[2] = 1, sign
    return psi / np.sqrt(2)


def bell_state(kind: str) -> DensityMatrix4:
    return DensityMatrix4.from_ket(bell_ket(kind))


def _as_physical(rho):
    if isinstance(rho, DensityMatrix4):
        return rho.rho
    return _check_physical(rho)


def _psd_sqrt(m):
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T


def fidelity(rho, target) -> float:
    """Uhlmann fidelity Tr sqrt(sqrt(target) rho sqrt(target)) (not squared)."""
    rho, target = _as_physical(rho), _as_physical(target)
    s = _psd_sqrt(target)
    lam = np.linalg.eigvalsh(s @ rho @ s)
    return float(np.clip(np.sum(np.sqrt(np.clip(lam, 0, None))), 0.0, 1.0))


def partial_trace(rho, keep: str) -> np.ndarray:
    r = np.asarray(getattr(rho, "rho", rho)).reshape(2, 2, 2, 2)
    if keep == "electron":
        return np.einsum("ajbj->ab", r)
    if keep == "nuclear":
        return np.einsum("jajb->ab", r)
    raise ValueError("keep must be 'electron' or 'nuclear'")


def pauli_expectations(rho) -> np.ndarray:
    """<sigma_i (x) sigma_j> for i, j in I, X, Y, Z; index 4*i + j."""
    r = np.asarray(getattr(rho, "rho", rho))
    return np.real(np.einsum("kab,ba->k", PAULI_2Q, r))


def from_pauli_expectations(c) -> np.ndarray:
    return np.einsum("k,kab->ab", np.asarray(c, dtype=float), PAULI_2Q) / 4


def trace_distance(a, b) -> float:
    d = np.asarray(getattr(a, "rho", a)) - np.asarray(getattr(b, "rho", b))
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh((d + d.conj().T) / 2))))


# -- hyperfine fit -----------------------------------------------------------


def nuclear_line_frequencies(config: SystemConfig):
    table = transition_table(build_hamiltonian(config), config)
    return table["MW2"].frequency - table["MW1"].frequency, table["RF1"].frequency, table["RF2"].frequency


def fit_hyperfine(
    b0=0.0735,
    mw_gap=290.0,
    rf_lines=(141.0, 145.0),
    sigmas=(2.0, 0.5, 0.5),
    x0=(-290.0, 150.0, 0.0),
    a_xz=0.0,
):
    """Weighted least squares for (A_zz, A_perp, A_xz) against exact
    diagonalization.

    The MW gap of a four-level system always equals the sum of the two
    nuclear lines, so the three targets are not independent: a
    one-parameter family of tensors fits equally well. By default A_xz is
    pinned (``a_xz=0``) to select one member; pass ``a_xz=None`` to leave it
    free, in which case the solver stops somewhere along the family.
    Returns ``(HyperfineTensor, scipy result)``.
    """

    def unpack(p):
        return (p[0], p[1], p[2] if a_xz is None else a_xz)

    def residuals(p):
        cfg = SystemConfig(b0_field=b0, hyperfine=HyperfineTensor.from_components(*unpack(p)))
        gap, rf1, rf2 = nuclear_line_frequencies(cfg)
        return [
            (gap - mw_gap) / sigmas[0],
            (rf1 - rf_lines[0]) / sigmas[1],
            (rf2 - rf_lines[1]) / sigmas[2],
        ]

    start = np.asarray(x0 if a_xz is None else x0[:2], float)
    res = least_squares(residuals, start, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return HyperfineTensor.from_components(*unpack(res.x)), res
