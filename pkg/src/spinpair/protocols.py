"""Experiment runners: ODMR, Rabi, CPMG, Bell states, AC sensing and
memory-assisted correlation spectroscopy.

Every runner returns photon counts per sweep point next to the interleaved
no-drive reference shots, so populations are always reported normalised.
Noise trajectories use common random numbers across sweep points (the same
trajectory indices at every point), which keeps sweeps smooth and makes the
output independent of how work is split.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.special import jv

from .core import SystemConfig, bell_state, build_hamiltonian, fidelity, normalize_bell_kind, transition_table
from .errors import DomainError, FitError
from .fitting import FitResult, Spectrum, decay_time, fit_damped_cosine, fit_power_law, fit_stretched_exponential, spectrum_and_linewidth
from .noise import NoiseModel, DetuningTrace, analytic_t2, cpmg_sensitivity, dephasing_exponent, sample_batch, trajectory_rng
from .propagate import (
    PERFECT_LASER,
    RESONANCE_WINDOW,
    LaserModel,
    SumTrace,
    _fsum_matrices,
    _run,
    apply_sequence_with_noise,
    engine,
    propagate_exact,
)
from .pulses import (
    IDENTITY_CALIBRATION,
    DriveSettings,
    DualToneCalibration,
    GateSpec,
    PulseSegment,
    SMOOTH,
    PulseSequence,
    Tone,
    compile_gate,
    compile_program,
    effective_rabi,
    idle,
    laser,
    sel_e,
    sel_n,
    synchronized_rf_amplitude,
)
from .readout import simulate_readout
from .records import ExperimentRecord
from .tomography import (
    TomogramData, linear_inversion, measurement_settings, mle_reconstruct, pseudo_pure_decomposition, pseudo_pure_fidelity, simulate_tomography,
)

LASER_INIT = laser("INIT", 1.0)
CPMG_RABI = 25.0  # MHz, dual-tone drive for decoupling pulses (t_pi = 20 ns)

# seed streams: (seed, stream, ...) keeps the random sources independent
_READOUT, _TOMO, _PHASE, _BLOCK1, _BLOCK2 = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class ExperimentSetup:
    """Everything a runner needs besides its sweep parameters.

    ``noise=None`` runs noiseless (a single deterministic trajectory).
    """

    system: SystemConfig = field(default_factory=SystemConfig)
    noise: NoiseModel = None
    drive: DriveSettings = field(default_factory=DriveSettings)
    calibration: DualToneCalibration = IDENTITY_CALIBRATION
    laser: LaserModel = PERFECT_LASER
    trajectories: int = 200
    workers: int = 1

    @cached_property
    def h(self):
        return build_hamiltonian(self.system)

    @cached_property
    def table(self):
        return transition_table(self.h, self.system)

    @property
    def readout(self):
        return self.system.readout

    @property
    def noise_model(self) -> NoiseModel:
        return self.noise if self.noise is not None else NoiseModel.off()

    def sync_drive(self) -> DriveSettings:
        """Drive with the RF amplitude that keeps the neighbouring RF line idle."""
        return replace(self.drive, rf_rabi=synchronized_rf_amplitude(self.table))

    def snapshot(self) -> dict:
        return {
            "system": self.system.snapshot(),
            "noise": None if self.noise is None else self.noise.snapshot(),
            "drive": {"mw_rabi": self.drive.mw_rabi, "rf_rabi": self.drive.rf_rabi, "transfer": [list(p) for p in self.drive.transfer.points]},
            "calibration": {"amplitude_scale_2": self.calibration.amplitude_scale_2, "phase_offset_2": self.calibration.phase_offset_2},
            "laser": {"polarization": self.laser.polarization, "nuclear_depolarization": self.laser.nuclear_depolarization},
            "trajectories": self.trajectories,
        }


def _setup(obj) -> ExperimentSetup:
    if isinstance(obj, ExperimentSetup):
        return obj
    if isinstance(obj, SystemConfig):
        return ExperimentSetup(system=obj)
    if obj is None:
        return ExperimentSetup()
    raise TypeError(f"expected ExperimentSetup or SystemConfig, got {type(obj).__name__}")


def _average(st: ExperimentSetup, seq, seed, *, rho0=None, branches=None, factory=None, stochastic=False, noise_dt=None):
    noise = st.noise_model
    n = st.trajectories if (noise.ou_sigma > 0 or stochastic) else 1
    return apply_sequence_with_noise(
        seq, st.system, noise, n, seed, rho0, h=st.h, laser=st.laser, detuning_factory=factory,
        noise_dt=noise_dt, workers=st.workers, branches=branches,
    )


def _p_up(rho):
    r = getattr(rho, "rho", rho)
    return float(np.clip(np.real(r[0, 0] + r[1, 1]), 0.0, 1.0))


def _read(st, rhos, shots, seed, stream=_READOUT):
    """Counts for a list of states, one readout stream per point."""
    sig, ref, p = [], [], []
    for k, rho in enumerate(rhos):
        s, r, _ = simulate_readout(rho, st.readout, shots, [int(seed), stream, k])
        sig.append(s)
        ref.append(r)
        p.append(_p_up(rho))
    return np.array(sig), np.array(ref), np.array(p)


# -- ODMR and Rabi ------------------------------------------------------------------------


def run_odmr(setup, mw_span=(1850.0, 2280.0), points=216, shots=2000, seed=0, rabi=1.0, duration=None) -> ExperimentRecord:
    """Pulsed ODMR: a fixed-length MW pulse swept in frequency.

    The pulse is a pi pulse at effective Rabi frequency ``rabi`` when on
    resonance. Frequencies more than the rotating-frame window away from
    every MW line leave the state untouched and are simulated as a delay.
    """
    st = _setup(setup)
    freqs = np.linspace(mw_span[0], mw_span[1], int(points))
    mw = [st.table[k] for k in ("MW1", "MW2")]
    amp = rabi / (2 * mw[0].matrix_element)
    duration = 0.5 / rabi if duration is None else float(duration)
    rhos = []
    for f in freqs:
        near = min(abs(f - t.frequency) for t in mw)
        pulse = PulseSegment("MW", duration, (Tone(float(f), amp, 0.0),)) if near < RESONANCE_WINDOW else idle(duration)
        rhos.append(_average(st, PulseSequence((LASER_INIT, pulse)), seed))
    sig, ref, p = _read(st, rhos, shots, seed)
    meta = {"protocol": "odmr", "rabi_MHz": rabi, "pulse_us": duration, "lines_MHz": [t.frequency for t in mw]}
    return ExperimentRecord("odmr", "frequency_MHz", freqs, sig, ref, shots, st.readout, {"population_expected": p}, meta)


RABI_LABELS = ("MW1", "MW2", "RF1", "RF2", "LOCAL")


def _rabi_program(st: ExperimentSetup, label):
    """(preparation, drive segment template, readout mapping) for ``label``."""
    polarize = [LASER_INIT, GateSpec("CNOT_E"), GateSpec("CNOT_N"), LASER_INIT]  # -> |dn, up>
    if label in ("MW1", "MW2"):
        return [LASER_INIT], compile_gate(sel_e(label, np.pi), st.table, drive=st.drive).segments[0], []
    if label == "LOCAL":
        return [LASER_INIT], compile_gate(GateSpec("LOCAL_E_PI"), st.table, st.calibration, st.drive).segments[0], []
    if label == "RF1":  # electron-down manifold; CNOT_E then reads the nucleus
        return polarize, compile_gate(sel_n("RF1", np.pi), st.table, drive=st.drive).segments[0], [GateSpec("CNOT_E")]
    if label == "RF2":  # electron-up manifold; MW2 pi maps n-up onto e-up
        prep = polarize + [GateSpec("CNOT_E")]
        return prep, compile_gate(sel_n("RF2", np.pi), st.table, drive=st.drive).segments[0], [sel_e("MW2", np.pi)]
    raise DomainError(f"Rabi label must be one of {RABI_LABELS}, got {label!r}")


def run_rabi(setup, transition_label="MW1", max_duration=1.0, points=101, shots=2000, seed=0) -> ExperimentRecord:
    """Population against drive duration on one transition.

    Nuclear traces start from the polarised state |dn, up> and finish with a
    selective electron pi pulse that copies the nuclear population onto the
    electron for readout.
    """
    st = _setup(setup)
    prep, template, mapping = _rabi_program(st, transition_label)
    durations = np.linspace(0.0, max_duration, int(points))
    prep_seq = compile_program(prep, st.table, st.calibration, st.sync_drive())
    map_seq = compile_program(mapping, st.table, st.calibration, st.sync_drive())
    rhos = []
    for d in durations:
        seq = prep_seq + PulseSequence((replace(template, duration=float(d)),)) + map_seq
        rhos.append(_average(st, seq, seed))
    sig, ref, p = _read(st, rhos, shots, seed)
    tr = st.table["MW1" if transition_label == "LOCAL" else transition_label]
    omega = effective_rabi(tr, st.drive.amplitude(tr.channel))
    meta = {"protocol": "rabi", "label": transition_label, "rabi_expected_MHz": omega}
    return ExperimentRecord(f"rabi_{transition_label}", "duration_us", durations, sig, ref, shots, st.readout, {"population_expected": p}, meta)


# -- CPMG -------------------------------------------------------------------------------


def cpmg_blocks(st: ExperimentSetup, n_pulses, tau, mw_rabi=CPMG_RABI, first="+x", last=("+x", "-x")):
    """(body, final pulses): pi/2 - (tau - pi_y - tau)^N, then each last pi/2.

    ``tau`` is the free evolution between a pulse edge and the next pulse,
    so pi pulses sit 2 tau + t_pi apart.
    """
    drive = st.drive.with_mw(mw_rabi)
    eng = engine(st.h, st.system)

    def local(kind, axis):
        seg = compile_gate(GateSpec(kind, axis_phase=axis), st.table, st.calibration, drive).segments[0]
        return eng.resonant_carriers(replace(seg, mode=SMOOTH))

    half = local("LOCAL_E_PI2", first)
    pi = local("LOCAL_E_PI", "+y")
    segs = [half]
    gap = idle(tau)
    for _ in range(int(n_pulses)):
        segs += [gap, pi, gap]
    finals = [PulseSequence((local("LOCAL_E_PI2", a),)) for a in last]
    return PulseSequence(tuple(segs)), finals, pi.duration, half.duration


def _cpmg_sweep(st, n_pulses, taus, shots, seed, mw_rabi, factory=None, stochastic=False, noise_dt=None, name="cpmg", x_axis="total"):
    rho_p, rho_m, t_pi, t_pi2 = [], [], None, None
    for tau in taus:
        body, finals, t_pi, t_pi2 = cpmg_blocks(st, n_pulses, tau, mw_rabi)
        seq = PulseSequence((LASER_INIT,)) + body
        plus, minus = _average(st, seq, seed, branches=finals, factory=factory, stochastic=stochastic, noise_dt=noise_dt)
        rho_p.append(plus)
        rho_m.append(minus)
    sig_p, ref_p, p_p = _read(st, rho_p, shots, seed, _READOUT)
    sig_m, ref_m, p_m = _read(st, rho_m, shots, seed, _READOUT + 100)
    scale = shots * st.readout.counts_bright * st.readout.contrast
    coherence = ((ref_p - sig_p) - (ref_m - sig_m)) / scale
    taus = np.asarray(taus, float)
    total = int(n_pulses) * (2 * taus + t_pi)
    cols = {
        "tau_us": taus,
        "counts_signal_alt": sig_m,
        "counts_reference_alt": ref_m,
        "coherence": coherence,
        "coherence_expected": p_p - p_m,
    }
    meta = {"protocol": name, "n_pulses": int(n_pulses), "t_pi_us": t_pi, "t_pi2_us": t_pi2, "mw_rabi_MHz": mw_rabi}
    x, label = (total, "total_time_us") if x_axis == "total" else (taus, "tau_us")
    if x_axis != "total":
        cols["total_time_us"] = total
        del cols["tau_us"]
    return ExperimentRecord(name if name != "cpmg" else f"cpmg_{int(n_pulses)}", label, x, sig_p, ref_p, shots, st.readout, cols, meta)


def run_cpmg(setup, n_pulses=1, tau_axis=None, shots=2000, seed=0, mw_rabi=CPMG_RABI, total_time_axis=None) -> ExperimentRecord:
    """Coherence against total sequence time for CPMG-N.

    Either ``tau_axis`` (free half-spacing, us) or ``total_time_axis`` is
    given. The final pi/2 is applied about +x and -x on alternate shots and
    the two populations are differenced into the ``coherence`` column.
    """
    st = _setup(setup)
    n = int(n_pulses)
    if n < 1:
        raise DomainError("n_pulses must be >= 1")
    t_pi = 0.5 / (2 * st.table["MW1"].matrix_element * mw_rabi)
    if tau_axis is None:
        if total_time_axis is None:
            raise DomainError("give tau_axis or total_time_axis")
        tau_axis = (np.asarray(total_time_axis, float) / n - t_pi) / 2
    taus = np.asarray(tau_axis, float)
    if np.any(taus < 0):
        raise DomainError("total time shorter than the pulses themselves")
    return _cpmg_sweep(st, n, taus, shots, seed, mw_rabi)


@dataclass(frozen=True)
class T2Scaling:
    n_pulses: np.ndarray
    t2: np.ndarray
    t2_err: np.ndarray
    beta: float
    beta_err: float
    fits: tuple
    power_fit: FitResult


def extract_t2_scaling(records, column="coherence") -> T2Scaling:
    """Stretched-exponential T2 per record, then T2 = a N^beta."""
    by_n = {}
    for rec in records:
        by_n[int(rec.metadata["n_pulses"])] = rec
    if len(by_n) < 4:
        raise FitError("need records for at least 4 distinct pulse numbers", {"n": sorted(by_n)})
    ns, t2, err, fits = [], [], [], []
    for n in sorted(by_n):
        rec = by_n[n]
        y = rec.columns[column]
        fit = fit_stretched_exponential(rec.x, y, fit_offset=False)
        if "t2_beyond_window" in fit.flags or not np.isfinite(fit["t2"]):
            raise FitError(f"no decay resolved for N={n}", {"n": n, "fit": fit.as_dict()})
        ns.append(n)
        t2.append(fit["t2"])
        err.append(fit.error("t2"))
        fits.append(fit)
    pf = fit_power_law(ns, t2)
    return T2Scaling(np.array(ns), np.array(t2), np.array(err), pf["beta"], pf.error("beta"), tuple(fits), pf)


def cpmg_time_axis(setup, n_pulses, points=16, span=(0.15, 2.5), mw_rabi=CPMG_RABI):
    """Total-time axis around the analytic T2 of the setup's noise model."""
    st = _setup(setup)
    noise = st.noise_model
    t_pi = 0.5 / (2 * st.table["MW1"].matrix_element * mw_rabi)
    if noise.ou_sigma == 0 and not np.isfinite(noise.t1_electron):
        t2 = 10.0 * int(n_pulses) * t_pi
    else:
        t2 = analytic_t2(noise, int(n_pulses), t_pi, t_pi / 2)
    lo = max(span[0] * t2, int(n_pulses) * t_pi * 1.01)
    return np.linspace(lo, span[1] * t2, int(points))


def run_t2_scaling(setup, n_values=(1, 4, 16, 64, 256, 1024), points=16, shots=2000, seed=0, mw_rabi=CPMG_RABI):
    """CPMG records for each N on axes scaled to the expected T2, and the
    fitted power law."""
    records = [
        run_cpmg(setup, n, shots=shots, seed=_stream(seed, 1000 + n), mw_rabi=mw_rabi, total_time_axis=cpmg_time_axis(setup, n, points, mw_rabi=mw_rabi))
        for n in n_values
    ]
    return records, extract_t2_scaling(records)


# -- Bell states ------------------------------------------------------------------------

# (RF1 pi/2 axis, MW line): the MW line picks Psi vs Phi, the axis the sign
BELL_PROGRAMS = {"psi+": ("-y", "MW1"), "psi-": ("+y", "MW1"), "phi+": ("-y", "MW2"), "phi-": ("+y", "MW2")}


def bell_program(kind):
    axis, line = BELL_PROGRAMS[normalize_bell_kind(kind)]
    return [
        LASER_INIT,
        GateSpec("SWAP"),
        LASER_INIT,
        sel_n("RF1", np.pi / 2, axis),
        sel_e(line, np.pi, "-y"),
    ]


@dataclass(frozen=True)
class BellResult:
    kind: str
    rho_prepared: object
    data: TomogramData
    rho_mle: object
    rho_linear: object
    fidelity: float
    pseudo_pure_fidelity: float
    epsilon: float
    fidelity_prepared: float


def run_bell_protocol(setup, kind="psi+", shots=10_000, seed=0, noisy_tomography=False) -> BellResult:
    """Prepare a Bell state, run 16-setting tomography, reconstruct by MLE.

    Gates use the setup's MW amplitude and the synchronised RF amplitude.
    Noise (if any) acts during preparation; ``noisy_tomography`` also runs
    the tomography pre-rotations under noise.
    """
    st = _setup(setup)
    kind = normalize_bell_kind(kind)
    drive = st.sync_drive()
    seq = compile_program(bell_program(kind), st.table, st.calibration, drive)
    rho = _average(st, seq, _stream(seed, 0))
    settings = _settings(st, drive)
    cache = {}

    def noisy(setting, k):
        if k not in cache:
            cache[k] = _average(st, setting.pre_rotation, _stream(seed, 10 + k), rho0=rho)
        return cache[k]

    use_noisy = noisy_tomography and st.noise is not None
    data = simulate_tomography(rho, settings, st.readout, shots, [int(seed), _TOMO], noisy=noisy if use_noisy else None)
    rho_mle = mle_reconstruct(data, st.readout)
    target = bell_state(kind)
    eps, _ = pseudo_pure_decomposition(rho_mle)

    return BellResult(
        kind, rho, data, rho_mle, linear_inversion(data, st.readout), fidelity(rho_mle, target),
        pseudo_pure_fidelity(rho_mle, target), eps, fidelity(rho, target),
    )


_SETTINGS_CACHE = {}


def _settings(st, drive):
    key = (st.h.tobytes() if hasattr(st.h, "tobytes") else np.asarray(st.h.h).tobytes(), drive, st.calibration, st.system.gamma_e, st.system.gamma_n)
    if key not in _SETTINGS_CACHE:
        _SETTINGS_CACHE[key] = measurement_settings(st.table, st.calibration, drive, st.h, st.system)
    return _SETTINGS_CACHE[key]


# -- AC fields -------------------------------------------------------------------------

PHASE_MODES = ("fixed", "random")


@dataclass(frozen=True)
class AcFieldSpec:
    """A field b cos(2 pi f_ac t + theta) along z, seen by the electron only."""

    f_ac: float = 15.0  # MHz
    amplitude: float = 10.0  # uT
    phase_mode: str = "random"
    theta: float = 0.0  # rad, used when phase_mode == "fixed"

    def __post_init__(self):
        if not self.f_ac > 0:
            raise DomainError(f"f_ac must be > 0, got {self.f_ac!r}")
        if not self.amplitude >= 0:
            raise DomainError(f"amplitude must be >= 0, got {self.amplitude!r}")
        if self.phase_mode not in PHASE_MODES:
            raise DomainError(f"phase_mode must be one of {PHASE_MODES}")

    def detuning_amplitude(self, gamma_e) -> float:
        """Peak electron detuning in MHz."""
        return gamma_e * self.amplitude * 1e-6

    def phases(self, seed, indices):
        idx = np.atleast_1d(indices)
        if self.phase_mode == "fixed":
            return np.full(len(idx), float(self.theta))
        return np.array([trajectory_rng(_stream(seed, _PHASE), i).uniform(0, 2 * np.pi) for i in idx])


class AcDetuning:
    """Integral of A cos(2 pi f t + theta) for a batch of phases."""

    def __init__(self, amplitude, f_ac, thetas):
        self.amplitude = float(amplitude)
        self.w = 2 * np.pi * float(f_ac)
        self.thetas = np.atleast_1d(np.asarray(thetas, float))

    def integral(self, t):
        return self.amplitude / self.w * (np.sin(self.w * t + self.thetas) - np.sin(self.thetas))


class _Shifted:
    def __init__(self, trace, t0):
        self.trace, self.t0 = trace, t0

    def integral(self, t):
        return self.trace.integral(t - self.t0)


def _ac_factory(st, field_spec, seed):
    amp = field_spec.detuning_amplitude(st.system.gamma_e)
    return lambda idx: AcDetuning(amp, field_spec.f_ac, field_spec.phases(seed, idx))


def _ac_dt(st, f_ac):
    return min(st.noise_model.ou_tau_c / 20, 1.0 / (40 * f_ac))


def ideal_dip_tau(f_ac, k=1, t_pi=0.0):
    """Free half-spacing at which CPMG pulses sit half an AC period apart,
    k odd. With t_pi = 0 this is k / (4 f_ac)."""
    return k / (4 * f_ac) - t_pi / 2


def run_ac_field_scan(setup, n_pulses=8, tau_axis=None, field_spec: AcFieldSpec = None, shots=2000, seed=0, mw_rabi=CPMG_RABI) -> ExperimentRecord:
    """CPMG coherence against tau with an AC field applied.

    Coherence dips where the pulse spacing 2 tau + t_pi equals an odd
    number of AC half periods.
    """
    st = _setup(setup)
    field_spec = field_spec or AcFieldSpec()
    if tau_axis is None:
        tau_axis = np.linspace(0.002, 0.060, 59)
    factory = _ac_factory(st, field_spec, seed)
    rec = _cpmg_sweep(
        st, n_pulses, np.asarray(tau_axis, float), shots, seed, mw_rabi, factory=factory,
        stochastic=field_spec.phase_mode == "random", noise_dt=_ac_dt(st, field_spec.f_ac), name="acscan", x_axis="tau",
    )
    meta = dict(rec.metadata)
    meta.update(f_ac_MHz=field_spec.f_ac, amplitude_uT=field_spec.amplitude, phase_mode=field_spec.phase_mode, theta=field_spec.theta)
    return replace(rec, metadata=meta)


def ac_scan_exact(setup, n_pulses, tau_axis, field_spec: AcFieldSpec, mw_rabi=CPMG_RABI, dt=None):
    """Lab-frame oracle for a fixed-phase AC scan: 2 p_up - 1 after the +x
    readout pulse, per tau."""
    st = _setup(setup)
    if field_spec.phase_mode != "fixed":
        raise DomainError("the exact oracle needs a fixed field phase")
    det = AcDetuning(field_spec.detuning_amplitude(st.system.gamma_e), field_spec.f_ac, [field_spec.theta])
    out = []
    for tau in tau_axis:
        body, finals, _, _ = cpmg_blocks(st, n_pulses, tau, mw_rabi, last=("+x",))
        seq = PulseSequence((LASER_INIT,)) + body + finals[0]
        rho = propagate_exact(seq, st.h, None, dt, config=st.system, detuning=det, laser=st.laser)
        out.append(2 * _p_up(rho) - 1)
    return np.array(out)


def dip_position(x, y):
    """x at the minimum of y, refined by a parabola through its neighbours."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    k = int(np.argmin(y))
    if 0 < k < len(y) - 1:
        a, b, c = y[k - 1], y[k], y[k + 1]
        den = a - 2 * b + c
        if den > 0:
            return float(x[k] + 0.5 * (a - c) / den * (x[k + 1] - x[k - 1]) / 2)
    return float(x[k])


# -- correlation spectroscopy -------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationResult:
    T_axis: np.ndarray  # us, delay between the blocks
    p_values: np.ndarray  # measured populations
    p_expected: np.ndarray  # trajectory average before shot noise
    envelope_fit: FitResult
    envelope_decay: float  # us
    spectrum: Spectrum
    peak_frequency_khz: float  # apparent (aliased) line
    f_ac_estimate: float  # MHz, unfolded with the known sampling step
    linewidth_khz: float
    separation: np.ndarray  # us, start-to-start distance of the blocks
    record: ExperimentRecord
    block_phase: float  # rad, peak phase phi_0 per block
    block_coherence: float  # ensemble coherence left after one block


# phi_0 near 1.2 rad per block: a strong correlation signal below the
# saturation of <sin phi_1 sin phi_2>
CORRELATION_FIELD = AcFieldSpec(amplitude=40.0)


def correlation_time_axis(f_ac, t_max=1000.0, points=200, offset_fraction=0.05):
    """Uniform delays with step m / f_ac + offset_fraction / f_ac.

    The integer part m is chosen so that ``points`` steps span about
    ``t_max``; the fractional part sets the apparent (aliased) oscillation
    frequency offset_fraction / step.
    """
    m = max(1, int(round(t_max / points * f_ac)))
    step = (m + offset_fraction) / f_ac
    return np.arange(int(points)) * step


def unfold_frequency(f_alias, step, m):
    """AC frequency from the aliased line when each step spans ``m`` whole
    AC periods plus a fraction below one half."""
    return m / step + f_alias


def _block_phase(field_spec, gamma_e, n_pulses, tau, t_pi, t_pi2):
    """Peak AC phase phi_0 = 2 pi b |Y(2 pi f_ac)| one CPMG block picks up."""
    b = field_spec.detuning_amplitude(gamma_e)
    y = cpmg_sensitivity(np.array([2 * np.pi * field_spec.f_ac]), n_pulses, tau, t_pi, t_pi2)[0]
    return float(2 * np.pi * b * abs(y)), float(np.angle(y))


def correlation_closed_form(separation, phi0, envelope, block_coherence=1.0, terms=20):
    """p(T) = (1 - c^2 env <sin phi1 sin phi2>_theta) / 2 with

    <sin(a cos x) sin(a cos(x + D))> = 2 sum_k J_{2k+1}(a)^2 cos((2k+1) D),

    whose leading term a^2/2 cos D is the small-phase p_0 cos(2 pi f T).
    ``separation`` is passed as the phase D already (radians).
    """
    d = np.asarray(separation, float)
    s = sum(2 * jv(2 * k + 1, phi0) ** 2 * np.cos((2 * k + 1) * d) for k in range(terms))
    return 0.5 * (1 - block_coherence**2 * np.asarray(envelope) * s)


def brute_force_phase_average(phi0, delta, samples=4096):
    """Mean of sin(phi0 cos x) sin(phi0 cos(x + delta)) on a uniform grid."""
    x = 2 * np.pi * np.arange(samples) / samples
    d = np.atleast_1d(np.asarray(delta, float))[:, None]
    return np.mean(np.sin(phi0 * np.cos(x)) * np.sin(phi0 * np.cos(x + d)), axis=1)


def correlation_sequences(st, n_pulses, tau, memory, mw_rabi=CPMG_RABI, wait=1.0):
    """(block1, middle_before_delay, middle_after_delay, block2).

    Both blocks end with a pi/2 about +y: the first turns sin(phi_1) into a
    population, the second reads p = (1 - sin(phi_1) sin(phi_2)) / 2. The wait lets the left-over coherence dephase. With memory the
    population is swapped to the nucleus and the electron repumped before the
    delay, and swapped back after it.
    """
    body, f1, t_pi, t_pi2 = cpmg_blocks(st, n_pulses, tau, mw_rabi, last=("+y",))
    blk1 = body + f1[0]
    blk2 = body + f1[0]
    pre = PulseSequence((idle(wait),))
    post = PulseSequence()
    if memory:
        swap = compile_gate(GateSpec("SWAP"), st.table, st.calibration, st.sync_drive())
        pre = pre + swap + LASER_INIT
        post = swap
    return blk1, pre, post, blk2, t_pi, t_pi2


def run_correlation(
    setup, field_spec: AcFieldSpec = None, n_pulses=8, tau_resonant=None, T_axis=None, memory=True, shots=10_000, seed=0,
    mw_rabi=CPMG_RABI, wait=1.0,
) -> CorrelationResult:
    """Two CPMG blocks separated by a delay T, averaged over random AC phase.

    Dephasing noise is sampled inside the blocks; over the delays, which are
    far longer than the noise correlation time, it enters through its
    ensemble-averaged decay, and the two blocks see independent noise.
    """
    st = _setup(setup)
    field_spec = field_spec or CORRELATION_FIELD
    if field_spec.phase_mode != "random":
        field_spec = replace(field_spec, phase_mode="random")
    noise = st.noise_model
    if T_axis is None:
        T_axis = correlation_time_axis(field_spec.f_ac)
    T_axis = np.asarray(T_axis, float)
    t_pi_nom = 0.5 / (2 * st.table["MW1"].matrix_element * mw_rabi)
    if tau_resonant is None:
        tau_resonant = ideal_dip_tau(field_spec.f_ac, 1, t_pi_nom)
    blk1, pre, post, blk2, t_pi, t_pi2 = correlation_sequences(st, n_pulses, tau_resonant, memory, mw_rabi, wait)
    eng = engine(st.h, st.system)
    dt = _ac_dt(st, field_spec.f_ac)
    amp = field_spec.detuning_amplitude(st.system.gamma_e)
    b1 = PulseSequence((LASER_INIT,)) + blk1
    n_b1 = max(1, int(math.ceil(b1.total_duration / dt)))
    n_b2 = max(1, int(math.ceil(blk2.total_duration / dt)))
    dt1, dt2 = b1.total_duration / n_b1, blk2.total_duration / n_b2
    trajectories = st.trajectories
    rho0 = np.eye(4, dtype=complex) / 4
    sums = [[] for _ in T_axis]
    t_mid0 = b1.total_duration
    t_gap = pre.total_duration + post.total_duration

    def run_chunk(lo):
        idx = np.arange(lo, min(trajectories, lo + 250))
        ac = AcDetuning(amp, field_spec.f_ac, field_spec.phases(seed, idx))
        n1 = DetuningTrace(sample_batch(noise, n_b1, dt1, _stream(seed, _BLOCK1), idx), dt1)
        rho = np.broadcast_to(rho0, (len(idx), 4, 4)).copy()
        rho = _run(eng, b1, rho, st.laser, SumTrace(n1, ac), noise, dt1)
        rho = _run(eng, pre, rho, st.laser, ac, noise, dt, t_mid0, ensemble_dephasing=True)
        noise2 = sample_batch(noise, n_b2, dt2, _stream(seed, _BLOCK2), idx)
        out = []
        for T in T_axis:
            t = t_mid0 + pre.total_duration
            r = _run(eng, PulseSequence((idle(T),)), rho, st.laser, ac, noise, dt, t, ensemble_dephasing=True)
            t += T
            r = _run(eng, post, r, st.laser, ac, noise, dt, t, ensemble_dephasing=True)
            t += post.total_duration
            trace = SumTrace(_Shifted(DetuningTrace(noise2, dt2), t), ac)
            r = _run(eng, blk2, r, st.laser, trace, noise, dt2, t)
            out.append(r)
        return out

    for lo in range(0, trajectories, 250):
        for k, r in enumerate(run_chunk(lo)):
            sums[k].append(r)
    rhos = []
    for k in range(len(T_axis)):
        allr = np.concatenate(sums[k])
        m = _fsum_matrices(allr) / trajectories
        rhos.append((m + m.conj().T) / 2)
    sig, ref, p_exp = _read(st, rhos, shots, seed)
    scale = shots * st.readout.counts_bright * st.readout.contrast
    p_meas = (ref - sig) / scale
    separation = T_axis + blk1.total_duration + t_gap
    phi0, _ = _block_phase(field_spec, st.system.gamma_e, n_pulses, tau_resonant, t_pi, t_pi2)
    coh = math.exp(-dephasing_exponent(noise, n_pulses, tau_resonant, t_pi, t_pi2)) if noise.ou_sigma > 0 else 1.0
    env = correlation_envelope(T_axis, noise, memory, wait, pre, post)
    p_closed = correlation_closed_form(2 * np.pi * field_spec.f_ac * separation, phi0, env, coh)
    fit = fit_damped_cosine(T_axis, p_meas)
    spec = spectrum_and_linewidth(T_axis, p_meas)
    step = T_axis[1] - T_axis[0]
    f_alias = spec.peak_frequency  # MHz
    f_est = unfold_frequency(f_alias, step, math.floor(field_spec.f_ac * step))
    cols = {"separation_us": separation, "population_expected": p_exp, "population_closed_form": p_closed}
    meta = {
        "protocol": "correlate", "memory": bool(memory), "f_ac_MHz": field_spec.f_ac, "amplitude_uT": field_spec.amplitude,
        "n_pulses": int(n_pulses), "tau_us": float(tau_resonant), "phi0_rad": phi0, "block_coherence": coh,
    }
    rec = ExperimentRecord(f"correlate_{'memory' if memory else 'electron'}", "delay_us", T_axis, sig, ref, shots, st.readout, cols, meta)
    return CorrelationResult(
        T_axis, p_meas, np.asarray(p_exp), fit, decay_time(fit), spec, 1e3 * f_alias, f_est, 1e3 * spec.linewidth,
        separation, rec, phi0, coh,
    )


def _stream(seed, stream):
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(1)[0])


def correlation_envelope(T_axis, noise: NoiseModel, memory, wait=1.0, pre=None, post=None):
    """Relaxation factor on the stored population over the middle section.

    Without memory the electron holds it throughout; with memory the
    electron holds it during the wait, the nucleus during the repump and
    the delay (the swap pulses themselves are taken as instantaneous).
    """
    T = np.asarray(T_axis, float)
    e = math.exp(-wait / noise.t1_electron)
    if not memory:
        return e * np.exp(-T / noise.t1_electron)
    hold = sum(s.duration for s in (pre or []) if s.channel == "LASER")
    return e * np.exp(-(T + hold) / noise.t1_nuclear)
