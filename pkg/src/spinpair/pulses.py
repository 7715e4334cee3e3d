"""Pulse sequences and gate compilation.

A sequence is a strictly sequential list of segments. Simultaneous tones
(the dual-tone local electron gates) live inside one segment's tone list.
Tone phases refer to absolute sequence time, so a tone with phase ``p`` at
carrier ``f`` contributes ``2 * amplitude * cos(2 pi f t + p)`` to the drive
field for ``t`` measured from the start of the sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import CompileError

CHANNELS = ("MW", "RF", "LASER", "IDLE")
LASER_MODES = ("INIT", "READ")
# drive segments switched on and off slowly against the far-detuned beat notes
SMOOTH = "SMOOTH"

AXIS_PHASES = {"+x": 0.0, "+y": np.pi / 2, "-x": np.pi, "-y": -np.pi / 2}


@dataclass(frozen=True)
class Tone:
    carrier: float  # MHz
    amplitude: float  # MHz, Rabi frequency on a bare spin-1/2 transition
    phase: float = 0.0  # rad


@dataclass(frozen=True)
class PulseSegment:
    channel: str
    duration: float  # us
    tones: tuple = ()
    mode: Optional[str] = None
    label: str = ""

    def __post_init__(self):
        if self.channel not in CHANNELS:
            raise CompileError(f"unknown channel {self.channel!r}")
        if not np.isfinite(self.duration) or self.duration < 0:
            raise CompileError(f"segment duration must be >= 0, got {self.duration!r}")
        tones = tuple(t if isinstance(t, Tone) else Tone(*t) for t in self.tones)
        object.__setattr__(self, "tones", tones)
        if any(t.amplitude < 0 for t in tones):
            raise CompileError("tone amplitudes must be >= 0")
        if self.channel in ("MW", "RF") and not tones:
            raise CompileError(f"{self.channel} segment needs at least one tone")
        if self.channel in ("LASER", "IDLE") and tones:
            raise CompileError(f"{self.channel} segment carries no tones")
        if self.channel == "LASER" and self.mode not in LASER_MODES:
            raise CompileError(f"LASER segment needs mode in {LASER_MODES}")
        if self.channel in ("MW", "RF") and self.mode not in (None, SMOOTH):
            raise CompileError(f"drive segment mode must be None or {SMOOTH!r}")

    @property
    def carrier_frequency(self):
        return self.tones[0].carrier if self.tones else None

    @property
    def rabi_amplitude(self):
        return self.tones[0].amplitude if self.tones else 0.0

    @property
    def phase(self):
        return self.tones[0].phase if self.tones else 0.0


def idle(duration, label="") -> PulseSegment:
    return PulseSegment("IDLE", float(duration), label=label)


def laser(mode="INIT", duration=1.0, label="") -> PulseSegment:
    return PulseSegment("LASER", float(duration), mode=mode, label=label)


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def total_duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def start_times(self):
        return np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])[:-1]

    def __add__(self, other):
        if isinstance(other, PulseSegment):
            return PulseSequence(self.segments + (other,))
        return PulseSequence(self.segments + tuple(other.segments))

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def max_frequency(self) -> float:
        return max((t.carrier for s in self.segments for t in s.tones), default=0.0)

    def to_text(self) -> str:
        lines = ["# pulse schedule: channel start_us duration_us mode tones(carrier_MHz:amplitude_MHz:phase_rad)"]
        for seg, t0 in zip(self.segments, self.start_times()):
            tones = ";".join(f"{t.carrier:.10g}:{t.amplitude:.10g}:{t.phase:.10g}" for t in seg.tones) or "-"
            lines.append(f"{seg.channel} {t0:.10g} {seg.duration:.10g} {seg.mode or '-'} {tones}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PulseSequence":
        segs = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            channel, _start, duration, mode, tones = line.split()
            tone_list = []
            if tones != "-":
                for item in tones.split(";"):
                    f, a, p = (float(v) for v in item.split(":"))
                    tone_list.append(Tone(f, a, p))
            segs.append(PulseSegment(channel, float(duration), tuple(tone_list), None if mode == "-" else mode))
        return cls(tuple(segs))


# -- gates -------------------------------------------------------------------

GATE_KINDS = ("CNOT_E", "CNOT_N", "LOCAL_E_PI2", "LOCAL_E_PI", "SEL_E", "SEL_N", "SWAP")


@dataclass(frozen=True)
class GateSpec:
    kind: str
    transition: Optional[str] = None
    angle: Optional[float] = None
    axis_phase: str = "+x"

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise CompileError(f"unknown gate kind {self.kind!r}")
        if self.axis_phase not in AXIS_PHASES:
            raise CompileError(f"axis phase must be one of {tuple(AXIS_PHASES)}")
        if self.kind in ("SEL_E", "SEL_N"):
            if self.transition is None or self.angle is None:
                raise CompileError(f"{self.kind} needs a transition and an angle")
            if not 0 < self.angle <= 2 * np.pi + 1e-12:
                raise CompileError(f"angle must lie in (0, 2pi], got {self.angle}")


def sel_e(transition, angle, axis="+x"):
    return GateSpec("SEL_E", transition, angle, axis)


def sel_n(transition, angle, axis="+x"):
    return GateSpec("SEL_N", transition, angle, axis)


@dataclass(frozen=True)
class TransferModel:
    """Amplitude / phase response of the drive chain versus carrier frequency.

    ``points`` holds ``(frequency_MHz, amplitude_factor, phase_rad)`` rows and
    is linearly interpolated; an empty model is flat (unit response).
    """

    points: tuple = ()

    def response(self, f: float) -> complex:
        if not self.points:
            return 1.0 + 0j
        pts = np.array(sorted(self.points), dtype=float)
        amp = np.interp(f, pts[:, 0], pts[:, 1])
        ph = np.interp(f, pts[:, 0], pts[:, 2])
        return complex(amp * np.exp(1j * ph))

    def is_finite_at(self, *freqs) -> bool:
        return all(np.isfinite(self.response(f)) for f in freqs)


@dataclass(frozen=True)
class DriveSettings:
    """Requested tone amplitudes per channel (bare Rabi frequency, MHz)."""

    mw_rabi: float = 5.0
    rf_rabi: float = 0.0084072
    transfer: TransferModel = field(default_factory=TransferModel)

    def amplitude(self, channel):
        return {"MW": self.mw_rabi, "RF": self.rf_rabi}[channel]

    def with_mw(self, mw_rabi):
        return replace(self, mw_rabi=float(mw_rabi))


@dataclass(frozen=True)
class DualToneCalibration:
    amplitude_scale_2: float = 1.0
    phase_offset_2: float = 0.0

    def __post_init__(self):
        if not self.amplitude_scale_2 > 0:
            raise CompileError("amplitude_scale_2 must be > 0")


IDENTITY_CALIBRATION = DualToneCalibration()


def tone_phase_for_axis(transition, axis_angle: float) -> float:
    """Carrier phase that rotates the addressed pair about ``axis_angle``.

    The axis is measured in the two-level frame whose first state is the
    lower-index member of the pair, matching the fixed basis order.
    """
    i, j = transition.states
    if transition.upper == j:
        return -transition.element_phase - axis_angle
    return transition.element_phase + axis_angle


def _tone(transition, amplitude, axis_angle, drive, scale=1.0, offset=0.0) -> Tone:
    h = drive.transfer.response(transition.frequency)
    phase = tone_phase_for_axis(transition, axis_angle) + offset + np.angle(h)
    return Tone(transition.frequency, amplitude * scale * abs(h), float(np.angle(np.exp(1j * phase))))


def effective_rabi(transition, amplitude) -> float:
    return 2.0 * amplitude * transition.matrix_element


def _selective(table, label, angle, axis, drive, channel):
    if label not in table.labels:
        raise CompileError(f"unknown transition {label!r}")
    tr = table[label]
    if tr.channel != channel:
        raise CompileError(f"{label} is not a {channel} transition")
    amp = drive.amplitude(channel)
    if not amp > 0:
        raise CompileError(f"zero {channel} drive amplitude")
    duration = angle / (2 * np.pi * effective_rabi(tr, amp))
    tone = _tone(tr, amp, AXIS_PHASES[axis], drive)
    return PulseSegment(channel, duration, (tone,), label=f"{label}:{angle:.6g}{axis}")


def _local(table, angle, axis, calib, drive):
    amp = drive.amplitude("MW")
    if not amp > 0:
        raise CompileError("zero MW drive amplitude")
    t1, t2 = table["MW1"], table["MW2"]
    duration = angle / (2 * np.pi * effective_rabi(t1, amp))
    ratio = t1.matrix_element / t2.matrix_element
    tones = (
        _tone(t1, amp, AXIS_PHASES[axis], drive),
        _tone(t2, amp * ratio, AXIS_PHASES[axis], drive, calib.amplitude_scale_2, calib.phase_offset_2),
    )
    return PulseSegment("MW", duration, tones, label=f"LOCAL:{angle:.6g}{axis}")


def compile_gate(gate: GateSpec, table, calib: DualToneCalibration = IDENTITY_CALIBRATION, drive: DriveSettings = None) -> PulseSequence:
    """Expand one gate into square pulses.

    CNOT_E is a selective pi on MW1 (electron flip conditioned on the
    nuclear state MW1 belongs to); CNOT_N a selective pi on RF1. SWAP is the
    three-gate expansion CNOT_E, selective pi on RF2, CNOT_E, which permutes
    the computational basis exactly like a SWAP.
    """
    drive = drive or DriveSettings()
    k, ax = gate.kind, gate.axis_phase
    if k == "SEL_E":
        segs = [_selective(table, gate.transition, gate.angle, ax, drive, "MW")]
    elif k == "SEL_N":
        segs = [_selective(table, gate.transition, gate.angle, ax, drive, "RF")]
    elif k == "CNOT_E":
        segs = [_selective(table, "MW1", np.pi, ax, drive, "MW")]
    elif k == "CNOT_N":
        segs = [_selective(table, "RF1", np.pi, ax, drive, "RF")]
    elif k == "LOCAL_E_PI2":
        segs = [_local(table, np.pi / 2, ax, calib, drive)]
    elif k == "LOCAL_E_PI":
        segs = [_local(table, np.pi, ax, calib, drive)]
    else:  # SWAP
        segs = [
            _selective(table, "MW1", np.pi, ax, drive, "MW"),
            _selective(table, "RF2", np.pi, ax, drive, "RF"),
            _selective(table, "MW1", np.pi, ax, drive, "MW"),
        ]
    return PulseSequence(tuple(segs))


def compile_program(gates: Sequence, table, calib=IDENTITY_CALIBRATION, drive=None) -> PulseSequence:
    """Concatenate gates and raw segments (lasers, delays) into one sequence."""
    out = PulseSequence()
    for g in gates:
        if isinstance(g, PulseSegment):
            out = out + g
        elif isinstance(g, PulseSequence):
            out = out + g
        else:
            out = out + compile_gate(g, table, calib, drive)
    return out


def transfer_to_nucleus():
    """Electron population onto the nucleus: c-NOT_e followed by c-NOT_n.

    With the electron starting in |dn> and the nucleus in any state, this
    leaves the nucleus in |up>; on a stored population it is undone by
    :func:`retrieve_from_nucleus`.
    """
    return [GateSpec("CNOT_E"), GateSpec("CNOT_N")]


def retrieve_from_nucleus():
    return [GateSpec("CNOT_N"), GateSpec("CNOT_E")]


def synchronized_rf_amplitude(table, target="RF1", cycles=4):
    """Bare RF amplitude at which a pulse on ``target`` leaves the other RF
    line (a few MHz away) after whole generalized-Rabi cycles.

    With ``cycles=4`` the spectator completes 2 cycles during a pi pulse and
    1 during a pi/2 pulse, so both leave it untouched.
    """
    other = "RF2" if target == "RF1" else "RF1"
    mt, ms = table[target].matrix_element, table[other].matrix_element
    gap = abs(table[other].frequency - table[target].frequency)
    denom = (2 * cycles * mt) ** 2 - (2 * ms) ** 2
    if denom <= 0:
        raise CompileError("no synchronized amplitude for these matrix elements")
    return float(gap / np.sqrt(denom))


# -- dual-tone calibration ---------------------------------------------------------


def _two_level_response(table, h, config, label, tone, duration):
    """Transfer probability and rotation axis of a single tone on ``label``."""
    from .core import DensityMatrix4
    from .propagate import propagate_rwa

    tr = table[label]
    i, j = tr.states
    rho0 = np.zeros((4, 4), dtype=complex)
    rho0[j, j] = 1.0
    seq = PulseSequence((PulseSegment("MW", duration, (tone,)),))
    r = propagate_rwa(seq, h, DensityMatrix4(rho0), config=config).rho
    # rotation about axis phi from |1> gives rho[i, j] = -1j exp(-1j phi) sin cos
    return float(r[i, i].real), float(-np.angle(1j * r[i, j]))


def calibrate_dual_tone(config, transfer_model: TransferModel, drive: DriveSettings = None, maxiter=100) -> DualToneCalibration:
    """Match the second MW tone's Rabi rate and axis to the first.

    Each tone is simulated on its own transition; the rate follows from the
    transferred population. A quarter-period probe brackets the amplitude
    scale, then a probe lasting ``cycles`` more whole periods refines it by
    brentq, so edge effects of the square pulse enter only as O(1/cycles).
    The phase offset aligns the rotation axes measured the same way.
    """
    from scipy.optimize import brentq

    from .core import build_hamiltonian, transition_table
    from .errors import CalibrationError

    drive = replace(drive or DriveSettings(), transfer=transfer_model)
    h = build_hamiltonian(config)
    table = transition_table(h, config)
    t1, t2 = table["MW1"], table["MW2"]
    for f in (t1.frequency, t2.frequency):
        r = transfer_model.response(f)
        if not np.isfinite(r) or abs(r) == 0:
            raise CalibrationError(f"transfer model unusable at {f:.6g} MHz")
    amp = drive.mw_rabi
    cycles = 8

    def rate(label, tone, k=cycles):
        duration = (k + 0.25) / effective_rabi(t1, amp)
        p, axis = _two_level_response(table, h, config, label, tone, duration)
        return (np.pi * k + np.arcsin(np.sqrt(np.clip(p, 0, 1)))) / (np.pi * duration), axis

    def local_tones(scale, offset):
        seg = _local(table, np.pi / 2, "+x", DualToneCalibration(scale, offset), drive)
        return seg.tones

    tone1 = local_tones(1.0, 0.0)[0]
    h2 = abs(transfer_model.response(t2.frequency))

    def root(k, lo, hi):
        target = rate("MW1", tone1, k)[0]
        return brentq(lambda x: rate("MW2", local_tones(x / h2, 0.0)[1], k)[0] - target, lo, hi, xtol=1e-12, maxiter=maxiter)

    try:
        x = root(0, 0.5, 1.5)
        x = root(cycles, x * 0.98, x * 1.02)
    except (ValueError, RuntimeError) as exc:
        raise CalibrationError(f"amplitude root not found: {exc}") from exc
    rate1, axis1 = rate("MW1", tone1)
    scale = x / h2
    _, axis2 = rate("MW2", local_tones(scale, 0.0)[1])
    _, axis_probe = rate("MW2", local_tones(scale, 0.1)[1])
    sign = np.sign(np.angle(np.exp(1j * (axis_probe - axis2))))
    offset = float(np.angle(np.exp(1j * sign * (axis1 - axis2))))
    rate2, axis_final = rate("MW2", local_tones(scale, offset)[1])
    if abs(rate2 / rate1 - 1) > 1e-3 or abs(np.angle(np.exp(1j * (axis_final - axis1)))) > 1e-3:
        raise CalibrationError("dual-tone calibration did not converge")
    return DualToneCalibration(float(scale), offset)
