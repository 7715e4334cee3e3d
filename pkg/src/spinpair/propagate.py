"""State evolution through pulse sequences.

States are carried in the interaction frame of the static Hamiltonian,
expressed in the dressed (logical) basis: free evolution is the identity
and a DensityMatrix4 means the same thing before and after any delay.

Two engines share that convention:

* :func:`propagate_exact` integrates the full lab-frame Hamiltonian with
  piecewise-constant steps (reference oracle, slow);
* :func:`propagate_rwa` keeps, per tone, the near-resonant terms in a
  rotating frame and folds the far-detuned ones in as second-order level
  shifts plus first-order edge kicks exp(-iK(t1)) ... exp(iK(t0)) (fast
  path, also the engine under the noisy trajectory average). Segments in
  ``SMOOTH`` mode skip the kicks: their edges are taken slow against the
  far-detuned beat notes, so the dressing is entered and left adiabatically.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import SZ, DensityMatrix4, SystemConfig, build_hamiltonian, drive_operator, eigensystem
from .errors import DomainError, FrameError, StepSizeError
from .pulses import SMOOTH, PulseSequence
from .noise import DetuningTrace, NoiseModel, free_dephasing_exponent, relaxation_channel, sample_batch

RESONANCE_WINDOW = 50.0  # MHz
_DEFAULT_CONFIG = None


def _default_config():
    global _DEFAULT_CONFIG
    if _DEFAULT_CONFIG is None:
        _DEFAULT_CONFIG = SystemConfig()
    return _DEFAULT_CONFIG


@dataclass(frozen=True)
class LaserModel:
    """Effect of an INIT laser pulse: electron repumped to |dn> with
    probability ``polarization``; the nucleus keeps its state except for a
    depolarizing kick of strength ``nuclear_depolarization``."""

    polarization: float = 1.0
    nuclear_depolarization: float = 0.0

    def __post_init__(self):
        for name in ("polarization", "nuclear_depolarization"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")

    def apply(self, rho):
        """Act on an array of shape (..., 4, 4)."""
        r = rho.reshape(rho.shape[:-2] + (2, 2, 2, 2))
        nuc = np.einsum("...jajb->...ab", r)
        dn = np.array([[0, 0], [0, 1]], dtype=complex)
        reset = np.einsum("ij,...ab->...iajb", dn, nuc).reshape(rho.shape)
        out = (1 - self.polarization) * rho + self.polarization * reset
        d = self.nuclear_depolarization
        if d:
            r = out.reshape(rho.shape[:-2] + (2, 2, 2, 2))
            el = np.einsum("...ajbj->...ab", r)
            mixed = np.einsum("...ij,ab->...iajb", el, np.eye(2) / 2).reshape(rho.shape)
            out = (1 - d) * out + d * mixed
        return out


PERFECT_LASER = LaserModel()


def _as_array(rho0):
    if rho0 is None:
        return np.eye(4, dtype=complex) / 4
    if isinstance(rho0, DensityMatrix4):
        return np.array(rho0.rho)
    return np.array(DensityMatrix4.coerce(rho0).rho)


def _hmat(h):
    return np.asarray(getattr(h, "h", h), dtype=complex)


def _tree_product(us):
    """U[n-1] @ ... @ U[0] by pairwise reduction."""
    while len(us) > 1:
        if len(us) % 2:
            us = np.concatenate([us, np.eye(us.shape[-1], dtype=complex)[None]])
        us = us[1::2] @ us[0::2]
    return us[0]


# -- exact lab-frame propagation -------------------------------------------------


def spectrum_max_frequency(seq, h):
    w = np.linalg.eigvalsh(_hmat(h))
    return max(seq.max_frequency(), float(w.max() - w.min()))


def propagate_exact(seq, h, rho0=None, dt=None, *, config: SystemConfig = None, detuning=None, laser=PERFECT_LASER, chunk=4096):
    """Piecewise-constant lab-frame integration.

    Each step uses the time-average of every tone's cosine over the step,
    so the only error is the non-commutation within a step. ``detuning``
    is an optional object with ``integral(t)`` adding ``delta(t) S_z``.
    The default step is 1/(40 f_max) with f_max the largest carrier or
    level splitting; steps coarser than 1/(20 f_max) are refused.
    Every drive segment is switched as a square pulse, ``SMOOTH`` ones
    included.
    """
    config = config or _default_config()
    hm = _hmat(h)
    energies, w = eigensystem(hm)
    fmax = spectrum_max_frequency(seq, hm)
    limit = 1.0 / (20 * fmax)
    if dt is None:
        dt = 1.0 / (40 * fmax)
    if dt > limit * (1 + 1e-12):
        raise StepSizeError(f"dt={dt:.3g} us exceeds 1/(20 f_max)={limit:.3g} us")
    ops = {ch: drive_operator(ch, config) for ch in ("MW", "RF")}

    def to_lab(r, t):
        ph = np.exp(-2j * np.pi * energies * t)
        u = w * ph
        return u @ r @ u.conj().T

    def to_logical(r, t):
        ph = np.exp(-2j * np.pi * energies * t)
        u = w * ph
        return u.conj().T @ r @ u

    rho = to_lab(_as_array(rho0), 0.0)
    t = 0.0
    for seg in seq:
        d = seg.duration
        if seg.channel == "LASER":
            if seg.mode == "INIT":
                rho = to_lab(laser.apply(to_logical(rho, t)), t)
            # free evolution under H0 during the pulse
            u = (w * np.exp(-2j * np.pi * energies * d)) @ w.conj().T
            rho = u @ rho @ u.conj().T
        elif seg.channel == "IDLE" and detuning is None:
            u = (w * np.exp(-2j * np.pi * energies * d)) @ w.conj().T
            rho = u @ rho @ u.conj().T
        elif d > 0:
            n = max(1, int(math.ceil(d / dt - 1e-9)))
            step = d / n
            u_seg = np.eye(4, dtype=complex)
            for lo in range(0, n, chunk):
                k = np.arange(lo, min(n, lo + chunk))
                ta, tb = t + k * step, t + (k + 1) * step
                hs = np.broadcast_to(hm, (len(k), 4, 4)).copy()
                for tone in seg.tones:
                    x = 2 * np.pi * tone.carrier
                    if x * step > 1e-9:
                        avg = (np.sin(x * tb + tone.phase) - np.sin(x * ta + tone.phase)) / (x * step)
                    else:
                        avg = np.cos(x * ta + tone.phase)
                    hs += 2 * tone.amplitude * avg[:, None, None] * ops[seg.channel]
                if detuning is not None:
                    mean = np.array([(float(np.ravel(detuning.integral(b))[0]) - float(np.ravel(detuning.integral(a))[0])) / step for a, b in zip(ta, tb)])
                    hs += mean[:, None, None] * SZ
                ev, vec = np.linalg.eigh(hs)
                us = (vec * np.exp(-2j * np.pi * ev * step)[:, None, :]) @ np.swapaxes(vec.conj(), -1, -2)
                u_seg = _tree_product(us) @ u_seg
            rho = u_seg @ rho @ u_seg.conj().T
        t += d
    out = to_logical(rho, t)
    return DensityMatrix4.coerce((out + out.conj().T) / 2)


# -- rotating-wave engine ------------------------------------------------------------


def _expm_batch(hs, t, blocks):
    """exp(-2 pi i H t) for a batch of Hermitian H sharing a block pattern."""
    b = hs.shape[0]
    u = np.zeros((b, 4, 4), dtype=complex)
    for blk in blocks:
        if len(blk) == 1:
            i = blk[0]
            u[:, i, i] = np.exp(-2j * np.pi * hs[:, i, i].real * t)
        elif len(blk) == 2:
            i, j = blk
            a, d, c = hs[:, i, i].real, hs[:, j, j].real, hs[:, i, j]
            m, half = (a + d) / 2, (a - d) / 2
            om = np.sqrt(half**2 + np.abs(c) ** 2)
            x = 2 * np.pi * om * t
            sinc = np.where(om > 0, np.sin(x) / np.where(om > 0, om, 1.0), 2 * np.pi * t)
            g = np.exp(-2j * np.pi * m * t)
            cx = np.cos(x)
            u[:, i, i] = g * (cx - 1j * sinc * half)
            u[:, j, j] = g * (cx + 1j * sinc * half)
            u[:, i, j] = g * (-1j * sinc * c)
            u[:, j, i] = g * (-1j * sinc * np.conj(c))
        else:
            idx = np.ix_(range(b), blk, blk)
            sub = hs[:, blk][:, :, blk]
            ev, vec = np.linalg.eigh(sub)
            blocku = (vec * np.exp(-2j * np.pi * ev * t)[:, None, :]) @ np.swapaxes(vec.conj(), -1, -2)
            u[idx] = blocku
    return u


@dataclass(frozen=True)
class SegmentFrame:
    h_rot: np.ndarray  # static rotating-frame Hamiltonian (MHz)
    offsets: np.ndarray  # E - E', diag part that defines D(t)
    blocks: tuple
    kicks: tuple = ()  # far-detuned terms (a, b, coefficient, frequency) in the rotating frame

    def kick(self, t):
        """First-order micromotion generator K(t); the segment's exact
        propagator is exp(-iK(t1)) U_rwa exp(iK(t0)) up to O((V/nu)^2)."""
        k = np.zeros((4, 4), dtype=complex)
        for a, b, c, nu in self.kicks:
            k[a, b] += c * np.exp(2j * np.pi * nu * t) / (1j * nu)
        return k


class RotatingFrameEngine:
    """Segment-by-segment RWA evolution for one static Hamiltonian."""

    def __init__(self, h=None, config: SystemConfig = None):
        config = config or _default_config()
        h = build_hamiltonian(config) if h is None else h
        self.energies, self.vectors = eigensystem(_hmat(h))
        w = self.vectors
        self.ops = {ch: w.conj().T @ drive_operator(ch, config) @ w for ch in ("MW", "RF")}
        self.sz = np.real(np.diag(w.conj().T @ SZ @ w))
        self._cache = {}

    def coherence_mask(self, factor):
        """Multiplier damping electron coherences by ``factor``."""
        up = self.sz > 0
        return np.where(up[:, None] != up[None, :], factor, 1.0)

    def frame(self, seg) -> SegmentFrame:
        key = (seg.channel, seg.tones)
        if key not in self._cache:
            self._cache[key] = self._build_frame(seg)
        return self._cache[key]

    def _build_frame(self, seg):
        e = self.energies
        op = self.ops[seg.channel]
        pairs = [(a, b) for a in range(4) for b in range(a + 1, 4) if abs(op[a, b]) > 1e-12]
        # each pair is kept by at most one tone: the closest within the window
        kept = {}
        for k, tone in enumerate(seg.tones):
            hit = False
            for a, b in pairs:
                miss = abs(abs(e[b] - e[a]) - tone.carrier)
                if miss < RESONANCE_WINDOW:
                    hit = True
                    if (a, b) not in kept or miss < kept[(a, b)][1]:
                        kept[(a, b)] = (k, miss)
            if not hit:
                raise FrameError(f"tone at {tone.carrier:.6g} MHz matches no transition within {RESONANCE_WINDOW} MHz")
        frame_e = np.array(e, dtype=float)
        fixed = [False] * 4
        adj = {i: [] for i in range(4)}
        for (a, b), (k, _) in kept.items():
            f = seg.tones[k].carrier
            hi, lo = (b, a) if e[b] > e[a] else (a, b)
            adj[lo].append((hi, f))
            adj[hi].append((lo, -f))
        for root in range(4):
            if fixed[root]:
                continue
            fixed[root] = True
            stack = [root]
            while stack:
                i = stack.pop()
                for j, f in adj[i]:
                    target = frame_e[i] + f
                    if fixed[j]:
                        if abs(frame_e[j] - target) > 1e-6:
                            raise FrameError("tones imply inconsistent rotating frames")
                    else:
                        frame_e[j], fixed[j] = target, True
                        stack.append(j)
        offsets = e - frame_e
        h = np.diag(offsets).astype(complex)
        for (a, b), (k, _) in kept.items():
            tone = seg.tones[k]
            hi, lo = (b, a) if e[b] > e[a] else (a, b)
            c = tone.amplitude * op[hi, lo] * np.exp(-1j * tone.phase)
            h[hi, lo] += c
            h[lo, hi] += np.conj(c)
        # far-detuned components: second-order level shifts plus the
        # first-order kicks they leave at the segment edges
        kicks = []
        for k, tone in enumerate(seg.tones):
            for a in range(4):
                for b in range(4):
                    if a == b or abs(op[a, b]) <= 1e-12:
                        continue
                    lo_hi = (min(a, b), max(a, b))
                    c2 = (tone.amplitude * abs(op[a, b])) ** 2
                    for sign in (1.0, -1.0):
                        nu = e[a] - e[b] + sign * tone.carrier
                        if abs(nu) < RESONANCE_WINDOW:
                            if kept.get(lo_hi, (None,))[0] == k:
                                continue
                            raise FrameError("two tones address the same transition")
                        h[a, a] += c2 / nu
                        coeff = tone.amplitude * op[a, b] * np.exp(1j * sign * tone.phase)
                        kicks.append((a, b, coeff, frame_e[a] - frame_e[b] + sign * tone.carrier))
        blocks = _components(h)
        return SegmentFrame(h, offsets, blocks, tuple(kicks))

    def resonant_carriers(self, seg, iterations=4):
        """Copy of ``seg`` with each carrier moved onto the light-shifted
        resonance of its nearest pair, so the other tones' second-order
        shifts do not detune it."""
        e = self.energies
        op = self.ops[seg.channel]
        pairs = [(a, b) for a in range(4) for b in range(a + 1, 4) if abs(op[a, b]) > 1e-12]
        targets = []
        for tone in seg.tones:
            a, b = min(pairs, key=lambda p: abs(abs(e[p[1]] - e[p[0]]) - tone.carrier))
            targets.append((b, a) if e[b] > e[a] else (a, b))
        tones = list(seg.tones)
        for _ in range(iterations):
            h = self._build_frame(replace(seg, tones=tuple(tones))).h_rot
            tones = [replace(t, carrier=t.carrier + float(np.real(h[hi, hi] - h[lo, lo]))) for t, (hi, lo) in zip(tones, targets)]
        return replace(seg, tones=tuple(tones))

    def phase_matrix(self, offsets, t):
        return np.exp(-2j * np.pi * offsets * t)

    def segment_unitary(self, seg, t0, deltas=None, substep=None):
        """Interaction-frame unitary of a drive segment, batched over
        trajectories when ``deltas`` holds per-substep mean detunings of
        shape (batch, n_sub)."""
        fr = self.frame(seg)
        d = seg.duration
        if deltas is None:
            u = _expm_batch(fr.h_rot[None], d, fr.blocks)
        else:
            n_sub = deltas.shape[1]
            step = d / n_sub
            u = None
            for s in range(n_sub):
                hs = np.broadcast_to(fr.h_rot, (deltas.shape[0], 4, 4)).copy()
                hs[:, range(4), range(4)] += deltas[:, s, None] * self.sz
                us = _expm_batch(hs, step, fr.blocks)
                u = us if u is None else us @ u
        if fr.kicks and seg.mode != SMOOTH:  # smooth edges follow the far-detuned dressing adiabatically
            u = _herm_exp(fr.kick(t0 + d), -1) @ u @ _herm_exp(fr.kick(t0), 1)
        d0 = self.phase_matrix(fr.offsets, t0)
        d1 = self.phase_matrix(fr.offsets, t0 + d)
        return d1.conj()[:, None] * u * d0[None, :]


def _herm_exp(k, sign):
    """exp(sign * i * K) for Hermitian K."""
    w, v = np.linalg.eigh((k + k.conj().T) / 2)
    return (v * np.exp(sign * 1j * w)) @ v.conj().T


def _components(h):
    seen, out = set(), []
    for i in range(4):
        if i in seen:
            continue
        comp, stack = [], [i]
        seen.add(i)
        while stack:
            a = stack.pop()
            comp.append(a)
            for b in range(4):
                if b not in seen and abs(h[a, b]) > 0:
                    seen.add(b)
                    stack.append(b)
        out.append(tuple(sorted(comp)))
    return tuple(out)


_ENGINES = {}


def engine(h=None, config: SystemConfig = None) -> RotatingFrameEngine:
    """Cached engine per (Hamiltonian, gyromagnetic ratios)."""
    config = config or _default_config()
    hm = _hmat(build_hamiltonian(config) if h is None else h)
    key = (np.ascontiguousarray(hm).tobytes(), config.gamma_e, config.gamma_n)
    if key not in _ENGINES:
        if len(_ENGINES) > 32:
            _ENGINES.clear()
        _ENGINES[key] = RotatingFrameEngine(hm, config)
    return _ENGINES[key]


def propagate_rwa(seq, h, rho0=None, *, config: SystemConfig = None, laser=PERFECT_LASER):
    """Rotating-wave evolution, noiseless; see :class:`RotatingFrameEngine`."""
    eng = engine(h, config)
    rho = _as_array(rho0)[None]
    rho = _run(eng, seq, rho, laser=laser)
    return DensityMatrix4.coerce(rho[0])


def _run(eng, seq, rho, laser=PERFECT_LASER, trace=None, noise=None, substep=None, t_start=0.0, ensemble_dephasing=False):
    """Evolve a batch of states; ``trace`` supplies ``integral(t)`` of the
    detuning per batch member.

    With ``ensemble_dephasing`` the dephasing noise is not sampled but
    applied to IDLE segments as its ensemble-averaged decay of electron
    coherences; meant for delays much longer than the correlation time.
    """
    t = t_start
    for seg in seq:
        d = seg.duration
        if seg.channel in ("MW", "RF"):
            if d > 0:
                deltas = None
                if trace is not None:
                    n_sub = max(1, int(math.ceil(d / substep - 1e-9)))
                    grid = t + d * np.arange(n_sub + 1) / n_sub
                    phis = np.stack([trace.integral(x) for x in grid], axis=1)
                    deltas = np.diff(phis, axis=1) / (d / n_sub)
                u = eng.segment_unitary(seg, t, deltas)
                rho = u @ rho @ np.swapaxes(u.conj(), -1, -2)
        else:
            if trace is not None and d > 0:
                phi = trace.integral(t + d) - trace.integral(t)
                ph = np.exp(-2j * np.pi * phi[:, None] * eng.sz[None, :])
                rho = ph[:, :, None] * rho * ph.conj()[:, None, :]
            if ensemble_dephasing and noise is not None and seg.channel == "IDLE" and d > 0:
                rho = rho * eng.coherence_mask(np.exp(-free_dephasing_exponent(noise, d)))
            if seg.channel == "LASER" and seg.mode == "INIT":
                rho = laser.apply(rho)
        if noise is not None and d > 0:
            # relaxation is slow next to any segment, so applying it after
            # the segment's unitary is accurate to O(d / T1) per segment
            rho = relaxation_channel(rho, d, noise)
        t += d
    return rho


class SumTrace:
    """Several detuning sources added together."""

    def __init__(self, *parts):
        self.parts = [p for p in parts if p is not None]

    def integral(self, t):
        return sum(p.integral(t) for p in self.parts)


def _fsum_matrices(mats):
    """Exactly rounded elementwise sum, independent of order."""
    mats = np.asarray(mats)
    re = np.array([math.fsum(v) for v in mats.real.reshape(len(mats), -1).T])
    im = np.array([math.fsum(v) for v in mats.imag.reshape(len(mats), -1).T])
    return (re + 1j * im).reshape(mats.shape[1:])


def apply_sequence_with_noise(
    seq,
    config: SystemConfig,
    noise: NoiseModel,
    trajectories: int,
    seed,
    rho0=None,
    *,
    h=None,
    laser=PERFECT_LASER,
    detuning_factory=None,
    noise_dt=None,
    chunk_size=250,
    workers=1,
    return_batch=False,
    branches=None,
):
    """Trajectory-averaged evolution under dephasing noise and relaxation.

    Trajectory ``i`` draws its noise from the stream ``(seed, i)`` and any
    extra detuning from ``detuning_factory(indices)``; chunks are reduced
    with an exactly rounded sum, so the result is bit-identical for any
    ``workers``.

    ``branches`` is an optional list of sequences that each continue
    ``seq`` under the same noise realisation; the return value is then a
    list with one averaged state per branch.
    """
    trajectories = int(trajectories)
    if trajectories < 1:
        raise ValueError("trajectories must be >= 1")
    eng = engine(h, config)
    rho_init = _as_array(rho0)
    tails = list(branches) if branches is not None else [PulseSequence()]
    total = seq.total_duration + max(b.total_duration for b in tails)
    dephasing = noise.ou_sigma > 0
    dt = noise_dt or noise.ou_tau_c / 20
    n_steps = max(1, int(math.ceil(total / dt)))
    dt = max(total, 1e-12) / n_steps

    def run_chunk(lo):
        idx = np.arange(lo, min(trajectories, lo + chunk_size))
        parts = []
        if dephasing:
            parts.append(DetuningTrace(sample_batch(noise, n_steps, dt, seed, idx), dt))
        if detuning_factory is not None:
            parts.append(detuning_factory(idx))
        trace = SumTrace(*parts) if parts else None
        rho = np.broadcast_to(rho_init, (len(idx), 4, 4)).copy()
        rho = _run(eng, seq, rho, laser=laser, trace=trace, noise=noise, substep=dt)
        t0 = seq.total_duration
        return [_run(eng, b, rho, laser=laser, trace=trace, noise=noise, substep=dt, t_start=t0) for b in tails]

    starts = list(range(0, trajectories, chunk_size))
    if workers and workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(run_chunk, starts))
    else:
        batches = [run_chunk(s) for s in starts]
    out = []
    for k in range(len(tails)):
        allrho = np.concatenate([b[k] for b in batches])
        if return_batch:
            out.append(allrho)
            continue
        mean = _fsum_matrices(allrho) / trajectories
        out.append(DensityMatrix4.coerce((mean + mean.conj().T) / 2))
    return out if branches is not None else out[0]
