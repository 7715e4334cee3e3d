"""``spinpair`` command line: one subcommand per experiment.

Each run writes into ``<output_dir>/<run name>/``: ``data.csv`` (the
record), ``fit.json`` (fit summary), ``plot.svg`` and ``manifest.txt``.
Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure, 1 anything unexpected. Failures print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import plotting
from .config import PROTOCOLS, RunConfig, apply_overrides, axis_values, example_config_text, parse_config, validate_text
from .core import BELL_KINDS
from .errors import CompileError, ConfigurationError, DomainError, SpinPairError
from .fitting import fit_damped_cosine, fit_power_law, fit_stretched_exponential
from .noise import analytic_t2
from .protocols import (
    AcFieldSpec, ExperimentSetup, cpmg_time_axis, correlation_time_axis, dip_position, ideal_dip_tau,
    run_ac_field_scan, run_bell_protocol, run_correlation, run_cpmg, run_odmr, run_rabi, run_t2_scaling,
)
from .records import ExperimentRecord, canonical_json, write_manifest
from .tomography import format_matrix

FIGURES = {
    "odmr": "1f", "rabi": "1g,i", "cpmg": "1k", "t2scaling": "1l", "bell": "2c-k", "tomo": "2c-k", "acscan": "3b", "correlate": "3c-d",
}
_INPUT_ERRORS = (ConfigurationError, DomainError, CompileError)


# -- helpers ------------------------------------------------------------------------------


def _setup(cfg: RunConfig) -> ExperimentSetup:
    return ExperimentSetup(system=cfg.system, noise=cfg.noise, drive=cfg.drive, laser=cfg.laser, trajectories=cfg.trajectories, workers=cfg.workers)


class _Run:
    """Output directory of one run plus the files written so far."""

    def __init__(self, cfg, protocol, name):
        self.cfg, self.protocol, self.name = cfg, protocol, name
        self.dir = os.path.join(cfg.output_dir, name)
        os.makedirs(self.dir, exist_ok=True)
        self.files = []

    def path(self, fname):
        p = os.path.join(self.dir, fname)
        self.files.append(p)
        return p

    def record(self, rec: ExperimentRecord, fname="data.csv"):
        rec.write_csv(self.path(fname))

    def table(self, header, rows, fname="data.csv"):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in r])
        with open(self.path(fname), "w", newline="", encoding="utf-8") as fh:
            fh.write(buf.getvalue())

    def summary(self, data):
        with open(self.path("fit.json"), "w", encoding="utf-8") as fh:
            fh.write(json.dumps(json.loads(canonical_json(data)), indent=2, sort_keys=True) + "\n")

    def finish(self, extra=None):
        extra = dict(extra or {})
        extra["files"] = sorted(os.path.basename(f) for f in self.files)
        write_manifest(self.path("manifest.txt"), self.protocol, FIGURES[self.protocol], self.cfg.snapshot(self.protocol), self.cfg.seed, extra)
        return self.files


def _fit_dict(fit):
    return None if fit is None else fit.as_dict()


# -- runners ------------------------------------------------------------------------------


def cmd_odmr(cfg):
    p = cfg.protocol_params("odmr")
    rec = run_odmr(_setup(cfg), tuple(p["span_mhz"]), p["points"], cfg.shots, cfg.seed, rabi=p["rabi_mhz"])
    run = _Run(cfg, "odmr", "odmr")
    run.record(rec)
    y = rec.population
    mid = 0.5 * (rec.x[0] + rec.x[-1])
    dips = [dip_position(rec.x[m], -y[m]) for m in (rec.x < mid, rec.x >= mid) if m.sum() >= 3]
    lines = rec.metadata["lines_MHz"]
    summary = {"dips_MHz": dips, "lines_MHz": lines, "splitting_MHz": dips[1] - dips[0] if len(dips) == 2 else None}
    run.summary(summary)
    plotting.line_plot(run.path("plot.svg"), [(rec.x, y, "", "o-")], "MW frequency (MHz)", "electron up population", "ODMR")
    return run, summary


def cmd_rabi(cfg):
    p = cfg.protocol_params("rabi")
    rec = run_rabi(_setup(cfg), p["transition"], p["max_duration_us"], p["points"], cfg.shots, cfg.seed)
    run = _Run(cfg, "rabi", f"rabi_{p['transition']}")
    run.record(rec)
    fit = fit_damped_cosine(rec.x, rec.population)
    summary = {"fit": _fit_dict(fit), "rabi_MHz": fit["frequency"], "rabi_expected_MHz": rec.metadata["rabi_expected_MHz"]}
    run.summary(summary)
    plotting.plot_record(run.path("plot.svg"), rec, fit=fit)
    return run, summary


def cmd_cpmg(cfg):
    p = cfg.protocol_params("cpmg")
    st = _setup(cfg)
    n = p["n_pulses"]
    axis = axis_values(p["total_time_us"])
    if axis is None:
        axis = cpmg_time_axis(st, n, p["points"], mw_rabi=p["mw_rabi_mhz"])
    rec = run_cpmg(st, n, shots=cfg.shots, seed=cfg.seed, mw_rabi=p["mw_rabi_mhz"], total_time_axis=axis)
    run = _Run(cfg, "cpmg", f"cpmg_{n}")
    run.record(rec)
    fit = fit_stretched_exponential(rec.x, rec.columns["coherence"], fit_offset=False)
    summary = {"fit": _fit_dict(fit), "t2_us": fit["t2"], "stretch": fit["n"]}
    if cfg.noise is not None:
        t_pi = rec.metadata["t_pi_us"]
        summary["t2_analytic_us"] = analytic_t2(cfg.noise, n, t_pi, rec.metadata["t_pi2_us"])
    run.summary(summary)
    plotting.plot_record(run.path("plot.svg"), rec, "coherence", fit)
    return run, summary


def cmd_t2scaling(cfg):
    p = cfg.protocol_params("t2scaling")
    st = _setup(cfg)
    if cfg.noise is None:
        raise DomainError("T2 scaling needs noise: enable the noise section")
    records, res = run_t2_scaling(st, p["n_values"], p["points"], cfg.shots, cfg.seed, p["mw_rabi_mhz"])
    run = _Run(cfg, "t2scaling", "t2scaling")
    for rec in records:
        run.record(rec, f"cpmg_{rec.metadata['n_pulses']}.csv")
    t_pi = records[0].metadata["t_pi_us"]
    oracle = np.array([analytic_t2(cfg.noise, int(n), t_pi, t_pi / 2) for n in res.n_pulses])
    beta_oracle = fit_power_law(res.n_pulses, oracle)["beta"]
    run.table(
        ["n_pulses", "t2_us", "t2_err_us", "t2_analytic_us"],
        [[int(n), float(t), float(e), float(o)] for n, t, e, o in zip(res.n_pulses, res.t2, res.t2_err, oracle)],
    )
    summary = {
        "beta": res.beta, "beta_err": res.beta_err, "beta_analytic": beta_oracle, "prefactor_us": res.power_fit["a"],
        "t2_us": res.t2.tolist(), "n_pulses": res.n_pulses.tolist(), "stretch": [f["n"] for f in res.fits],
    }
    run.summary(summary)
    fitted = res.power_fit(res.n_pulses)
    plotting.line_plot(
        run.path("plot.svg"),
        [(res.n_pulses, res.t2, "Monte Carlo", "o"), (res.n_pulses, fitted, f"beta = {res.beta:.3f}", "-"), (res.n_pulses, oracle, "analytic", "x")],
        "number of pi pulses N", "T2 (us)", "CPMG scaling", logx=True, logy=True,
    )
    return run, summary


def _bell_shots(p):
    return None if p["shots"] is None else int(p["shots"])


def cmd_bell(cfg):
    p = cfg.protocol_params("bell")
    st = _setup(cfg)
    run = _Run(cfg, "bell", "bell")
    rows, summary = [], {"shots": p["shots"], "states": {}}
    for kind in p["kinds"]:
        res = run_bell_protocol(st, kind, _bell_shots(p), cfg.seed, p["noisy_tomography"])
        rows.append([kind, res.fidelity, res.fidelity_prepared, res.pseudo_pure_fidelity, res.epsilon])
        summary["states"][kind] = {
            "fidelity": res.fidelity, "fidelity_prepared": res.fidelity_prepared, "pseudo_pure_fidelity": res.pseudo_pure_fidelity, "epsilon": res.epsilon,
        }
        with open(run.path(f"rho_{kind}.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_matrix(res.rho_mle, f"reconstructed {kind}"))
    run.table(["kind", "fidelity", "fidelity_prepared", "pseudo_pure_fidelity", "epsilon"], rows)
    run.summary(summary)
    plotting.line_plot(
        run.path("plot.svg"), [(np.arange(len(rows)), [r[1] for r in rows], "reconstructed", "o"), (np.arange(len(rows)), [r[2] for r in rows], "prepared", "x")],
        "state (" + ", ".join(p["kinds"]) + ")", "fidelity", "Bell states",
    )
    return run, summary


def cmd_tomo(cfg):
    p = cfg.protocol_params("tomo")
    st = _setup(cfg)
    kind = p["kind"]
    res = run_bell_protocol(st, kind, _bell_shots(p), cfg.seed, p["noisy_tomography"])
    run = _Run(cfg, "tomo", f"tomo_{kind}")
    d = res.data
    shots = int(d.shots)
    rec = ExperimentRecord(
        f"tomography_{kind}", "setting_index", np.arange(16), np.rint(d.counts_signal).astype(np.int64) if shots > 1 else np.zeros(16, np.int64),
        np.rint(d.counts_reference).astype(np.int64) if shots > 1 else np.zeros(16, np.int64), shots, st.readout,
        {"population_estimate": d.populations(st.readout)}, {"settings": list(d.labels), "kind": kind, "infinite_statistics": p["shots"] is None},
    )
    run.record(rec)
    for name, rho in (("mle", res.rho_mle), ("linear", res.rho_linear), ("prepared", res.rho_prepared)):
        with open(run.path(f"rho_{name}.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_matrix(rho, f"{name} {kind}"))
    summary = {"fidelity": res.fidelity, "fidelity_prepared": res.fidelity_prepared, "pseudo_pure_fidelity": res.pseudo_pure_fidelity, "epsilon": res.epsilon}
    run.summary(summary)
    plotting.bar_matrix(run.path("plot.svg"), res.rho_mle, kind)
    return run, summary


def _field(p):
    return AcFieldSpec(p["f_ac_mhz"], p["amplitude_ut"], p.get("phase_mode", "random"), p.get("theta_rad", 0.0))


def cmd_acscan(cfg):
    p = cfg.protocol_params("acscan")
    st = _setup(cfg)
    spec = _field(p)
    taus = axis_values(p["tau_us"])
    rec = run_ac_field_scan(st, p["n_pulses"], taus, spec, cfg.shots, cfg.seed)
    run = _Run(cfg, "acscan", "acscan")
    run.record(rec)
    t_pi = rec.metadata["t_pi_us"]
    y = rec.columns["coherence"]
    dips = {}
    for k in (1, 3, 5):
        centre = ideal_dip_tau(spec.f_ac, k, t_pi)
        half = 0.25 / spec.f_ac  # a quarter period either side
        m = (taus > centre - half) & (taus < centre + half)
        if m.sum() >= 3:
            dips[str(k)] = {"measured_us": dip_position(taus[m], y[m]), "ideal_us": centre, "nominal_us": k / (4 * spec.f_ac)}
    summary = {"dips": dips, "tau_step_us": float(np.mean(np.diff(taus)))}
    run.summary(summary)
    plotting.line_plot(run.path("plot.svg"), [(taus * 1e3, y, "", "o-")], "tau (ns)", "CPMG coherence", f"AC field {spec.f_ac:g} MHz")
    return run, summary


def cmd_correlate(cfg):
    p = cfg.protocol_params("correlate")
    st = _setup(cfg)
    spec = _field(p)
    T = correlation_time_axis(spec.f_ac, p["t_max_us"], p["points"], p["offset_fraction"])
    res = run_correlation(st, spec, p["n_pulses"], p["tau_us"], T, p["memory"], cfg.shots, cfg.seed, wait=p["wait_us"])
    run = _Run(cfg, "correlate", f"correlate_{'memory' if p['memory'] else 'electron'}")
    run.record(res.record)
    sp = res.spectrum
    keep = sp.frequency <= 0.5 / (T[1] - T[0])
    run.table(["frequency_kHz", "magnitude"], [[float(f * 1e3), float(m)] for f, m in zip(sp.frequency[keep], sp.magnitude[keep])], "spectrum.csv")
    summary = {
        "memory": p["memory"], "envelope_decay_us": res.envelope_decay, "f_ac_estimate_MHz": res.f_ac_estimate,
        "alias_kHz": res.peak_frequency_khz, "linewidth_kHz": res.linewidth_khz, "phi0_rad": res.block_phase,
        "block_coherence": res.block_coherence, "fit": _fit_dict(res.envelope_fit), "step_us": float(T[1] - T[0]),
    }
    run.summary(summary)
    plotting.line_plot(
        run.path("plot.svg"), [(T, res.p_values, "data", "o"), (T, res.envelope_fit(T), "fit", "-")], "delay T (us)", "electron up population",
        "correlation " + ("with memory" if p["memory"] else "without memory"),
    )
    plotting.line_plot(run.path("spectrum.svg"), [(sp.frequency[keep] * 1e3, sp.magnitude[keep], "", "-")], "frequency (kHz)", "|FFT|", "correlation spectrum")
    return run, summary


COMMANDS = {
    "odmr": cmd_odmr, "rabi": cmd_rabi, "cpmg": cmd_cpmg, "t2scaling": cmd_t2scaling, "bell": cmd_bell, "tomo": cmd_tomo,
    "acscan": cmd_acscan, "correlate": cmd_correlate,
}
assert set(COMMANDS) == set(PROTOCOLS)


# -- argument parsing ---------------------------------------------------------------------


def _on_off(v):
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def _int_list(v):
    try:
        return [int(x) for x in v.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {v!r}") from None


def _shots(v):
    if v in ("inf", "infinite"):
        return None
    try:
        return int(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'inf', got {v!r}") from None


def _common(sub):
    sub.add_argument("--config", help="YAML config (default: the shipped example)")
    sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--trajectories", type=int)
    sub.add_argument("--workers", type=int, help="cap on parallel trajectory batches")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--noise", type=_on_off, help="on or off")


# flag dest -> protocol parameter key
_FLAG_KEYS = {
    "odmr": {"points": "points", "rabi": "rabi_mhz"},
    "rabi": {"transition": "transition", "max_duration": "max_duration_us", "points": "points"},
    "cpmg": {"n": "n_pulses", "points": "points", "total_time": "total_time_us"},
    "t2scaling": {"n": "n_values", "points": "points"},
    "bell": {"kind": "kinds", "noisy_tomography": "noisy_tomography"},
    "tomo": {"kind": "kind", "noisy_tomography": "noisy_tomography"},
    "acscan": {"n": "n_pulses", "fac": "f_ac_mhz", "amplitude": "amplitude_ut", "phase_mode": "phase_mode", "theta": "theta_rad", "tau": "tau_us"},
    "correlate": {
        "fac": "f_ac_mhz", "amplitude": "amplitude_ut", "memory": "memory", "n": "n_pulses", "tau": "tau_us", "t_max": "t_max_us",
        "points": "points", "offset_fraction": "offset_fraction", "wait": "wait_us",
    },
}


def build_parser():
    ap = argparse.ArgumentParser(prog="spinpair", description="Electron / 13C spin-pair experiments in simulation.")
    subs = ap.add_subparsers(dest="command", required=True)

    s = subs.add_parser("odmr", help="pulsed ODMR sweep")
    s.add_argument("--points", type=int)
    s.add_argument("--rabi", type=float, help="probe Rabi frequency (MHz)")
    s.add_argument("--shots", type=int)

    s = subs.add_parser("rabi", help="Rabi oscillation on one transition")
    s.add_argument("--transition", choices=("MW1", "MW2", "RF1", "RF2", "LOCAL"))
    s.add_argument("--max-duration", type=float, help="us")
    s.add_argument("--points", type=int)
    s.add_argument("--shots", type=int)

    s = subs.add_parser("cpmg", help="CPMG-N coherence decay")
    s.add_argument("--n", type=int, help="number of pi pulses")
    s.add_argument("--points", type=int)
    s.add_argument("--total-time", type=float, nargs=3, metavar=("START", "STOP", "POINTS"))
    s.add_argument("--shots", type=int)

    s = subs.add_parser("t2scaling", help="T2 against pulse number, power-law exponent")
    s.add_argument("--n", type=_int_list, help="comma-separated pulse numbers")
    s.add_argument("--points", type=int)
    s.add_argument("--shots", type=int)

    for name, help_ in (("bell", "Bell-state fidelities"), ("tomo", "full tomography of one Bell state")):
        s = subs.add_parser(name, help=help_)
        if name == "bell":
            s.add_argument("--kind", action="append", choices=BELL_KINDS, help="repeatable; default all four")
        else:
            s.add_argument("--kind", choices=BELL_KINDS)
        s.add_argument("--shots", type=_shots, default=argparse.SUPPRESS, help="shots per setting, or 'inf' (default)")
        s.add_argument("--noisy-tomography", action="store_true", default=None)

    s = subs.add_parser("acscan", help="CPMG contrast against tau under an AC field")
    s.add_argument("--n", type=int)
    s.add_argument("--fac", type=float, help="AC frequency (MHz)")
    s.add_argument("--amplitude", type=float, help="uT")
    s.add_argument("--phase-mode", choices=("fixed", "random"))
    s.add_argument("--theta", type=float)
    s.add_argument("--tau", type=float, nargs=3, metavar=("START", "STOP", "POINTS"))
    s.add_argument("--shots", type=int)

    s = subs.add_parser("correlate", help="correlation spectroscopy, with or without the nuclear memory")
    s.add_argument("--fac", type=float, help="AC frequency (MHz)")
    s.add_argument("--amplitude", type=float, help="uT")
    s.add_argument("--memory", type=_on_off, help="on or off")
    s.add_argument("--n", type=int)
    s.add_argument("--tau", type=float, help="us; default is the resonance")
    s.add_argument("--t-max", type=float, help="us")
    s.add_argument("--points", type=int)
    s.add_argument("--offset-fraction", type=float)
    s.add_argument("--wait", type=float, help="us")
    s.add_argument("--shots", type=int)

    for name in COMMANDS:
        _common(subs.choices[name])

    s = subs.add_parser("run", help="run the protocol named in the config")
    _common(s)

    s = subs.add_parser("validate", help="check a config without running anything")
    s.add_argument("path", nargs="?", help="config file (default: the shipped example)")
    s.add_argument("--strict", action="store_true", help="exit 2 when there are violations")

    subs.add_parser("example-config", help="print the commented default config")
    return ap


def _overrides(args, protocol):
    """Config overrides from the command-line flags, as KEY=VALUE strings."""
    out = list(args.overrides)
    for dest, key in (("seed", "seed"), ("trajectories", "trajectories"), ("workers", "workers")):
        if getattr(args, dest, None) is not None:
            out.append(f"{key}={getattr(args, dest)}")
    if getattr(args, "out", None):
        out.append(f"output_dir={json.dumps(args.out)}")
    if getattr(args, "noise", None) is not None:
        out.append(f"noise.enabled={'true' if args.noise else 'false'}")
    if hasattr(args, "shots"):
        if protocol in ("bell", "tomo"):
            out.append(f"protocols.{protocol}.shots={json.dumps(args.shots)}")
        elif args.shots is not None:
            out.append(f"shots={args.shots}")
    for dest, key in _FLAG_KEYS.get(protocol, {}).items():
        v = getattr(args, dest, None)
        if v is None:
            continue
        out.append(f"protocols.{protocol}.{key}={json.dumps(v)}")
    return out


def load_run_config(args, protocol=None):
    text = example_config_text()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    # report problems in the file itself with line numbers first
    parse_config(text)
    ov = _overrides(args, protocol)
    if not ov:
        return parse_config(text)
    try:
        return parse_config(apply_overrides(text, ov))
    except ConfigurationError as exc:  # lines refer to the merged text; drop them
        raise ConfigurationError([(v[0], v[1] + " (after command-line overrides)") for v in exc.violations]) from None


def _fail(code, category, message, violations=None):
    payload = {"status": "error", "category": category, "message": message}
    if violations is not None:
        payload["violations"] = [{"key": v[0], "message": v[1], "line": v[2] if len(v) > 2 else None} for v in violations]
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "example-config":
            sys.stdout.write(example_config_text())
            return 0
        if args.command == "validate":
            if args.path:
                with open(args.path, encoding="utf-8") as fh:
                    text = fh.read()
            else:
                text = example_config_text()
            problems = validate_text(text)
            for key, msg, line in (tuple(v) + (None,) * (3 - len(v)) for v in problems):
                where = f"line {line}: " if line else ""
                print(f"{where}{key}: {msg}")
            if not problems:
                print("config OK")
            return 2 if problems and args.strict else 0
        protocol = args.command
        if protocol == "run":
            protocol = load_run_config(args).protocol
        cfg = load_run_config(args, protocol)
        run, summary = COMMANDS[protocol](cfg)
        run.finish()
        print(json.dumps({"status": "ok", "protocol": protocol, "output": run.dir, "summary": json.loads(canonical_json(summary))}, sort_keys=True))
        return 0
    except ConfigurationError as exc:
        return _fail(2, exc.category, str(exc), exc.violations)
    except OSError as exc:
        return _fail(2, "io", str(exc))
    except _INPUT_ERRORS as exc:
        return _fail(2, exc.category, str(exc))
    except SpinPairError as exc:
        return _fail(3, exc.category, str(exc))
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        return _fail(3, "numeric", str(exc))


if __name__ == "__main__":
    sys.exit(main())
