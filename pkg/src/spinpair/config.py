"""Run configuration: YAML file -> validated RunConfig.

Every problem is reported as ``(key.path, message, line)`` so a single
``validate`` pass can list them all. Values are checked before any
physics object is built, then the physics objects run their own checks.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .core import HyperfineTensor, SystemConfig
from .errors import ConfigurationError
from .noise import NoiseModel
from .propagate import LaserModel
from .pulses import DriveSettings
from .readout import ReadoutModel

OUTPUT_ENV = "SPINPAIR_OUTPUT_DIR"

PROTOCOLS = ("odmr", "rabi", "cpmg", "t2scaling", "bell", "tomo", "acscan", "correlate")

# parameter name -> (kind, default); kinds drive validation and coercion
PROTOCOL_PARAMS = {
    "odmr": {"span_mhz": ("pair", [1850.0, 2280.0]), "points": ("count", 216), "rabi_mhz": ("positive", 1.0)},
    "rabi": {"transition": ("rabi_label", "MW1"), "max_duration_us": ("positive", 1.0), "points": ("count", 101)},
    "cpmg": {"n_pulses": ("count", 1), "points": ("count", 16), "total_time_us": ("axis", None), "mw_rabi_mhz": ("positive", 25.0)},
    "t2scaling": {"n_values": ("counts", [1, 4, 16, 64, 256, 1024]), "points": ("count", 16), "mw_rabi_mhz": ("positive", 25.0)},
    "bell": {"kinds": ("bell_kinds", ["psi+", "psi-", "phi+", "phi-"]), "shots": ("optional_count", None), "noisy_tomography": ("bool", False)},
    "tomo": {"kind": ("bell_kind", "psi+"), "shots": ("optional_count", None), "noisy_tomography": ("bool", False)},
    "acscan": {
        "n_pulses": ("count", 8), "f_ac_mhz": ("positive", 15.0), "amplitude_ut": ("nonneg", 40.0), "phase_mode": ("phase_mode", "fixed"),
        "theta_rad": ("number", 0.0), "tau_us": ("axis", [0.002, 0.060, 59]),
    },
    "correlate": {
        "f_ac_mhz": ("positive", 15.0), "amplitude_ut": ("nonneg", 40.0), "n_pulses": ("count", 8), "memory": ("bool", True),
        "tau_us": ("optional_positive", None), "t_max_us": ("positive", 1000.0), "points": ("count", 200),
        "offset_fraction": ("fraction", 0.05), "wait_us": ("nonneg", 1.0),
    },
}

_TOP = {"seed", "shots", "trajectories", "workers", "output_dir", "protocol", "system", "noise", "drive", "laser", "protocols"}
_SECTIONS = {
    "system": {"b0_field", "gamma_e", "gamma_n", "hyperfine", "t1_electron", "t1_nuclear", "readout"},
    "system.hyperfine": {"a_zz", "a_perp", "a_xz"},
    "system.readout": {"counts_bright", "contrast"},
    "noise": {"enabled", "ou_sigma", "ou_tau_c", "spectrum_order"},
    "drive": {"mw_rabi", "rf_rabi"},
    "laser": {"polarization", "nuclear_depolarization"},
}


@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    noise: NoiseModel = None  # None: noiseless
    drive: DriveSettings = field(default_factory=DriveSettings)
    laser: LaserModel = field(default_factory=LaserModel)
    protocol: str = "odmr"
    params: dict = field(default_factory=dict)  # protocol name -> parameter dict
    output_dir: str = "spinpair-out"
    seed: int = 0
    shots: int = 2000
    trajectories: int = 200
    workers: int = 1

    def protocol_params(self, name):
        out = {k: v for k, (_, v) in PROTOCOL_PARAMS[name].items()}
        out.update(self.params.get(name, {}))
        return out

    def snapshot(self, name=None) -> dict:
        name = name or self.protocol
        return {
            "system": self.system.snapshot(),
            "noise": None if self.noise is None else self.noise.snapshot(),
            "drive": {"mw_rabi": self.drive.mw_rabi, "rf_rabi": self.drive.rf_rabi},
            "laser": {"polarization": self.laser.polarization, "nuclear_depolarization": self.laser.nuclear_depolarization},
            "protocol": name,
            "params": self.protocol_params(name),
            "seed": self.seed,
            "shots": self.shots,
            "trajectories": self.trajectories,
        }


def example_config_text() -> str:
    return resources.files("spinpair").joinpath("default_config.yaml").read_text(encoding="utf-8")


# -- YAML with line numbers ---------------------------------------------------------------


def _compose(text):
    """Plain data plus a map from dotted key path to 1-based line."""
    node = yaml.compose(text, Loader=yaml.SafeLoader)
    lines = {}

    def walk(n, path):
        if isinstance(n, yaml.MappingNode):
            for k, v in n.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                lines[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(n, yaml.SequenceNode):
            for i, v in enumerate(n.value):
                lines[f"{path}[{i}]"] = v.start_mark.line + 1
                walk(v, f"{path}[{i}]")

    if node is not None:
        walk(node, "")
    data = yaml.safe_load(text)
    return ({} if data is None else data), lines


class _Collector:
    def __init__(self, lines):
        self.lines, self.items = lines, []

    def add(self, path, msg):
        self.items.append((path, msg, self._line(path)))

    def _line(self, path):
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path.rpartition(".")[0]
        return None


def _number(v):
    """Accept YAML numbers and numeric strings such as '1e-3'."""
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return None
    return None


def _is_int(num, minimum):
    return num is not None and np.isfinite(num) and num == int(num) and num >= minimum


def _check_param(kind, value, path, col):
    """Coerced value, or None after recording a violation."""
    num = _number(value)
    if kind == "bool":
        if isinstance(value, bool):
            return value
        if value in ("on", "off"):
            return value == "on"
        col.add(path, f"expected true/false, got {value!r}")
    elif kind == "optional_count" and value is None:
        return None
    elif kind in ("count", "optional_count"):
        if _is_int(num, 1):
            return int(num)
        col.add(path, f"expected an integer >= 1{' or null' if kind == 'optional_count' else ''}, got {value!r}")
    elif kind == "counts":
        if isinstance(value, list) and value and all(_is_int(_number(v), 1) for v in value):
            vals = sorted({int(_number(v)) for v in value})
            if len(vals) >= 4:
                return vals
            col.add(path, "need at least 4 distinct pulse numbers")
        else:
            col.add(path, f"expected a list of integers >= 1, got {value!r}")
    elif kind in ("positive", "nonneg", "number", "fraction", "optional_positive"):
        if kind == "optional_positive" and value is None:
            return None
        ok = num is not None and np.isfinite(num)
        if ok and kind in ("positive", "optional_positive"):
            ok = num > 0
        if ok and kind == "nonneg":
            ok = num >= 0
        if ok and kind == "fraction":
            ok = 0 < num < 0.5
        if ok:
            return num
        want = {"positive": "> 0", "optional_positive": "> 0 or null", "nonneg": ">= 0", "number": "finite", "fraction": "in (0, 0.5)"}[kind]
        col.add(path, f"must be a number {want}, got {value!r}")
    elif kind == "pair":
        if isinstance(value, list) and len(value) == 2 and all(_number(v) is not None for v in value) and _number(value[0]) < _number(value[1]):
            return [_number(v) for v in value]
        col.add(path, f"expected [low, high] with low < high, got {value!r}")
    elif kind == "axis":
        # [start, stop, points] or an explicit list of >= 4 increasing values
        if value is None:
            return None
        if isinstance(value, list) and all(_number(v) is not None for v in value):
            v = [_number(x) for x in value]
            if len(v) == 3 and _is_int(v[2], 2) and 0 <= v[0] < v[1]:
                return v
            if len(v) >= 4 and v[0] >= 0 and np.all(np.diff(v) > 0):
                return v
        col.add(path, f"expected [start, stop, points] or an increasing list, got {value!r}")
    elif kind == "rabi_label":
        if value in ("MW1", "MW2", "RF1", "RF2", "LOCAL"):
            return value
        col.add(path, f"expected one of MW1, MW2, RF1, RF2, LOCAL, got {value!r}")
    elif kind in ("bell_kind", "bell_kinds"):
        vals = value if kind == "bell_kinds" else [value]
        if isinstance(vals, list) and vals and all(v in ("psi+", "psi-", "phi+", "phi-") for v in vals):
            return list(vals) if kind == "bell_kinds" else vals[0]
        col.add(path, f"expected psi+, psi-, phi+ or phi-, got {value!r}")
    elif kind == "phase_mode":
        if value in ("fixed", "random"):
            return value
        col.add(path, f"expected fixed or random, got {value!r}")
    return None


def axis_values(spec):
    """Expand an axis parameter: three entries mean [start, stop, points]."""
    if spec is None:
        return None
    if len(spec) == 3:
        return np.linspace(spec[0], spec[1], int(spec[2]))
    return np.asarray(spec, float)


def _section(data, path, col):
    val = data.get(path.rpartition(".")[2], {}) if isinstance(data, dict) else {}
    if val is None:
        return {}
    if not isinstance(val, dict):
        col.add(path, f"expected a mapping, got {type(val).__name__}")
        return {}
    for k in val:
        if k not in _SECTIONS[path]:
            col.add(f"{path}.{k}", "unknown key")
    return val


def _positive_int(data, key, col, default, minimum=1):
    if key not in data:
        return default
    v = _number(data[key])
    if not _is_int(v, minimum):
        col.add(key, f"must be an integer >= {minimum}, got {data[key]!r}")
        return default
    return int(v)


def _collect(data, lines, env=None):
    """(kwargs for RunConfig or None, list of violations)."""
    col = _Collector(lines)
    if not isinstance(data, dict):
        col.add("", "top level must be a mapping")
        return None, col.items
    for k in data:
        if k not in _TOP:
            col.add(str(k), "unknown key")

    sys_d = _section(data, "system", col)
    hf_d = _section(sys_d, "system.hyperfine", col)
    ro_d = _section(sys_d, "system.readout", col)
    noise_d = _section(data, "noise", col)
    drive_d = _section(data, "drive", col)
    laser_d = _section(data, "laser", col)

    def nums(d, prefix, keys):
        out = {}
        for k in keys:
            if k in d:
                v = d[k]
                if k == "b0_field" and isinstance(v, list):
                    if len(v) == 3 and all(_number(x) is not None for x in v):
                        out[k] = tuple(_number(x) for x in v)
                    else:
                        col.add(f"{prefix}.{k}", f"expected a number or a 3-vector, got {v!r}")
                    continue
                n = _number(v)
                if n is None:
                    col.add(f"{prefix}.{k}", f"must be a number, got {v!r}")
                else:
                    out[k] = n
        return out

    sys_kw = nums(sys_d, "system", ("b0_field", "gamma_e", "gamma_n", "t1_electron", "t1_nuclear"))
    hf_kw = nums(hf_d, "system.hyperfine", ("a_zz", "a_perp", "a_xz"))
    ro_kw = nums(ro_d, "system.readout", ("counts_bright", "contrast"))
    noise_kw = nums(noise_d, "noise", ("ou_sigma", "ou_tau_c", "spectrum_order"))
    drive_kw = nums(drive_d, "drive", ("mw_rabi", "rf_rabi"))
    laser_kw = nums(laser_d, "laser", ("polarization", "nuclear_depolarization"))

    # physics objects report their own violations; re-key them to the file
    def check(obj_cls, kw, prefix):
        try:
            probe = obj_cls.__new__(obj_cls)
            defaults = obj_cls()
            for f_ in defaults.__dataclass_fields__:
                object.__setattr__(probe, f_, kw.get(f_, getattr(defaults, f_)))
            for key, msg in probe.violations():
                col.add(f"{prefix}.{key}", msg)
        except (TypeError, ValueError) as exc:
            col.add(prefix, str(exc))

    check(ReadoutModel, ro_kw, "system.readout")
    check(SystemConfig, {**sys_kw, "readout": ReadoutModel()}, "system")
    if "spectrum_order" in noise_kw:
        noise_kw["spectrum_order"] = int(noise_kw["spectrum_order"]) if float(noise_kw["spectrum_order"]).is_integer() else noise_kw["spectrum_order"]
    check(NoiseModel, noise_kw, "noise")  # relaxation times are checked under system
    for k, v in drive_kw.items():
        if not v > 0:
            col.add(f"drive.{k}", f"must be > 0, got {v!r}")
    for k, v in laser_kw.items():
        if not 0 <= v <= 1:
            col.add(f"laser.{k}", f"must lie in [0, 1], got {v!r}")
    enabled = noise_d.get("enabled", True)
    if not isinstance(enabled, bool):
        col.add("noise.enabled", f"expected true/false, got {enabled!r}")
        enabled = True

    protocol = data.get("protocol", "odmr")
    if protocol not in PROTOCOLS:
        col.add("protocol", f"unknown protocol {protocol!r}; expected one of {', '.join(PROTOCOLS)}")
    params = {}
    blocks = data.get("protocols", {}) or {}
    if not isinstance(blocks, dict):
        col.add("protocols", "expected a mapping of protocol name to parameters")
        blocks = {}
    for name, block in blocks.items():
        if name not in PROTOCOL_PARAMS:
            col.add(f"protocols.{name}", f"unknown protocol {name!r}")
            continue
        if block is None:
            continue
        if not isinstance(block, dict):
            col.add(f"protocols.{name}", "expected a mapping")
            continue
        params[name] = {}
        for k, v in block.items():
            if k not in PROTOCOL_PARAMS[name]:
                col.add(f"protocols.{name}.{k}", "unknown parameter")
                continue
            kind = PROTOCOL_PARAMS[name][k][0]
            got = _check_param(kind, v, f"protocols.{name}.{k}", col)
            if got is not None or v is None:
                params[name][k] = got

    seed = _positive_int(data, "seed", col, 0, minimum=0)
    shots = _positive_int(data, "shots", col, 2000)
    traj = _positive_int(data, "trajectories", col, 200)
    workers = _positive_int(data, "workers", col, 1)
    if "seed" not in data:
        col.add("seed", "missing: runs are seeded explicitly")
    env = os.environ if env is None else env
    out_dir = env.get(OUTPUT_ENV) or data.get("output_dir", "spinpair-out")
    if not isinstance(out_dir, str) or not out_dir:
        col.add("output_dir", f"expected a path, got {out_dir!r}")
    else:
        problem = _writable_problem(out_dir)
        if problem:
            col.add("output_dir", problem)

    if col.items:
        return None, col.items
    hf = HyperfineTensor.fitted() if not hf_kw else HyperfineTensor.from_components(
        hf_kw.get("a_zz", HyperfineTensor.fitted().a[2, 2]), hf_kw.get("a_perp", HyperfineTensor.fitted().a[0, 0]), hf_kw.get("a_xz", 0.0),
    )
    system = SystemConfig(**sys_kw, hyperfine=hf, readout=ReadoutModel(**ro_kw))
    noise = None
    if enabled:
        noise = NoiseModel(**noise_kw, t1_electron=system.t1_electron * 1e6, t1_nuclear=system.t1_nuclear * 1e6)
    kwargs = dict(
        system=system, noise=noise, drive=DriveSettings(**drive_kw), laser=LaserModel(**laser_kw), protocol=protocol,
        params=params, output_dir=out_dir, seed=seed, shots=shots, trajectories=traj, workers=workers,
    )
    return kwargs, []


def _writable_problem(path):
    """None when ``path`` exists as a writable directory or can be created."""
    p = os.path.abspath(path)
    while not os.path.exists(p):
        parent = os.path.dirname(p)
        if parent == p:
            break
        p = parent
    if not os.path.isdir(p):
        return f"{p} is not a directory"
    if not os.access(p, os.W_OK):
        return f"{p} is not writable"
    return None


def parse_config(text, env=None) -> RunConfig:
    """RunConfig from YAML text; raises ConfigurationError listing every
    violation as (key path, message, line)."""
    try:
        data, lines = _compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigurationError([("<yaml>", str(getattr(exc, "problem", exc)), line)]) from None
    kwargs, problems = _collect(data, lines, env)
    if problems:
        raise ConfigurationError(problems)
    return RunConfig(**kwargs)


def load_config(path=None, env=None) -> RunConfig:
    """Parse a config file; ``None`` gives the shipped defaults."""
    if path is None:
        return parse_config(example_config_text(), env)
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), env)


def validate_text(text, env=None):
    """Every violation in a config text, as (key path, message, line)."""
    try:
        parse_config(text, env)
    except ConfigurationError as exc:
        return list(exc.violations)
    return []


def apply_overrides(text, overrides):
    """Set dotted ``key=value`` pairs (YAML-parsed values) on a config text."""
    data = yaml.safe_load(text) or {}
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError([(item, "override must look like key.path=value", None)])
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = yaml.safe_load(raw)
    return yaml.safe_dump(data, sort_keys=False)
