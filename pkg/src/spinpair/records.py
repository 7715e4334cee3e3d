"""Experiment records and their CSV and manifest serialisation."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import BASIS_HEADER
from .readout import ReadoutModel


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(snapshot) -> str:
    return hashlib.sha256(canonical_json(snapshot).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ExperimentRecord:
    """One sweep: x axis, per-point photon counts and derived columns.

    ``counts_reference`` holds the interleaved no-drive shots used to
    normalise the fluorescence into an electron population.
    """

    name: str
    x_label: str
    x: np.ndarray
    counts_signal: np.ndarray
    counts_reference: np.ndarray
    shots: int
    readout: ReadoutModel
    columns: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, float)
        for name in ("counts_signal", "counts_reference"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != x.shape:
                raise ValueError(f"{name} must match the x axis")
            object.__setattr__(self, name, arr)
        cols = {k: np.asarray(v, float) for k, v in self.columns.items()}
        for k, v in cols.items():
            if v.shape != x.shape:
                raise ValueError(f"column {k!r} must match the x axis")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "columns", cols)

    @property
    def population(self):
        """Normalised electron |up> population from the counts."""
        scale = self.shots * self.readout.counts_bright * self.readout.contrast
        return (self.counts_reference - self.counts_signal) / scale

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# record: {self.name}\r\n")
        buf.write(f"# {BASIS_HEADER}\r\n")
        buf.write(f"# shots_per_point: {self.shots}\r\n")
        buf.write(f"# readout: {canonical_json(asdict(self.readout))}\r\n")
        buf.write(f"# metadata: {canonical_json(self.metadata)}\r\n")
        w = csv.writer(buf, lineterminator="\r\n")
        extra = sorted(self.columns)
        w.writerow([self.x_label, "counts_signal", "counts_reference", "population", *extra])
        pop = self.population
        for i in range(len(self.x)):
            w.writerow([_fmt(self.x[i]), _fmt(self.counts_signal[i]), _fmt(self.counts_reference[i]), _fmt(pop[i])] + [_fmt(self.columns[k][i]) for k in extra])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def read_csv(cls, path) -> "ExperimentRecord":
        with open(path, newline="", encoding="utf-8") as fh:
            text = fh.read()
        head, body = {}, []
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, val = line[2:].partition(": ")
                head[key] = val
            elif line:
                body.append(line)
        reader = list(csv.reader(body))
        cols = reader[0]
        data = np.array([[float(v) for v in r] for r in reader[1:]]).reshape(-1, len(cols))
        ro = json.loads(head["readout"])
        extra = {c: data[:, k] for k, c in enumerate(cols) if k >= 4}
        return cls(
            head["record"], cols[0], data[:, 0], data[:, 1].astype(np.int64), data[:, 2].astype(np.int64),
            int(head["shots_per_point"]), ReadoutModel(**ro), extra, json.loads(head["metadata"]),
        )


def write_manifest(path, protocol, figure, snapshot, seed, extra=None):
    """Compact key: value provenance file next to the CSV."""
    lines = [
        f"protocol: {protocol}",
        f"figure: {figure}",
        f"config_hash: {config_hash(snapshot)}",
        f"seed: {seed}",
    ]
    for key, val in sorted((extra or {}).items()):
        lines.append(f"{key}: {canonical_json(val)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
