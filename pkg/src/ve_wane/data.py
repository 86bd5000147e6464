"""Column-oriented trial dataset with CSV ingestion.

The CSV schema is ``entry,arm,u,delta,r,gamma,psi,x1,...,xk``. A missing psi
is written/read as an empty field and mapped to 0 with ``psi_valid`` False.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import ParticipantRecord, TrialTimeline, validate_record


@dataclass
class TrialData:
    """Arrays of per-participant observed data, one row per subject."""

    entry: np.ndarray
    x: np.ndarray  # (n, k)
    arm: np.ndarray
    u: np.ndarray
    infected: np.ndarray
    r_time: np.ndarray
    gamma: np.ndarray
    psi: np.ndarray
    psi_valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.entry = np.asarray(self.entry, dtype=float)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.x.shape[0] != self.entry.shape[0] and self.x.shape[1] == self.entry.shape[0]:
            self.x = self.x.T
        self.arm = np.asarray(self.arm, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=float)
        self.infected = np.asarray(self.infected, dtype=np.int64)
        self.r_time = np.asarray(self.r_time, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=np.int64)
        self.psi = np.asarray(self.psi, dtype=np.int64)
        if self.psi_valid is None:
            self.psi_valid = np.ones(self.n, dtype=bool)
        else:
            self.psi_valid = np.asarray(self.psi_valid, dtype=bool)
        lengths = {
            arr.shape[0]
            for arr in (self.entry, self.x, self.arm, self.u, self.infected,
                        self.r_time, self.gamma, self.psi, self.psi_valid)
        }
        if len(lengths) != 1:
            raise ValueError(f"column lengths differ: {sorted(lengths)}")

    @property
    def n(self) -> int:
        return self.entry.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    def record(self, i: int) -> ParticipantRecord:
        return ParticipantRecord(
            entry=float(self.entry[i]),
            x=self.x[i],
            arm=int(self.arm[i]),
            u=float(self.u[i]),
            infected=int(self.infected[i]),
            r_time=float(self.r_time[i]),
            gamma=int(self.gamma[i]),
            psi=int(self.psi[i]),
            psi_valid=bool(self.psi_valid[i]),
        )

    def records(self):
        for i in range(self.n):
            yield self.record(i)

    @staticmethod
    def from_records(records) -> "TrialData":
        records = list(records)
        if not records:
            raise ValueError("no records")
        return TrialData(
            entry=[r.entry for r in records],
            x=np.vstack([r.x for r in records]),
            arm=[r.arm for r in records],
            u=[r.u for r in records],
            infected=[r.infected for r in records],
            r_time=[r.r_time for r in records],
            gamma=[r.gamma for r in records],
            psi=[r.psi for r in records],
            psi_valid=[r.psi_valid for r in records],
        )

    def validate(self, tl: TrialTimeline, max_report: int = 50) -> list[str]:
        """All record-level violations, prefixed with the row index."""
        problems = []
        for i in range(self.n):
            for msg in validate_record(self.record(i), tl):
                problems.append(f"row {i}: {msg}")
                if len(problems) >= max_report:
                    problems.append("... further violations suppressed")
                    return problems
        return problems

    def subset(self, idx) -> "TrialData":
        return TrialData(
            entry=self.entry[idx], x=self.x[idx], arm=self.arm[idx], u=self.u[idx],
            infected=self.infected[idx], r_time=self.r_time[idx], gamma=self.gamma[idx],
            psi=self.psi[idx], psi_valid=self.psi_valid[idx],
        )


def _fmt(value: float) -> str:
    return repr(float(value))


def write_csv(data: TrialData, path) -> None:
    """Write the dataset in the canonical CSV schema (lossless float repr)."""
    header = ["entry", "arm", "u", "delta", "r", "gamma", "psi"]
    header += [f"x{j + 1}" for j in range(data.n_covariates)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.n):
            psi_field = str(int(data.psi[i])) if data.psi_valid[i] else ""
            row = [
                _fmt(data.entry[i]), str(int(data.arm[i])), _fmt(data.u[i]),
                str(int(data.infected[i])), _fmt(data.r_time[i]),
                str(int(data.gamma[i])), psi_field,
            ]
            row += [_fmt(v) for v in data.x[i]]
            w.writerow(row)


def read_csv(path) -> TrialData:
    """Read a dataset in the canonical CSV schema."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV") from None
        expected = ["entry", "arm", "u", "delta", "r", "gamma", "psi"]
        if [h.strip() for h in header[:7]] != expected:
            raise ValueError(
                f"{path}: header must start with {','.join(expected)}, got {header[:7]}"
            )
        x_names = [h.strip() for h in header[7:]]
        for j, name in enumerate(x_names):
            if name != f"x{j + 1}":
                raise ValueError(f"{path}: covariate columns must be x1..xk, got {name!r}")
        k = len(x_names)
        cols = {name: [] for name in ("entry", "arm", "u", "delta", "r", "gamma")}
        psi, psi_valid, xs = [], [], []
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 7 + k:
                raise ValueError(f"{path}:{ln}: expected {7 + k} fields, got {len(row)}")
            cols["entry"].append(float(row[0]))
            cols["arm"].append(int(row[1]))
            cols["u"].append(float(row[2]))
            cols["delta"].append(int(row[3]))
            cols["r"].append(float(row[4]))
            cols["gamma"].append(int(row[5]))
            if row[6].strip() == "":
                psi.append(0)
                psi_valid.append(False)
            else:
                psi.append(int(row[6]))
                psi_valid.append(True)
            xs.append([float(v) for v in row[7:]])
    if not cols["entry"]:
        raise ValueError(f"{path}: no data rows")
    return TrialData(
        entry=cols["entry"],
        x=np.asarray(xs, dtype=float).reshape(len(psi), k),
        arm=cols["arm"],
        u=cols["u"],
        infected=cols["delta"],
        r_time=cols["r"],
        gamma=cols["gamma"],
        psi=psi,
        psi_valid=psi_valid,
    )
