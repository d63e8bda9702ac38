"""Trial data model, structural validation, and CSV ingest/export.

A :class:`TrialDataset` is stored column-wise (numpy arrays) and is read-only
after construction.  Row ``i`` corresponds to one participant
``(E_i, W_i, V_i, A_i, Y_i)``: entry time, covariate vector, availability
bits over arms ``0..K``, assigned arm and outcome.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import (
    ConfigError,
    EmptyConcurrentSetError,
    EmptyInputError,
    MissingColumnError,
    ParseError,
    StructureError,
)

_MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


@dataclass(frozen=True)
class TrialRecord:
    entry_time: float
    covariates: tuple
    availability: tuple
    arm: int
    outcome: float


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Column-oriented, immutable platform-trial dataset."""

    entry_time: np.ndarray
    covariates: np.ndarray
    availability: np.ndarray
    arm: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        e = _readonly(self.entry_time, float).reshape(-1)
        n = e.shape[0]
        w = np.asarray(self.covariates, dtype=float)
        if w.ndim == 1:
            w = w.reshape(n, -1) if n else w.reshape(0, 0)
        v = np.asarray(self.availability)
        if v.ndim == 1:
            v = v.reshape(n, -1)
        object.__setattr__(self, "entry_time", e)
        object.__setattr__(self, "covariates", _readonly(w, float))
        object.__setattr__(self, "availability", _readonly(v, np.int8))
        object.__setattr__(self, "arm", _readonly(self.arm, np.int64).reshape(-1))
        object.__setattr__(self, "outcome", _readonly(self.outcome, float).reshape(-1))
        names = tuple(self.covariate_names) or tuple(f"w{j + 1}" for j in range(w.shape[1]))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "metadata", dict(self.metadata))
        lengths = {len(self.arm), len(self.outcome), self.covariates.shape[0], self.availability.shape[0]}
        if lengths != {n}:
            raise ValueError(f"column lengths disagree: entry_time has {n} rows, others {sorted(lengths)}")

    @classmethod
    def from_records(cls, records: Sequence[TrialRecord], covariate_names=(), metadata=None):
        records = list(records)
        dims = {len(r.covariates) for r in records}
        if len(dims) > 1:
            raise StructureError(validate(records))
        p = dims.pop() if dims else 0
        k = max((len(r.availability) for r in records), default=1)
        return cls(
            entry_time=[r.entry_time for r in records],
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
            availability=np.array([r.availability for r in records]).reshape(len(records), k),
            arm=[r.arm for r in records],
            outcome=[r.outcome for r in records],
            covariate_names=covariate_names,
            metadata=metadata or {},
        )

    def __len__(self):
        return self.entry_time.shape[0]

    @property
    def n(self):
        return len(self)

    @property
    def p(self):
        return self.covariates.shape[1]

    @property
    def arm_count(self):
        return self.availability.shape[1]

    def record(self, i) -> TrialRecord:
        return TrialRecord(
            entry_time=float(self.entry_time[i]),
            covariates=tuple(float(x) for x in self.covariates[i]),
            availability=tuple(int(x) for x in self.availability[i]),
            arm=int(self.arm[i]),
            outcome=float(self.outcome[i]),
        )

    @property
    def records(self):
        return [self.record(i) for i in range(len(self))]

    def __iter__(self):
        return (self.record(i) for i in range(len(self)))

    def take(self, rows) -> "TrialDataset":
        """Subset by boolean mask or integer index, preserving order."""
        rows = np.asarray(rows)
        return TrialDataset(
            entry_time=self.entry_time[rows],
            covariates=self.covariates[rows],
            availability=self.availability[rows],
            arm=self.arm[rows],
            outcome=self.outcome[rows],
            covariate_names=self.covariate_names,
            metadata=self.metadata,
        )

    def sorted_by_entry(self) -> "TrialDataset":
        order = np.argsort(self.entry_time, kind="stable")
        if np.all(order[:-1] < order[1:]):
            return self
        return self.take(order)

    def with_outcome(self, outcome) -> "TrialDataset":
        return TrialDataset(
            self.entry_time, self.covariates, self.availability, self.arm, outcome,
            self.covariate_names, self.metadata,
        )

    def with_covariates(self, covariates, names=None) -> "TrialDataset":
        return TrialDataset(
            self.entry_time, covariates, self.availability, self.arm, self.outcome,
            names if names is not None else (), self.metadata,
        )

    def to_frame(self):
        import pandas as pd

        cols = {"e": self.entry_time}
        for j, name in enumerate(self.covariate_names):
            cols[name] = self.covariates[:, j]
        for k in range(self.arm_count):
            cols[f"v{k}"] = self.availability[:, k]
        cols["a"] = self.arm
        cols["y"] = self.outcome
        return pd.DataFrame(cols)

    def equals(self, other: "TrialDataset") -> bool:
        return (
            self.covariate_names == other.covariate_names
            and np.array_equal(self.entry_time, other.entry_time)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.availability, other.availability)
            and np.array_equal(self.arm, other.arm)
            and np.array_equal(self.outcome, other.outcome)
        )


@dataclass(frozen=True)
class ContrastSpec:
    """Treated arm ``k`` plus the availability pattern defining the concurrent population.

    ``pattern`` maps arm index to the required availability bit; the treated
    arm is always required to be available.  ``ContrastSpec(1, {2: 1})``
    targets ``E[Y(1) - Y(0) | V_1 = 1, V_2 = 1]``.
    """

    treated_arm: int = 1
    pattern: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.treated_arm < 1:
            raise ConfigError(f"treated arm must be >= 1, got {self.treated_arm}")
        pattern = {int(k): int(v) for k, v in dict(self.pattern).items()}
        if pattern.get(self.treated_arm, 1) != 1:
            raise ConfigError("the treated arm must be available in the conditioning pattern")
        pattern[self.treated_arm] = 1
        if any(v not in (0, 1) for v in pattern.values()):
            raise ConfigError("pattern bits must be 0 or 1")
        object.__setattr__(self, "pattern", dict(sorted(pattern.items())))

    def mask(self, dataset: TrialDataset) -> np.ndarray:
        v = dataset.availability
        out = np.ones(len(dataset), dtype=bool)
        for k, bit in self.pattern.items():
            if k >= v.shape[1]:
                raise ConfigError(f"arm {k} not present in dataset with {v.shape[1]} arms")
            out &= v[:, k] == bit
        return out

    @property
    def label(self):
        cond = ",".join(f"V{k}={b}" for k, b in self.pattern.items())
        return f"arm{self.treated_arm}|{cond}"

    def __hash__(self):
        return hash((self.treated_arm, tuple(self.pattern.items())))


def validate(data) -> list[str]:
    """List structural violations; empty iff the dataset is well formed.

    Accepts a :class:`TrialDataset` or a sequence of :class:`TrialRecord`.
    """
    out = []
    if not isinstance(data, TrialDataset):
        records = list(data)
        if records:
            p0 = len(records[0].covariates)
            for i, r in enumerate(records):
                if len(r.covariates) != p0:
                    out.append(
                        f"row {i}: covariate dimension {len(r.covariates)} differs from {p0} in row 0"
                    )
        if out:
            for i, r in enumerate(records):
                out.extend(_record_violations(i, r))
            return out
        data = TrialDataset.from_records(records)

    ds = data
    if ds.p != len(ds.covariate_names):
        out.append(f"covariate_names has {len(ds.covariate_names)} entries for {ds.p} covariates")
    v, a = ds.availability, ds.arm
    kplus1 = ds.arm_count
    bad_bits = np.flatnonzero(~np.isin(v, (0, 1)).all(axis=1))
    out += [f"row {i}: availability bits must be 0/1" for i in bad_bits]
    if kplus1 == 0:
        out.append("availability has no columns (control arm missing)")
        return out
    out += [f"row {i}: control arm unavailable (availability[0]=0)" for i in np.flatnonzero(v[:, 0] != 1)]
    bad_arm = (a < 0) | (a >= kplus1)
    out += [f"row {i}: arm {a[i]} outside 0..{kplus1 - 1}" for i in np.flatnonzero(bad_arm)]
    ok = ~bad_arm
    idx = np.flatnonzero(ok)
    unavailable = idx[v[idx, a[idx]] != 1]
    out += [f"assigned unavailable arm {a[i]} at row {i}" for i in unavailable]
    for name, col in (("entry_time", ds.entry_time), ("outcome", ds.outcome)):
        out += [f"row {i}: {name} is not finite" for i in np.flatnonzero(~np.isfinite(col))]
    if ds.p:
        out += [f"row {i}: covariates not finite" for i in np.flatnonzero(~np.isfinite(ds.covariates).all(axis=1))]
    dec = np.flatnonzero(np.diff(ds.entry_time) < 0)
    out += [f"row {i + 1}: entry_time decreases (not sorted)" for i in dec]
    return out


def _record_violations(i, r: TrialRecord):
    out = []
    if not r.availability or r.availability[0] != 1:
        out.append(f"row {i}: control arm unavailable (availability[0]=0)")
    if not 0 <= r.arm < len(r.availability):
        out.append(f"row {i}: arm {r.arm} outside 0..{len(r.availability) - 1}")
    elif r.availability[r.arm] != 1:
        out.append(f"assigned unavailable arm {r.arm} at row {i}")
    return out


def require_valid(dataset: TrialDataset) -> TrialDataset:
    problems = validate(dataset)
    if problems:
        raise StructureError(problems)
    return dataset


def concurrent_fraction(dataset: TrialDataset, contrast: ContrastSpec) -> float:
    return float(contrast.mask(dataset).mean()) if len(dataset) else 0.0


def concurrent_subset(dataset: TrialDataset, contrast: ContrastSpec) -> TrialDataset:
    """Rows satisfying the contrast's availability pattern, in original order."""
    m = contrast.mask(dataset)
    if not m.any():
        raise EmptyConcurrentSetError(
            f"no records satisfy {contrast.label}; the concurrent effect is undefined"
        )
    if m.all():
        return dataset
    return dataset.take(m)


# ---------------------------------------------------------------------------
# CSV schema, ingest and export
# ---------------------------------------------------------------------------


@dataclass
class Schema:
    """Column mapping from a CSV file onto the data model.

    Availability of arm ``k`` comes either from an explicit 0/1 column
    (``availability``) or from a threshold rule ``V_k = 1[E > t_k]``
    (``thresholds``) applied to the raw entry time.  ``categorical``
    columns are one-hot encoded (first level dropped, levels sorted).
    """

    entry_time: str = "e"
    arm: str = "a"
    outcome: str = "y"
    covariates: list = field(default_factory=list)
    categorical: list = field(default_factory=list)
    availability: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    arm_labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.availability = {int(k): v for k, v in self.availability.items()}
        self.thresholds = {int(k): float(v) for k, v in self.thresholds.items()}

    @classmethod
    def from_mapping(cls, m: Mapping) -> "Schema":
        known = {"entry_time", "arm", "outcome", "covariates", "categorical",
                 "availability", "thresholds", "arm_labels"}
        extra = set(m) - known
        if extra:
            raise ConfigError(f"unknown schema keys: {sorted(extra)}")
        return cls(**dict(m))

    @classmethod
    def from_file(cls, path) -> "Schema":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"schema file not found: {path}")
        try:
            return cls.from_mapping(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"schema {path} is not valid JSON: {exc.msg}", line=exc.lineno) from None

    @classmethod
    def infer(cls, header: Sequence[str]) -> "Schema":
        """Default naming convention: ``e``, ``w*`` covariates, ``v<k>`` availability, ``a``, ``y``."""
        covs = [h for h in header if h.startswith("w")]
        avail = {}
        for h in header:
            if h.startswith("v") and h[1:].isdigit():
                avail[int(h[1:])] = h
        return cls(covariates=covs, availability=avail)

    def to_mapping(self):
        return {
            "entry_time": self.entry_time, "arm": self.arm, "outcome": self.outcome,
            "covariates": list(self.covariates), "categorical": list(self.categorical),
            "availability": {str(k): v for k, v in self.availability.items()},
            "thresholds": {str(k): v for k, v in self.thresholds.items()},
            "arm_labels": dict(self.arm_labels),
        }


def _parse_float(value, row, column):
    s = value.strip()
    if s.lower() in _MISSING_TOKENS:
        raise ParseError(row, column, value, "missing value")
    try:
        x = float(s)
    except ValueError:
        raise ParseError(row, column, value) from None
    if not math.isfinite(x):
        raise ParseError(row, column, value, "not finite")
    return x


def _parse_int(value, row, column, labels=None):
    s = value.strip()
    if labels and s in labels:
        return int(labels[s])
    x = _parse_float(value, row, column)
    if x != int(x):
        raise ParseError(row, column, value, "not an integer")
    return int(x)


def ingest_csv(path, schema: Schema | None = None, normalize_entry_time: bool = False) -> TrialDataset:
    """Read a CSV file into a validated dataset sorted by entry time.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    Missing values are rejected, never imputed.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInputError(f"{path} is empty") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    if not rows:
        raise EmptyInputError(f"{path} has a header but no data rows")
    schema = schema or Schema.infer(header)
    col = {h: j for j, h in enumerate(header)}

    def need(name):
        if name not in col:
            raise MissingColumnError(name, header)
        return col[name]

    for name in [schema.entry_time, schema.arm, schema.outcome, *schema.covariates,
                 *schema.categorical, *schema.availability.values()]:
        need(name)
    for r, values in enumerate(rows, start=1):
        if len(values) != len(header):
            raise ParseError(r, "*", ",".join(values), f"expected {len(header)} fields, got {len(values)}")

    def numeric(name):
        j = col[name]
        return np.array([_parse_float(values[j], r, name) for r, values in enumerate(rows, start=1)])

    e_raw = numeric(schema.entry_time)
    y = numeric(schema.outcome)
    ja = col[schema.arm]
    a = np.array([_parse_int(values[ja], r, schema.arm, schema.arm_labels) for r, values in enumerate(rows, start=1)])

    names, blocks = [], []
    for c in schema.covariates:
        blocks.append(numeric(c)[:, None])
        names.append(c)
    for c in schema.categorical:
        j = col[c]
        raw = []
        for r, values in enumerate(rows, start=1):
            s = values[j].strip()
            if s.lower() in _MISSING_TOKENS:
                raise ParseError(r, c, values[j], "missing value")
            raw.append(s)
        levels = sorted(set(raw))
        for lev in levels[1:]:
            blocks.append(np.array([x == lev for x in raw], dtype=float)[:, None])
            names.append(f"{c}={lev}")
    w = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))

    arms = set(schema.availability) | set(schema.thresholds) | {0}
    k_max = max(max(arms), int(a.max()) if len(a) else 0)
    v = np.zeros((len(rows), k_max + 1), dtype=np.int8)
    v[:, 0] = 1
    for k in range(1, k_max + 1):
        if k in schema.availability:
            name = schema.availability[k]
            j = col[name]
            bits = np.array([_parse_int(values[j], r, name) for r, values in enumerate(rows, start=1)])
            bad = np.flatnonzero(~np.isin(bits, (0, 1)))
            if bad.size:
                raise ParseError(int(bad[0]) + 1, name, rows[bad[0]][j], "availability must be 0 or 1")
            v[:, k] = bits
        elif k in schema.thresholds:
            v[:, k] = e_raw > schema.thresholds[k]
        else:
            raise ConfigError(f"no availability column or threshold for arm {k}")
    if 0 in schema.availability:
        j = col[schema.availability[0]]
        v0 = np.array([_parse_int(values[j], r, schema.availability[0]) for r, values in enumerate(rows, start=1)])
        v[:, 0] = v0

    e = e_raw
    if normalize_entry_time:
        lo, hi = e_raw.min(), e_raw.max()
        e = (e_raw - lo) / (hi - lo) if hi > lo else np.zeros_like(e_raw)

    ds = TrialDataset(e, w, v, a, y, covariate_names=tuple(names),
                      metadata={"source": str(path), "normalized_entry_time": bool(normalize_entry_time)})
    ds = ds.sorted_by_entry()
    return require_valid(ds)


def export_csv(dataset: TrialDataset, path) -> Schema:
    """Write the dataset as CSV (floats at full precision) and return the schema to read it back."""
    schema = Schema(
        covariates=list(dataset.covariate_names),
        availability={k: f"v{k}" for k in range(dataset.arm_count)},
    )
    header = ["e", *dataset.covariate_names, *(f"v{k}" for k in range(dataset.arm_count)), "a", "y"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for i in range(len(dataset)):
            wr.writerow([
                repr(float(dataset.entry_time[i])),
                *(repr(float(x)) for x in dataset.covariates[i]),
                *(int(b) for b in dataset.availability[i]),
                int(dataset.arm[i]),
                repr(float(dataset.outcome[i])),
            ])
    return schema


def records_to_dataset(records: Iterable[TrialRecord], covariate_names=()) -> TrialDataset:
    return require_valid(TrialDataset.from_records(list(records), covariate_names).sorted_by_entry())
