"""EHR data model, preprocessing and patient-level splitting.

A :class:`ClinicalRecord` holds one ICU admission in raw units. Preprocessing
imputes gaps by last observation carried forward (falling back to the
variable's normal value), appends an observation mask per channel, one-hot
encodes categorical/binary channels and standardizes numeric ones with
statistics taken from the training partition only.
"""

from __future__ import annotations

import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SchemaError
from .schema import Schema, Variable


@dataclass
class ClinicalRecord:
    admission_id: str
    patient_id: str
    demographics: dict
    variables: tuple[str, ...]
    values: np.ndarray  # (T, V) object array of raw readings
    observed: np.ndarray  # (T, V) bool
    label: int

    def __post_init__(self):
        self.variables = tuple(self.variables)
        self.values = np.asarray(self.values, dtype=object)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise SchemaError(f"{self.admission_id}: physiology must be a non-empty T x V matrix")
        if self.values.shape != self.observed.shape:
            raise SchemaError(f"{self.admission_id}: values and observed masks differ in shape")
        if self.values.shape[1] != len(self.variables):
            raise SchemaError(f"{self.admission_id}: every hour must have {len(self.variables)} cells")
        if self.label not in (0, 1):
            raise SchemaError(f"{self.admission_id}: label must be 0 or 1, got {self.label!r}")
        self.label = int(self.label)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def series(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        j = self.variables.index(name)
        return self.values[:, j], self.observed[:, j]


@dataclass
class EncodedRecord:
    admission_id: str
    demographics_encoded: np.ndarray  # (n_demo,)
    physiology_encoded: np.ndarray  # (T, n_in)
    label: int


@dataclass
class NormalizationStats:
    """Per-variable mean/std of numeric channels after imputation."""

    physio_mean: dict[str, float] = field(default_factory=dict)
    physio_std: dict[str, float] = field(default_factory=dict)
    demo_mean: dict[str, float] = field(default_factory=dict)
    demo_std: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "physio_mean": self.physio_mean,
            "physio_std": self.physio_std,
            "demo_mean": self.demo_mean,
            "demo_std": self.demo_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(**{k: {n: float(x) for n, x in d[k].items()} for k in
                      ("physio_mean", "physio_std", "demo_mean", "demo_std")})


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {"train": self.train, "validation": self.validation, "test": self.test, "seed": self.seed},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        return cls(list(d["train"]), list(d["validation"]), list(d["test"]), int(d["seed"]))


# --------------------------------------------------------------------------
# imputation and encoding


def impute_series(values: Sequence, observed: Sequence[bool], normal) -> list:
    """Last observation carried forward; the normal value before any
    observation exists."""
    out, last = [], None
    for v, seen in zip(values, observed):
        if seen and v is not None:
            last = v
        out.append(normal if last is None else last)
    return out


def _check_variables(record: ClinicalRecord, schema: Schema) -> list[int]:
    cols = []
    for name in schema.physio_names:
        if name not in record.variables:
            raise SchemaError(f"{record.admission_id}: missing variable {name!r}")
        cols.append(record.variables.index(name))
    unknown = set(record.variables) - set(schema.physio_names)
    if unknown:
        raise SchemaError(f"{record.admission_id}: unknown variable(s) {sorted(unknown)}")
    return cols


def _imputed_physiology(record: ClinicalRecord, schema: Schema, hours: int | None):
    """Imputed raw values and masks for every schema channel, optionally
    truncated/extended to ``hours`` rows (extra rows count as unobserved)."""
    cols = _check_variables(record, schema)
    T = record.T if hours is None else hours
    out = []
    for var, j in zip(schema.physiology, cols):
        vals = list(record.values[:T, j])
        seen = list(record.observed[:T, j])
        vals += [None] * (T - len(vals))
        seen += [False] * (T - len(seen))
        if var.is_numeric:
            vals = [None if v is None else float(v) for v in vals]
        out.append((var, impute_series(vals, seen, var.normal), np.asarray(seen, dtype=float)))
    return out


def _demo_value(record: ClinicalRecord, var: Variable):
    v = record.demographics.get(var.name)
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return var.normal
    return float(v) if var.is_numeric else v


def _safe_std(name: str, std: float) -> float:
    if not np.isfinite(std) or std <= 0.0:
        warnings.warn(f"zero standard deviation for {name!r}; using 1", RuntimeWarning, stacklevel=3)
        return 1.0
    return std


def _one_hot(var: Variable, value, where: str) -> np.ndarray:
    idx = var.category_index(value)
    if idx is None:
        raise SchemaError(f"{where}: {value!r} is not a category of {var.name}")
    vec = np.zeros(var.width)
    vec[idx] = 1.0
    return vec


def compute_stats(records: Iterable[ClinicalRecord], schema: Schema, hours: int | None = None) -> NormalizationStats:
    """Mean/std of every numeric channel after imputation; pass training
    records only."""
    physio = defaultdict(list)
    demo = defaultdict(list)
    for rec in records:
        for var, vals, _ in _imputed_physiology(rec, schema, hours):
            if var.is_numeric:
                physio[var.name].extend(vals)
        for var in schema.demographics:
            if var.is_numeric:
                demo[var.name].append(_demo_value(rec, var))
    if not physio and not demo:
        raise ValueError("cannot compute statistics from an empty record set")
    stats = NormalizationStats()
    for name, xs in physio.items():
        a = np.asarray(xs, dtype=float)
        stats.physio_mean[name] = float(a.mean())
        stats.physio_std[name] = float(a.std())
    for name, xs in demo.items():
        a = np.asarray(xs, dtype=float)
        stats.demo_mean[name] = float(a.mean())
        stats.demo_std[name] = float(a.std())
    return stats


def encode_demographics(record: ClinicalRecord, stats: NormalizationStats, schema: Schema) -> np.ndarray:
    parts = []
    for var in schema.demographics:
        value = _demo_value(record, var)
        if var.is_numeric:
            std = _safe_std(var.name, stats.demo_std[var.name])
            parts.append(np.array([(value - stats.demo_mean[var.name]) / std]))
        else:
            parts.append(_one_hot(var, value, record.admission_id))
    return np.concatenate(parts) if parts else np.zeros(0)


def preprocess_record(record: ClinicalRecord, stats: NormalizationStats, schema: Schema,
                      hours: int | None = None) -> EncodedRecord:
    """Impute, mask, one-hot and standardize one admission.

    Args:
        record: raw admission.
        stats: training-partition statistics from :func:`compute_stats`.
        schema: variable schema (also supplies normal values).
        hours: if given, keep the first ``hours`` rows, padding shorter
            records with unobserved (carried-forward) rows.

    Returns:
        EncodedRecord with a ``(T, schema.physio_width)`` physiology matrix.
    """
    blocks = []
    for var, vals, mask in _imputed_physiology(record, schema, hours):
        if var.is_numeric:
            std = _safe_std(var.name, stats.physio_std[var.name])
            col = (np.asarray(vals, dtype=float) - stats.physio_mean[var.name]) / std
            blocks.append(col[:, None])
        else:
            blocks.append(np.stack([_one_hot(var, v, record.admission_id) for v in vals]))
        blocks.append(mask[:, None])
    return EncodedRecord(
        admission_id=record.admission_id,
        demographics_encoded=encode_demographics(record, stats, schema),
        physiology_encoded=np.concatenate(blocks, axis=1),
        label=record.label,
    )


@dataclass
class EncodedBatch:
    """Stacked encoded records, ready for the model."""

    ids: list[str]
    physiology: np.ndarray  # (B, T, n_in)
    demographics: np.ndarray  # (B, n_demo)
    labels: np.ndarray  # (B,)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "EncodedBatch":
        idx = np.asarray(idx, dtype=int)
        return EncodedBatch([self.ids[i] for i in idx], self.physiology[idx],
                            self.demographics[idx], self.labels[idx])


def stack_records(encoded: Sequence[EncodedRecord]) -> EncodedBatch:
    if not encoded:
        raise ValueError("no records to stack")
    lengths = {e.physiology_encoded.shape[0] for e in encoded}
    if len(lengths) != 1:
        raise SchemaError(f"records have different lengths {sorted(lengths)}; pass hours= when preprocessing")
    return EncodedBatch(
        ids=[e.admission_id for e in encoded],
        physiology=np.stack([e.physiology_encoded for e in encoded]).astype(np.float64),
        demographics=np.stack([e.demographics_encoded for e in encoded]).astype(np.float64),
        labels=np.array([e.label for e in encoded], dtype=np.float64),
    )


# --------------------------------------------------------------------------
# splitting


def split_dataset(records: Sequence[ClinicalRecord], fractions=(0.7, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Random patient-grouped train/validation/test partition.

    Patients (not admissions) are shuffled and cut at the rounded target
    counts, so every admission of a patient lands in one partition.
    """
    if not records:
        raise ValueError("cannot split an empty record list")
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    ids = [r.admission_id for r in records]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate admission_id in record list")

    by_patient = defaultdict(list)
    for r in records:
        by_patient[str(r.patient_id)].append(r.admission_id)
    patients = sorted(by_patient)
    order = np.random.default_rng(seed).permutation(len(patients))
    n = len(patients)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    parts = ([], [], [])
    for rank, i in enumerate(order):
        part = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
        parts[part].extend(by_patient[patients[i]])
    return DatasetSplit(*(sorted(p) for p in parts), seed=int(seed))


# --------------------------------------------------------------------------
# JSON-lines interchange


def _json_value(v):
    if v is None:
        return None
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    return v


def record_to_json(record: ClinicalRecord) -> dict:
    hours = []
    for t in range(record.T):
        hours.append({
            "t": t + 1,
            "values": {n: (_json_value(record.values[t, j]) if record.observed[t, j] else None)
                       for j, n in enumerate(record.variables)},
            "observed": {n: bool(record.observed[t, j]) for j, n in enumerate(record.variables)},
        })
    return {
        "admission_id": record.admission_id,
        "patient_id": record.patient_id,
        "demographics": {k: _json_value(v) for k, v in record.demographics.items()},
        "hours": hours,
        "label": record.label,
    }


def record_from_json(d: dict) -> ClinicalRecord:
    hours = sorted(d["hours"], key=lambda h: h["t"])
    if not hours:
        raise SchemaError(f"{d.get('admission_id')}: record has no hours")
    names = tuple(hours[0]["values"].keys())
    values = np.empty((len(hours), len(names)), dtype=object)
    observed = np.zeros((len(hours), len(names)), dtype=bool)
    for t, h in enumerate(hours):
        if set(h["values"]) != set(names):
            raise SchemaError(f"{d['admission_id']}: hour {h['t']} has a different variable set")
        for j, n in enumerate(names):
            values[t, j] = h["values"][n]
            observed[t, j] = bool(h.get("observed", {}).get(n, h["values"][n] is not None))
    return ClinicalRecord(
        admission_id=str(d["admission_id"]),
        patient_id=str(d["patient_id"]),
        demographics=dict(d["demographics"]),
        variables=names,
        values=values,
        observed=observed,
        label=d["label"],
    )


def write_records(path: str | Path, records: Iterable[ClinicalRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r), separators=(",", ":")) + "\n")


def read_records(path: str | Path) -> list[ClinicalRecord]:
    records, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = record_from_json(json.loads(line))
            except (KeyError, json.JSONDecodeError) as exc:
                raise SchemaError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if rec.admission_id in seen:
                raise SchemaError(f"{path}:{lineno}: duplicate admission_id {rec.admission_id}")
            seen.add(rec.admission_id)
            records.append(rec)
    return records


def encode_partitions(records: Sequence[ClinicalRecord], split: DatasetSplit, schema: Schema,
                      hours: int | None = None):
    """Fit statistics on the training partition and encode all three.

    Returns ``(stats, train, validation, test)`` as :class:`EncodedBatch`
    objects (a partition with no records comes back as ``None``).
    """
    by_id = {r.admission_id: r for r in records}
    missing = [i for part in (split.train, split.validation, split.test) for i in part if i not in by_id]
    if missing:
        raise SchemaError(f"split references unknown admissions, e.g. {missing[:3]}")
    train_recs = [by_id[i] for i in split.train]
    if hours is None:
        hours = max(r.T for r in records)
    stats = compute_stats(train_recs, schema, hours)
    out = [stats]
    for part in (split.train, split.validation, split.test):
        enc = [preprocess_record(by_id[i], stats, schema, hours) for i in part]
        out.append(stack_records(enc) if enc else None)
    return tuple(out)
