"""Synthetic ICU cohorts with planted cohort/course/interaction structure.

Each admission is generated in three steps:

1. draw a true demographic cohort and emit demographics near its centroid;
2. draw mixture weights over the true course archetypes and emit physiology
   as the weighted archetype trajectories plus Gaussian noise, then hide a
   random fraction of cells;
3. draw the label from a logistic model that is linear in the archetype
   weights, the cohort risk and the course-by-cohort interaction offsets.

The ground truth (cohort index, archetype weights, logit) is returned next
to the records so tests can fit oracles on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

from .data import ClinicalRecord
from .schema import Schema, synthetic_schema


@dataclass
class SyntheticSpec:
    n_records: int = 1000
    T: int = 8
    n_cohorts_true: int = 3
    n_courses_true: int = 4
    cohort_risk_weights: tuple = (0.0, 0.0, 0.0)
    course_risk_weights: tuple = (2.0, -2.0, 1.0, -1.0)
    interaction_offsets: tuple = ()  # n_courses_true x n_cohorts_true; empty -> zeros
    intercept: float = 0.0
    noise_std: float = 0.3
    missing_rate: float = 0.2
    course_concentration: float = 0.3  # Dirichlet concentration of archetype weights
    readmission_rate: float = 0.0  # chance an admission reuses the previous patient
    seed: int = 0

    def __post_init__(self):
        for name in ("n_records", "T", "n_cohorts_true", "n_courses_true"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.course_concentration <= 0:
            raise ValueError("course_concentration must be > 0")
        if not 0.0 <= self.readmission_rate < 1.0:
            raise ValueError("readmission_rate must lie in [0, 1)")
        if len(self.cohort_risk_weights) != self.n_cohorts_true:
            raise ValueError("cohort_risk_weights needs one entry per cohort")
        if len(self.course_risk_weights) != self.n_courses_true:
            raise ValueError("course_risk_weights needs one entry per course")
        if len(self.interaction_offsets) and np.shape(self.interaction_offsets) != (
                self.n_courses_true, self.n_cohorts_true):
            raise ValueError("interaction_offsets must be n_courses_true x n_cohorts_true")

    @property
    def interaction_matrix(self) -> np.ndarray:
        if len(self.interaction_offsets) == 0:
            return np.zeros((self.n_courses_true, self.n_cohorts_true))
        return np.asarray(self.interaction_offsets, dtype=float)

    @classmethod
    def planted(cls, n_records=2000, T=8, separation=4.0, seed=0, **overrides) -> "SyntheticSpec":
        """Three cohorts, four courses; the dominant archetype of a record
        pushes its logit to roughly +separation or -separation, cohort and
        interaction terms shift it by a fraction of that."""
        s = float(separation)
        params = dict(
            n_records=n_records, T=T, n_cohorts_true=3, n_courses_true=4,
            course_risk_weights=(2.0 * s, -2.0 * s, 1.5 * s, -1.5 * s),
            cohort_risk_weights=(-0.25 * s, 0.0, 0.25 * s),
            interaction_offsets=((0.25 * s, 0.0, -0.25 * s),
                                 (0.0, 0.0, 0.0),
                                 (-0.25 * s, 0.0, 0.25 * s),
                                 (0.0, 0.0, 0.0)),
            intercept=0.0, noise_std=0.3, missing_rate=0.2,
            course_concentration=0.1, seed=seed,
        )
        params.update(overrides)
        return cls(**params)


@dataclass
class GroundTruth:
    """Planted quantities, aligned with the generated record list."""

    cohort: np.ndarray  # (n,) int
    course_weights: np.ndarray  # (n, K)
    logit: np.ndarray  # (n,)
    archetypes: np.ndarray  # (K, T, V) standardized trajectories
    cohort_centroids: list = field(default_factory=list)

    def design_matrix(self, n_cohorts: int) -> np.ndarray:
        """Features under which the planted logit is exactly linear:
        archetype weights, cohort one-hot, and their products."""
        onehot = np.eye(n_cohorts)[self.cohort]
        inter = (self.course_weights[:, :, None] * onehot[:, None, :]).reshape(len(self.cohort), -1)
        return np.concatenate([self.course_weights, onehot, inter], axis=1)


def make_archetypes(n_courses: int, T: int, n_vars: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth standardized trajectories: level + linear trend + one slow
    oscillation per (course, variable)."""
    level = rng.normal(0.0, 1.0, size=(n_courses, 1, n_vars))
    trend = rng.normal(0.0, 1.0, size=(n_courses, 1, n_vars))
    amp = rng.normal(0.0, 0.5, size=(n_courses, 1, n_vars))
    phase = rng.uniform(0, 2 * np.pi, size=(n_courses, 1, n_vars))
    u = np.linspace(0.0, 1.0, T)[None, :, None]
    return level + trend * u + amp * np.sin(2 * np.pi * u + phase)


def _cohort_centroids(n: int, rng: np.random.Generator) -> list[dict]:
    cents = []
    for c in range(n):
        cents.append({
            "Ethnicity": int(rng.integers(0, 5)),
            "GenderF": float(rng.uniform(0.1, 0.9)),
            "Age": float(rng.uniform(30, 85)),
            "Height": float(rng.uniform(155, 185)),
            "Weight": float(rng.uniform(55, 120)),
        })
    return cents


def _to_raw(var, z: float):
    """Map a standardized reading onto the variable's raw scale."""
    if var.is_numeric:
        normal = float(var.normal)
        scale = abs(normal) * 0.15 if normal != 0 else 1.0
        return normal + scale * z
    k = len(var.categories)
    idx = int(np.clip(np.floor(ndtr(z) * k), 0, k - 1))
    return var.categories[idx]


def generate_synthetic_dataset(spec: SyntheticSpec, schema: Schema | None = None,
                               n_physio: int = 6) -> tuple[list[ClinicalRecord], GroundTruth]:
    """Draw ``spec.n_records`` admissions; see the module docstring.

    Args:
        spec: generator parameters.
        schema: physiological channel layout; defaults to
            :func:`synthetic_schema` with ``n_physio`` numeric channels.
        n_physio: channel count for the default schema.
    """
    schema = schema or synthetic_schema(n_physio)
    rng = np.random.default_rng(spec.seed)
    n, T, K, C = spec.n_records, spec.T, spec.n_courses_true, spec.n_cohorts_true
    V = len(schema.physiology)

    archetypes = make_archetypes(K, T, V, rng)
    centroids = _cohort_centroids(C, rng)

    cohort = rng.integers(0, C, size=n)
    weights = rng.dirichlet(np.full(K, spec.course_concentration), size=n) if K > 1 else np.ones((n, 1))
    z = np.einsum("nk,ktv->ntv", weights, archetypes)
    if spec.noise_std > 0:
        z = z + rng.normal(0.0, spec.noise_std, size=z.shape)
    observed = rng.random(size=z.shape) >= spec.missing_rate

    cw = np.asarray(spec.course_risk_weights, dtype=float)
    dw = np.asarray(spec.cohort_risk_weights, dtype=float)
    inter = spec.interaction_matrix
    logit = spec.intercept + weights @ cw + dw[cohort] + np.einsum("nk,kn->n", weights, inter[:, cohort])
    labels = (rng.random(n) < expit(logit)).astype(int)

    demo_noise = rng.normal(size=(n, 3))
    demo_u = rng.random(size=(n, 3))
    reuse = rng.random(n) < spec.readmission_rate

    records, patient = [], -1
    for i in range(n):
        if i == 0 or not reuse[i]:
            patient += 1
        cent = centroids[cohort[i]]
        eth = cent["Ethnicity"] if demo_u[i, 0] < 0.85 else int(np.floor(demo_u[i, 1] * 5))
        demographics = {
            "Ethnicity": eth,
            "GenderF": int(demo_u[i, 2] < cent["GenderF"]),
            "Age": round(float(np.clip(cent["Age"] + 4.0 * demo_noise[i, 0], 18, 100)), 1),
            "Height": round(cent["Height"] + 4.0 * demo_noise[i, 1], 1),
            "Weight": round(cent["Weight"] + 6.0 * demo_noise[i, 2], 1),
        }
        values = np.empty((T, V), dtype=object)
        for v, var in enumerate(schema.physiology):
            for t in range(T):
                values[t, v] = _to_raw(var, z[i, t, v]) if observed[i, t, v] else None
        records.append(ClinicalRecord(
            admission_id=f"A{i:06d}",
            patient_id=f"P{patient:06d}",
            demographics=demographics,
            variables=tuple(schema.physio_names),
            values=values,
            observed=observed[i],
            label=int(labels[i]),
        ))
    truth = GroundTruth(cohort=cohort, course_weights=weights, logit=logit,
                        archetypes=archetypes, cohort_centroids=centroids)
    return records, truth
