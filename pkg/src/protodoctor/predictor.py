"""Mortality predictor: course score, cohort score and their decomposition."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ShapeError
from .pcci import _as_tensor


def clinical_risk_score(s_course, w_course, adjustment):
    """Adjusted course risk: returns ``(z_C, terms)`` where
    ``terms[k] = (w_course[k] + adjustment[k]) * s_course[k]``.

    Batched inputs (B, N_C) are supported; ``w_course`` broadcasts.
    """
    s, w, a = _as_tensor(s_course), _as_tensor(w_course), _as_tensor(adjustment)
    if s.shape[-1] != w.shape[-1] or a.shape[-1] != s.shape[-1]:
        raise ShapeError(f"course widths differ: {s.shape[-1]}, {w.shape[-1]}, {a.shape[-1]}")
    terms = (w + a) * s
    return terms.sum(-1), terms


def demographic_risk_score(s_cohort, w_cohort):
    """Cohort risk ``w_cohort . s_cohort``."""
    s, w = _as_tensor(s_cohort), _as_tensor(w_cohort)
    if s.shape[-1] != w.shape[-1]:
        raise ShapeError(f"cohort widths differ: {s.shape[-1]} vs {w.shape[-1]}")
    return (s * w).sum(-1)


def format_probability(p: float) -> str:
    return f"{100.0 * p:.2f}%"


@dataclass
class PredictionDecomposition:
    admission_id: str
    y_hat: float
    z_course: float
    z_cohort: float
    course_terms: list[float]
    course_strengths: list[float]
    adjustment: list[float]
    cohort_index: int
    cohort_weight: float
    cohort_similarity: list[float]
    pre_adjustment: float
    post_adjustment: float
    threshold: float = 0.5
    extras: dict = field(default_factory=dict)

    @property
    def predicted_label(self) -> int:
        return int(self.y_hat >= self.threshold)

    @property
    def top_course(self) -> int:
        s = np.asarray(self.course_strengths)
        return int(np.flatnonzero(s == s.max())[0])

    def adjustment_summary(self) -> str:
        return f"{format_probability(self.pre_adjustment)} to {format_probability(self.post_adjustment)}"

    def to_json(self) -> dict:
        return {
            "admission_id": self.admission_id,
            "y_hat": self.y_hat,
            "z_C": self.z_course,
            "z_D": self.z_cohort,
            "course_terms": self.course_terms,
            "course_strengths": self.course_strengths,
            "adjustment": self.adjustment,
            "activated_cohort": self.cohort_index,
            "activated_cohort_weight": self.cohort_weight,
            "pre_adjustment_probability": self.pre_adjustment,
            "post_adjustment_probability": self.post_adjustment,
            "adjustment_summary": self.adjustment_summary(),
            "predicted_label": self.predicted_label,
            "threshold": self.threshold,
        }


def predict_mortality(record, model, threshold: float = 0.5) -> PredictionDecomposition:
    """Run the full model on one encoded record and decompose ``y_hat``.

    The pre-adjustment probability is sigmoid(W_C . s_C + z_D), i.e. the same
    prediction with the course-by-cohort adjustment set to zero.
    """
    from .model import forward_single  # circular at import time

    return forward_single(model, record, threshold)


def decomposition_from_output(out, i: int, admission_id: str, threshold: float = 0.5) -> PredictionDecomposition:
    """Build the decomposition of record ``i`` of a batched forward pass."""
    s_c = out.s_course[i]
    w_c = out.w_course
    z_pre = float((w_c * s_c).sum() + out.z_cohort[i])
    with torch.no_grad():
        pre = float(torch.sigmoid(torch.tensor(z_pre, dtype=torch.float64)))
    return PredictionDecomposition(
        admission_id=admission_id,
        y_hat=float(out.y_hat[i]),
        z_course=float(out.z_course[i]),
        z_cohort=float(out.z_cohort[i]),
        course_terms=[float(v) for v in out.course_terms[i]],
        course_strengths=[float(v) for v in s_c],
        adjustment=[float(v) for v in out.adjustment[i]],
        cohort_index=int(out.cohort_index[i]),
        cohort_weight=float(out.w_cohort[int(out.cohort_index[i])]),
        cohort_similarity=[float(v) for v in out.cohort_similarity[i]],
        pre_adjustment=pre,
        post_adjustment=float(out.y_hat[i]),
        threshold=threshold,
    )
