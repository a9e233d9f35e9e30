"""Prototype projection onto training exemplars, case reports and the
interaction-matrix export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
import torch

from .data import ClinicalRecord, EncodedBatch, EncodedRecord
from .errors import ContractError
from .model import ProtoDoctor, forward_single
from .pcci import cosine_matrix
from .predictor import format_probability
from .schema import Schema

TIE_GAP = 1e-3


@dataclass
class ProjectedPrototype:
    kind: str  # "course" or "cohort"
    index: int
    admission_id: str
    similarity: float
    physiology: dict | None = None  # variable -> raw hourly values
    demographics: dict | None = None

    def to_json(self) -> dict:
        d = {"kind": self.kind, "index": self.index, "admission_id": self.admission_id,
             "similarity": self.similarity}
        if self.physiology is not None:
            d["physiology"] = self.physiology
        if self.demographics is not None:
            d["demographics"] = self.demographics
        return d


@torch.no_grad()
def training_embeddings(model: ProtoDoctor, batch: EncodedBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """Final-hour physiological embeddings and demographic embeddings of
    every record in ``batch`` (dropout off)."""
    was_training = model.training
    model.eval()
    try:
        H = model.physio(torch.from_numpy(batch.physiology))[:, -1]
        D = model.demo(torch.from_numpy(batch.demographics))
    finally:
        model.train(was_training)
    return H, D


def _best_match(embeddings: torch.Tensor, prototype: torch.Tensor, ids: list[str]) -> tuple[int, float]:
    """Row with the largest cosine to ``prototype``; ties go to the lowest
    admission id."""
    cos = cosine_matrix(embeddings, prototype.reshape(1, -1))[:, 0].numpy()
    top = cos.max()
    candidates = np.flatnonzero(cos == top)
    best = min(candidates, key=lambda i: ids[i])
    return int(best), float(np.clip(cos[best], -1.0, 1.0))


def _raw_physiology(record: ClinicalRecord) -> dict:
    out = {}
    for j, name in enumerate(record.variables):
        out[name] = [(_plain(record.values[t, j]) if record.observed[t, j] else None) for t in range(record.T)]
    return out


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _project(kind: str, index: int, model: ProtoDoctor, batch: EncodedBatch, records: dict | None,
             push: bool, embeddings=None) -> ProjectedPrototype:
    if batch is None or len(batch) == 0:
        raise ContractError("prototype projection needs at least one training record")
    H, D = embeddings if embeddings is not None else training_embeddings(model, batch)
    bank = model.course_prototypes if kind == "course" else model.cohort_prototypes
    if not 0 <= index < bank.shape[0]:
        raise ContractError(f"no {kind} prototype {index}")
    emb = H if kind == "course" else D
    row, sim = _best_match(emb, bank.detach()[index], batch.ids)
    aid = batch.ids[row]
    if push:
        with torch.no_grad():
            bank[index] = emb[row]
    proj = ProjectedPrototype(kind, index, aid, sim)
    rec = (records or {}).get(aid)
    if rec is not None:
        if kind == "course":
            proj.physiology = _raw_physiology(rec)
        else:
            proj.demographics = {k: _plain(v) for k, v in rec.demographics.items()}
    return proj


def project_course_prototype(k: int, model: ProtoDoctor, batch: EncodedBatch, records: dict | None = None,
                             push: bool = False, embeddings=None) -> ProjectedPrototype:
    """Match course prototype ``k`` to the training admission whose
    final-hour embedding has the highest cosine similarity.

    With ``push`` the prototype vector is overwritten by that embedding.
    """
    return _project("course", k, model, batch, records, push, embeddings)


def project_cohort_prototype(m: int, model: ProtoDoctor, batch: EncodedBatch, records: dict | None = None,
                             push: bool = False, embeddings=None) -> ProjectedPrototype:
    """Match cohort prototype ``m`` to the closest training demographics."""
    return _project("cohort", m, model, batch, records, push, embeddings)


def project_all(model: ProtoDoctor, batch: EncodedBatch, records: dict | None = None,
                push: bool = False) -> tuple[list[ProjectedPrototype], list[ProjectedPrototype]]:
    emb = training_embeddings(model, batch)
    courses = [project_course_prototype(k, model, batch, records, push, emb)
               for k in range(model.config.n_courses)]
    cohorts = [project_cohort_prototype(m, model, batch, records, push, emb)
               for m in range(model.config.n_cohorts)]
    return courses, cohorts


# --------------------------------------------------------------------------
# case reports


def bmi(height_cm, weight_kg) -> float | None:
    if height_cm is None or weight_kg is None or float(height_cm) <= 0:
        return None
    return float(weight_kg) / (float(height_cm) / 100.0) ** 2


def _series_rows(physiology: dict, schema: Schema) -> list[dict]:
    rows = []
    for system in ("circulatory", "respiratory", "neurological", "other"):
        for var in schema.physiology:
            if var.system != system or var.name not in physiology:
                continue
            for t, v in enumerate(physiology[var.name], 1):
                rows.append({"hour": t, "variable": var.name, "system": system, "value": v,
                             "bound_U": var.upper, "bound_L": var.lower, "bound_T": var.threshold})
    return rows


def build_case_report(record: ClinicalRecord, encoded: EncodedRecord, model: ProtoDoctor, schema: Schema,
                      train_batch: EncodedBatch, train_records: dict, threshold: float = 0.5) -> dict:
    """Three-panel explanation of one prediction.

    Panel a: the activated cohort prototype shown as its closest training
    admission's demographics (with BMI). Panel b: the course prototype with
    the largest final-hour strength, shown as its closest training
    admission's physiology grouped by organ system with reference bounds.
    Panel c: the mortality probability without and with the
    course-by-cohort adjustment.
    """
    if not getattr(model, "trained", False):
        raise ContractError("case reports need a trained model")
    dec = forward_single(model, encoded, threshold)
    emb = training_embeddings(model, train_batch)

    m = dec.cohort_index
    cohort = project_cohort_prototype(m, model, train_batch, train_records, embeddings=emb)
    demo = dict(cohort.demographics or {})
    demo["BMI"] = bmi(demo.get("Height"), demo.get("Weight"))

    strengths = np.asarray(dec.course_strengths)
    k = dec.top_course
    ordered = np.sort(strengths)[::-1]
    gap = float(ordered[0] - ordered[1]) if len(ordered) > 1 else float("inf")
    course = project_course_prototype(k, model, train_batch, train_records, embeddings=emb)
    series = _series_rows(course.physiology or {}, schema)

    return {
        "admission_id": record.admission_id,
        "prediction": dec.to_json(),
        "panel_a": {
            "cohort_prototype": m,
            "cohort_risk_weight": dec.cohort_weight,
            "exemplar_admission_id": cohort.admission_id,
            "exemplar_similarity": cohort.similarity,
            "demographics": demo,
        },
        "panel_b": {
            "course_prototype": k,
            "course_strength": float(strengths[k]),
            "course_risk_weight": float(model.w_course.detach()[k]),
            "course_adjustment": dec.adjustment[k],
            "exemplar_admission_id": course.admission_id,
            "exemplar_similarity": course.similarity,
            "near_tie": gap < TIE_GAP,
            "top_two_gap": gap,
            "series": series,
        },
        "panel_c": {
            "pre_adjustment_probability": dec.pre_adjustment,
            "post_adjustment_probability": dec.post_adjustment,
            "pre_adjustment": format_probability(dec.pre_adjustment),
            "post_adjustment": format_probability(dec.post_adjustment),
            "summary": f"from {dec.adjustment_summary()}",
        },
    }


def panel_b_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["hour", "variable", "value", "bound_U", "bound_L", "bound_T"])
    for r in report["panel_b"]["series"]:
        w.writerow([r["hour"], r["variable"], "" if r["value"] is None else r["value"],
                    *("" if r[b] is None else repr(r[b]) for b in ("bound_U", "bound_L", "bound_T"))])
    return buf.getvalue()


# --------------------------------------------------------------------------
# interaction matrix


def _ascending(weights: np.ndarray) -> list[int]:
    return [int(i) for i in np.argsort(weights, kind="stable")]


def export_interaction_matrix(model: ProtoDoctor) -> tuple[str, dict]:
    """Interaction matrix as CSV (course rows, cohort columns), both axes
    sorted ascending by their risk weight, plus a sidecar describing the
    order. Values are written with ``repr`` so they parse back exactly."""
    M = model.interaction.detach().numpy()
    wc = model.w_course.detach().numpy()
    wd = model.w_cohort.detach().numpy()
    rows, cols = _ascending(wc), _ascending(wd)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["course"] + [f"cohort_{m}" for m in cols])
    for k in rows:
        w.writerow([f"course_{k}"] + [repr(float(M[k, m])) for m in cols])
    sidecar = {
        "row_order": rows,
        "column_order": cols,
        "row_weights": [float(wc[k]) for k in rows],
        "column_weights": [float(wd[m]) for m in cols],
        "sort": "ascending by course risk weight (rows) and cohort risk weight (columns)",
        "sign": "positive entries raise the mortality risk of the course for that cohort",
    }
    return buf.getvalue(), sidecar


def read_interaction_csv(text: str) -> tuple[np.ndarray, list[int], list[int]]:
    """Parse an exported matrix; returns ``(matrix_in_file_order, row_ids,
    column_ids)``."""
    reader = list(csv.reader(io.StringIO(text)))
    cols = [int(c.split("_")[1]) for c in reader[0][1:]]
    rows, values = [], []
    for line in reader[1:]:
        rows.append(int(line[0].split("_")[1]))
        values.append([float(x) for x in line[1:]])
    return np.asarray(values, dtype=np.float64).reshape(len(rows), len(cols)), rows, cols


def restore_interaction_order(text: str) -> np.ndarray:
    """Matrix in original prototype order from an exported CSV."""
    M, rows, cols = read_interaction_csv(text)
    out = np.zeros_like(M)
    out[np.ix_(rows, cols)] = M
    return out


def sidecar_json(sidecar: dict) -> str:
    return json.dumps(sidecar, indent=1, sort_keys=True)
