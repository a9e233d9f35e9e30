"""Demographic cohort prototypes, sparse cohort attribution and the
course-by-cohort risk adjustment."""

from __future__ import annotations

import torch

from .errors import ContractError, ShapeError
from .pcci import _as_tensor, scaled_similarity


def cohort_similarity(h_demo, prototypes, phi: float) -> torch.Tensor:
    """sigmoid(phi * cos(h_demo, p_m)) for each cohort prototype; works on a
    single embedding (d,) or a batch (B, d)."""
    return scaled_similarity(_as_tensor(h_demo), prototypes, phi)


def sparse_attribution(similarity, tau: float) -> torch.Tensor:
    """softmax(similarity / tau) over the last axis.

    The max is subtracted before exponentiation; at tau=1e-6 the raw
    exponent would overflow.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    s = _as_tensor(similarity) / tau
    s = s - s.max(dim=-1, keepdim=True).values
    e = torch.exp(s)
    return e / e.sum(dim=-1, keepdim=True)


def activated_cohort(similarity) -> int | torch.Tensor:
    """Index of the largest similarity; ties go to the lowest index."""
    s = _as_tensor(similarity)
    # torch.argmax does not promise first-occurrence on ties
    top = s.max(dim=-1, keepdim=True).values
    idx = (s == top).to(torch.int64).argmax(dim=-1)
    return int(idx) if idx.ndim == 0 else idx


def risk_adjustment(interaction, attribution) -> torch.Tensor:
    """Personalized per-course adjustment ``interaction @ attribution``.

    Args:
        interaction: (N_C, N_D) course-by-cohort matrix.
        attribution: (N_D,) or (B, N_D) cohort attribution.
    """
    W, s = _as_tensor(interaction), _as_tensor(attribution)
    if W.ndim != 2 or s.shape[-1] != W.shape[1]:
        raise ShapeError(f"interaction {tuple(W.shape)} vs attribution {tuple(s.shape)}")
    return s @ W.T
