"""Clinical-course prototypes: hourly health-state vectors and the
step-ahead prognostication regularizer."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, ShapeError

ZERO_NORM = 1e-12


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cosine_matrix(h: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between every row of ``h`` (..., d) and every
    prototype (K, d), shape (..., K).

    Pairs involving a vector with norm below 1e-12 get cosine 0 and a
    ``RuntimeWarning``.
    """
    h, prototypes = _as_tensor(h), _as_tensor(prototypes)
    if h.shape[-1] != prototypes.shape[-1]:
        raise ShapeError(f"embedding width {h.shape[-1]} != prototype width {prototypes.shape[-1]}")
    hn = h.norm(dim=-1, keepdim=True)
    pn = prototypes.norm(dim=-1)
    dots = h @ prototypes.T
    degenerate = (hn < ZERO_NORM) | (pn < ZERO_NORM)
    if bool(degenerate.any()):
        warnings.warn("zero-norm vector in cosine similarity; similarity set to 0",
                      RuntimeWarning, stacklevel=2)
    denom = (hn * pn).clamp_min(ZERO_NORM)
    return torch.where(degenerate, torch.zeros_like(dots), dots / denom)


def scaled_similarity(h, prototypes, phi: float) -> torch.Tensor:
    """sigmoid(phi * cos(h, p)) for every row/prototype pair."""
    if phi <= 0:
        raise ContractError("phi must be positive")
    return torch.sigmoid(phi * cosine_matrix(h, prototypes))


def course_similarity(h, p, phi: float) -> float:
    """Existence strength of one course prototype ``p`` in embedding ``h``."""
    h, p = _as_tensor(h).reshape(1, -1), _as_tensor(p).reshape(1, -1)
    return float(scaled_similarity(h, p, phi)[0, 0])


@dataclass
class HealthStateTrajectory:
    observed: torch.Tensor  # (T, N_C) similarity scores per hour
    predicted: torch.Tensor | None = None  # (T-1, N_C) predictions for hours 2..T

    def __post_init__(self):
        if self.observed.ndim != 2:
            raise ShapeError("trajectory must be T x N_C")
        if self.predicted is not None and tuple(self.predicted.shape) != (
                self.observed.shape[0] - 1, self.observed.shape[1]):
            raise ShapeError("predictions must cover hours 2..T with width N_C")

    @property
    def final(self) -> torch.Tensor:
        return self.observed[-1]

    def to_csv(self) -> str:
        n = self.observed.shape[1]
        lines = ["hour," + ",".join(f"course_{k}" for k in range(n))]
        for t, row in enumerate(self.observed.detach().cpu().numpy(), 1):
            lines.append(f"{t}," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def health_state_trajectory(H, prototypes, phi: float) -> HealthStateTrajectory:
    """Score hourly embeddings ``H`` (T, n_P) against every course prototype."""
    H = _as_tensor(H)
    if H.ndim != 2:
        raise ShapeError("expected a T x n_P embedding matrix")
    if not bool(torch.isfinite(H).all()):
        raise ContractError("embeddings must be finite")
    return HealthStateTrajectory(scaled_similarity(H, prototypes, phi))


def prognostication_loss_batch(predicted: torch.Tensor, observed: torch.Tensor,
                               stop_gradient: bool = True) -> torch.Tensor:
    """Mean over records of the per-record step-ahead loss.

    Args:
        predicted: (B, T-1, N_C) predictions for hours 2..T.
        observed: (B, T, N_C) health states.
        stop_gradient: treat the observed states as constant targets.
    """
    if observed.shape[-2] < 2:
        raise ContractError("the prognostication loss needs T >= 2")
    target = observed[..., 1:, :]
    if stop_gradient:
        target = target.detach()
    if predicted.shape != target.shape:
        raise ShapeError(f"predictions {tuple(predicted.shape)} vs targets {tuple(target.shape)}")
    per_record = ((predicted - target) ** 2).sum(-1).mean(-1)
    return per_record.mean() if per_record.ndim else per_record


def prognostication_loss(traj: HealthStateTrajectory, stop_gradient: bool = True) -> torch.Tensor:
    """(1/(T-1)) * sum over t=2..T of ||predicted_t - observed_t||^2."""
    if traj.predicted is None:
        raise ContractError("trajectory carries no step-ahead predictions")
    return prognostication_loss_batch(traj.predicted, traj.observed, stop_gradient)


def init_prototypes(n: int, width: int, generator: torch.Generator) -> torch.Tensor:
    """Independent uniform draws on the unit sphere."""
    x = torch.randn(n, width, generator=generator, dtype=torch.float64)
    return x / x.norm(dim=1, keepdim=True)
