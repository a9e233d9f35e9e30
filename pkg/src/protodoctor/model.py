"""The full prototype model: encoders, prototype banks and risk heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .dhr import activated_cohort, risk_adjustment, sparse_attribution
from .encoders import DemographicEncoder, PhysiologicalEncoder, PrognosticEncoder
from .errors import ContractError, NumericError
from .pcci import init_prototypes, scaled_similarity
from .predictor import PredictionDecomposition, clinical_risk_score, decomposition_from_output, demographic_risk_score

PARAM_GROUPS = {
    "linear": ("w_course", "w_cohort", "interaction"),
    "prototypes": ("course_prototypes", "cohort_prototypes"),
    "recurrent": ("physio.", "prognostic."),
    "demographic": ("demo.",),
}


@dataclass
class ModelOutput:
    embeddings: torch.Tensor  # (B, T, n_P)
    health_states: torch.Tensor  # (B, T, N_C)
    predicted_states: torch.Tensor | None  # (B, T-1, N_C)
    demo_embedding: torch.Tensor  # (B, n_D)
    cohort_similarity: torch.Tensor  # (B, N_D)
    cohort_attribution: torch.Tensor  # (B, N_D)
    cohort_index: torch.Tensor  # (B,)
    adjustment: torch.Tensor  # (B, N_C)
    course_terms: torch.Tensor  # (B, N_C)
    z_course: torch.Tensor
    z_cohort: torch.Tensor
    y_hat: torch.Tensor
    w_course: torch.Tensor
    w_cohort: torch.Tensor

    @property
    def s_course(self) -> torch.Tensor:
        """Final-hour health state, the predictor's course input."""
        return self.health_states[:, -1]


def _check_finite(stage: str, t: torch.Tensor) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(stage)


class ProtoDoctor(nn.Module):
    def __init__(self, config: TrainConfig, n_in: int, n_demo: int, channel_groups=None):
        super().__init__()
        self.config = config
        self.trained = False
        self.n_in, self.n_demo = n_in, n_demo
        self.channel_groups = [list(g) for g in channel_groups] if channel_groups else None
        g = torch.Generator().manual_seed(config.seed)
        self.physio = PhysiologicalEncoder(
            n_in, config.embed_dim, mode=config.encoder_mode, channel_groups=self.channel_groups,
            channel_hidden=config.channel_hidden, dropout=config.dropout, generator=g)
        self.demo = DemographicEncoder(n_demo, config.demo_hidden, generator=g)
        self.prognostic = PrognosticEncoder(config.n_courses, generator=g)
        self.course_prototypes = nn.Parameter(init_prototypes(config.n_courses, config.embed_dim, g))
        self.cohort_prototypes = nn.Parameter(init_prototypes(config.n_cohorts, config.demo_hidden, g))
        bc, bd = 1 / math.sqrt(config.n_courses), 1 / math.sqrt(config.n_cohorts)
        self.w_course = nn.Parameter(torch.empty(config.n_courses, dtype=torch.float64).uniform_(-bc, bc, generator=g))
        self.w_cohort = nn.Parameter(torch.empty(config.n_cohorts, dtype=torch.float64).uniform_(-bd, bd, generator=g))
        self.interaction = nn.Parameter(torch.zeros(config.n_courses, config.n_cohorts, dtype=torch.float64),
                                        requires_grad=config.enable_dci)

    def param_group(self, group: str) -> list[tuple[str, nn.Parameter]]:
        if group not in PARAM_GROUPS:
            raise ContractError(f"unknown parameter group {group!r}; expected one of {sorted(PARAM_GROUPS)}")
        prefixes = PARAM_GROUPS[group]
        return [(n, p) for n, p in self.named_parameters()
                if p.requires_grad and any(n == pre or (pre.endswith(".") and n.startswith(pre))
                                           for pre in prefixes)]

    def forward(self, physiology: torch.Tensor, demographics: torch.Tensor,
                with_predictions: bool = True) -> ModelOutput:
        cfg = self.config
        H = self.physio(physiology)
        _check_finite("physiological encoder", H)
        states = scaled_similarity(H, self.course_prototypes, cfg.phi)
        predicted = None
        if with_predictions and states.shape[1] >= 2:
            predicted = self.prognostic(states)
            _check_finite("prognostic encoder", predicted)

        h_demo = self.demo(demographics)
        _check_finite("demographic encoder", h_demo)
        sim_d = scaled_similarity(h_demo, self.cohort_prototypes, cfg.phi)
        attribution = sparse_attribution(sim_d, cfg.tau)
        adjustment = risk_adjustment(self.interaction, attribution)

        z_c, terms = clinical_risk_score(states[:, -1], self.w_course, adjustment)
        z_d = demographic_risk_score(attribution, self.w_cohort)
        y_hat = torch.sigmoid(z_c + z_d)
        _check_finite("mortality predictor", y_hat)
        return ModelOutput(
            embeddings=H, health_states=states, predicted_states=predicted,
            demo_embedding=h_demo, cohort_similarity=sim_d, cohort_attribution=attribution,
            cohort_index=activated_cohort(sim_d.detach()).reshape(-1), adjustment=adjustment,
            course_terms=terms, z_course=z_c, z_cohort=z_d, y_hat=y_hat,
            w_course=self.w_course, w_cohort=self.w_cohort,
        )

    def run(self, batch, with_predictions: bool = True) -> ModelOutput:
        """Forward pass on an :class:`~protodoctor.data.EncodedBatch`."""
        return self(torch.from_numpy(np.ascontiguousarray(batch.physiology)),
                    torch.from_numpy(np.ascontiguousarray(batch.demographics)), with_predictions)

    @torch.no_grad()
    def predict_proba(self, batch) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            return self.run(batch, with_predictions=False).y_hat.numpy().copy()
        finally:
            self.train(was_training)


@torch.no_grad()
def forward_single(model: ProtoDoctor, record, threshold: float = 0.5) -> PredictionDecomposition:
    was_training = model.training
    model.eval()
    try:
        x = torch.as_tensor(record.physiology_encoded, dtype=torch.float64).unsqueeze(0)
        d = torch.as_tensor(record.demographics_encoded, dtype=torch.float64).unsqueeze(0)
        out = model(x, d, with_predictions=False)
    finally:
        model.train(was_training)
    return decomposition_from_output(out, 0, record.admission_id, threshold)


@torch.no_grad()
def decompose_batch(model: ProtoDoctor, batch, threshold: float = 0.5) -> list[PredictionDecomposition]:
    was_training = model.training
    model.eval()
    try:
        out = model.run(batch, with_predictions=False)
    finally:
        model.train(was_training)
    return [decomposition_from_output(out, i, aid, threshold) for i, aid in enumerate(batch.ids)]
