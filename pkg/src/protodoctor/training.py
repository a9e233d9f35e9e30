"""Loss terms, the composite objective, the training loop and a
finite-difference gradient check."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .config import TrainConfig
from .data import EncodedBatch
from .errors import ContractError, NumericError
from .model import ProtoDoctor
from .pcci import prognostication_loss_batch

log = logging.getLogger(__name__)

TERMS = ("ce", "div_cohort", "div_course", "sparsity", "prog", "l1")
LOG_COLUMNS = ("epoch", "split", "CE", "L_d^D", "L_d^C", "L_s^C", "L_p^C", "L1", "total")

# --------------------------------------------------------------------------
# individual terms


def cross_entropy(y_hat, y) -> torch.Tensor:
    """Mean negative log-likelihood, logs clamped at 1e-12."""
    y_hat = torch.as_tensor(y_hat, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.float64)
    if not bool(((y == 0) | (y == 1)).all()):
        raise ContractError("labels must be 0 or 1")
    lp = torch.log(y_hat.clamp_min(1e-12))
    lq = torch.log((1.0 - y_hat).clamp_min(1e-12))
    return -(y * lp + (1.0 - y) * lq).mean()


def diversity_loss(prototypes, d_min: float) -> torch.Tensor:
    """Sum over pairs i<j of max(0, d_min - ||p_i - p_j||)^2."""
    P = torch.as_tensor(prototypes, dtype=torch.float64)
    if P.shape[0] < 2:
        raise ContractError("diversity loss needs at least two prototypes")
    i, j = torch.triu_indices(P.shape[0], P.shape[0], offset=1)
    sq = ((P[i] - P[j]) ** 2).sum(-1)
    pos = sq > 0
    # sqrt has an infinite slope at 0; identical prototypes contribute d_min^2
    dist = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return (torch.clamp(d_min - dist, min=0.0) ** 2).sum()


def sparsity_template(n_courses: int, alpha: float) -> torch.Tensor:
    """int((1-alpha)N) zeros then int(alpha N) ones, left-padded with zeros
    to length N."""
    n_ones = int(math.floor(alpha * n_courses + 1e-9))
    n_zeros = int(math.floor((1.0 - alpha) * n_courses + 1e-9))
    r = torch.cat([torch.zeros(n_zeros, dtype=torch.float64), torch.ones(n_ones, dtype=torch.float64)])
    return torch.cat([torch.zeros(n_courses - r.numel(), dtype=torch.float64), r])


def sparsity_loss(final_states, alpha: float) -> torch.Tensor:
    """Mean over records of ||sort_ascending(s) - r_alpha||^2."""
    S = torch.as_tensor(final_states, dtype=torch.float64)
    if S.ndim == 1:
        S = S.unsqueeze(0)
    r = sparsity_template(S.shape[-1], alpha)
    return ((torch.sort(S, dim=-1).values - r) ** 2).sum(-1).mean()


def l1_penalty(matrix) -> torch.Tensor:
    return torch.as_tensor(matrix, dtype=torch.float64).abs().sum()


# --------------------------------------------------------------------------
# composite objective


@dataclass
class Objective:
    total: torch.Tensor
    raw: dict[str, float]  # unweighted term values
    weighted: dict[str, float]  # contribution of each term to the total

    def row(self) -> dict[str, float]:
        w = self.weighted
        return {"CE": w["ce"], "L_d^D": w["div_cohort"], "L_d^C": w["div_course"],
                "L_s^C": w["sparsity"], "L_p^C": w["prog"], "L1": w["l1"], "total": float(self.total.detach())}


def composite_objective(model: ProtoDoctor, physiology: torch.Tensor, demographics: torch.Tensor,
                        labels: torch.Tensor, config: TrainConfig | None = None) -> Objective:
    """CE + weighted diversity, sparsity, prognostication and L1 terms.

    The prognostication term is left out when ``enable_par`` is off; the L1
    term vanishes when ``enable_dci`` is off because the interaction matrix
    then stays frozen at zero.
    """
    cfg = config or model.config
    out = model(physiology, demographics, with_predictions=cfg.enable_par)
    terms = {
        "ce": cross_entropy(out.y_hat, labels),
        "div_cohort": diversity_loss(model.cohort_prototypes, cfg.d_min_cohort),
        "div_course": diversity_loss(model.course_prototypes, cfg.d_min_course),
        "sparsity": sparsity_loss(out.s_course, cfg.alpha),
        "prog": (prognostication_loss_batch(out.predicted_states, out.health_states, cfg.stop_gradient_target)
                 if cfg.enable_par and out.predicted_states is not None
                 else torch.zeros((), dtype=torch.float64)),
        "l1": l1_penalty(model.interaction) if cfg.enable_dci else torch.zeros((), dtype=torch.float64),
    }
    weights = {"ce": 1.0, "div_cohort": cfg.lambda_div_cohort, "div_course": cfg.lambda_div_course,
               "sparsity": cfg.lambda_sparsity, "prog": cfg.lambda_prog if cfg.enable_par else 0.0,
               "l1": cfg.lambda_interaction if cfg.enable_dci else 0.0}
    total = torch.zeros((), dtype=torch.float64)
    weighted = {}
    for name in TERMS:
        value = terms[name]
        if not bool(torch.isfinite(value)):
            raise NumericError(f"objective term {name}")
        contrib = weights[name] * value
        weighted[name] = float(contrib.detach())
        total = total + contrib
    return Objective(total, {k: float(v.detach()) for k, v in terms.items()}, weighted)


def batch_objective(model: ProtoDoctor, batch: EncodedBatch, config: TrainConfig | None = None) -> Objective:
    return composite_objective(model, torch.from_numpy(batch.physiology), torch.from_numpy(batch.demographics),
                               torch.from_numpy(batch.labels), config)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: ProtoDoctor
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_validation: float = math.inf
    epochs_run: int = 0
    diverged: bool = False

    def log_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for row in self.log:
            lines.append(",".join(str(row[c]) if c in ("epoch", "split") else repr(float(row[c]))
                                  for c in LOG_COLUMNS))
        return "\n".join(lines) + "\n"


@torch.no_grad()
def evaluate_objective(model: ProtoDoctor, batch: EncodedBatch) -> Objective:
    """Objective over a whole partition with dropout off."""
    was_training = model.training
    model.eval()
    try:
        return batch_objective(model, batch)
    finally:
        model.train(was_training)


@torch.no_grad()
def rejitter_prototypes(model: ProtoDoctor, generator: torch.Generator, min_norm: float = 1e-8) -> int:
    """Add uniform +-1e-4 noise to prototypes whose norm fell below
    ``min_norm``; returns how many were touched."""
    touched = 0
    for P in (model.course_prototypes, model.cohort_prototypes):
        small = P.norm(dim=1) < min_norm
        n = int(small.sum())
        if n:
            noise = (torch.rand(n, P.shape[1], generator=generator, dtype=torch.float64) * 2 - 1) * 1e-4
            P[small] += noise
            touched += n
    return touched


def _row(epoch: int, split: str, obj: Objective) -> dict:
    return {"epoch": epoch, "split": split, **obj.row()}


def train(train_batch: EncodedBatch, val_batch: EncodedBatch, config: TrainConfig,
          channel_groups=None, model: ProtoDoctor | None = None) -> TrainResult:
    """Mini-batch Adam on the composite objective with early stopping.

    Returns the parameters from the epoch with the lowest validation
    objective. Training is sequential and seeded, so two runs on the same
    data give identical parameters.
    """
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise ContractError("training and validation partitions must be non-empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    jitter_gen = torch.Generator().manual_seed(config.seed + 1)
    if model is None:
        model = ProtoDoctor(config, train_batch.physiology.shape[-1], train_batch.demographics.shape[-1],
                            channel_groups)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.eps)

    X = torch.from_numpy(train_batch.physiology)
    D = torch.from_numpy(train_batch.demographics)
    Y = torch.from_numpy(train_batch.labels)

    result = TrainResult(model=model)
    result.log.append(_row(0, "train", evaluate_objective(model, train_batch)))
    result.log.append(_row(0, "validation", evaluate_objective(model, val_batch)))
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    n = len(train_batch)

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = rng.permutation(n)
        sums = dict.fromkeys(("CE", "L_d^D", "L_d^C", "L_s^C", "L_p^C", "L1", "total"), 0.0)
        try:
            for start in range(0, n, config.batch_size):
                idx = torch.from_numpy(order[start:start + config.batch_size])
                opt.zero_grad()
                obj = composite_objective(model, X[idx], D[idx], Y[idx], config)
                obj.total.backward()
                opt.step()
                rejitter_prototypes(model, jitter_gen)
                for k, v in obj.row().items():
                    sums[k] += v * len(idx)
            val = evaluate_objective(model, val_batch)
        except NumericError as exc:
            log.warning("training diverged at epoch %d (%s); keeping best snapshot", epoch, exc)
            result.diverged = True
            break
        result.log.append({"epoch": epoch, "split": "train", **{k: v / n for k, v in sums.items()}})
        result.log.append(_row(epoch, "validation", val))
        result.epochs_run = epoch
        vloss = float(val.total)
        log.info("epoch %d train %.5f validation %.5f", epoch, sums["total"] / n, vloss)
        if vloss < result.best_validation:
            result.best_validation, result.best_epoch = vloss, epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    model.trained = True
    return result


# --------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheck:
    max_rel_error: float
    checked: list[tuple[str, tuple, float, float]]  # name, index, analytic, numeric


def gradient_check(model: ProtoDoctor, batch: EncodedBatch, group: str | list[str],
                   n_coords: int = 50, step: float = 1e-5, seed: int = 0) -> GradCheck:
    """Compare autograd gradients of the composite objective against central
    differences on up to ``n_coords`` sampled coordinates.

    Args:
        group: a parameter-group name ("linear", "prototypes", "recurrent",
            "demographic") or an explicit list of parameter names.

    Returns:
        The max of |analytic - numeric| / max(1, |numeric|) and the sampled
        coordinates.

    The prognostication target is differentiated through here even when
    training stops its gradient, since only the full derivative is
    comparable with finite differences.
    """
    cfg = replace(model.config, stop_gradient_target=False)
    was_training = model.training
    model.eval()
    named = dict(model.named_parameters())
    if isinstance(group, str):
        params = model.param_group(group)
    else:
        params = [(n, named[n]) for n in group if named[n].requires_grad]
    if not params:
        raise ContractError(f"no trainable parameters in group {group!r}")

    model.zero_grad()
    batch_objective(model, batch, cfg).total.backward()
    grads = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for n, p in params}

    coords = [(n, idx) for n, p in params for idx in np.ndindex(*p.shape)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        coords = [coords[i] for i in sorted(rng.choice(len(coords), n_coords, replace=False))]

    checked, worst = [], 0.0
    with torch.no_grad():
        for name, idx in coords:
            p = named[name]
            orig = p[idx].item()
            p[idx] = orig + step
            f_plus = float(batch_objective(model, batch, cfg).total)
            p[idx] = orig - step
            f_minus = float(batch_objective(model, batch, cfg).total)
            p[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            analytic = float(grads[name][idx])
            rel = abs(analytic - numeric) / max(1.0, abs(numeric))
            worst = max(worst, rel)
            checked.append((name, idx, analytic, numeric))
    model.zero_grad()
    model.train(was_training)
    return GradCheck(worst, checked)
