"""Threshold-free metrics and the repeated-run experiment protocol."""

from __future__ import annotations

import json
import logging
from fractions import Fraction
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .config import TrainConfig
from .data import EncodedBatch
from .errors import ContractError, ProtoDoctorError

log = logging.getLogger(__name__)

ABLATIONS = {
    "ProtoDoctor": {"enable_par": True, "enable_dci": True},
    "ProtoDoctor-D": {"enable_par": True, "enable_dci": False},
    "ProtoDoctor-DP": {"enable_par": False, "enable_dci": False},
}


class UndefinedMetricError(ContractError):
    pass


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative, ties
    counting one half (Mann-Whitney U / (n_pos * n_neg))."""
    s, y = _prep(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(s)  # average ranks resolve ties as 1/2
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: precision at each positive, averaged over positives.

    Records sharing a score form one group and are admitted together, so
    the result does not depend on input order among ties.
    """
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    new_pos = np.diff(np.r_[0, tp])
    # counts are integers: sum exactly and round once
    total = sum(Fraction(int(n) * int(t), int(e) + 1) for n, t, e in zip(new_pos, tp, ends) if n)
    return float(total / n_pos)


@dataclass
class RunStatistics:
    variant: str
    seeds: list[int]
    auroc: list[float]
    auprc: list[float]
    errors: dict = field(default_factory=dict)
    config_hash: str = ""

    @staticmethod
    def _ms(xs):
        if not xs:
            return float("nan"), float("nan")
        a = np.asarray(xs, dtype=np.float64)
        return float(a.mean()), float(a.std())

    @property
    def auroc_mean_std(self):
        return self._ms(self.auroc)

    @property
    def auprc_mean_std(self):
        return self._ms(self.auprc)

    def to_json(self) -> dict:
        (am, asd), (pm, psd) = self.auroc_mean_std, self.auprc_mean_std
        return {"variant": self.variant, "seeds": self.seeds, "auroc": self.auroc, "auprc": self.auprc,
                "auroc_mean": am, "auroc_std": asd, "auprc_mean": pm, "auprc_std": psd,
                "errors": self.errors, "config_hash": self.config_hash}


def derive_seed(base: int, run: int) -> int:
    return int(np.random.SeedSequence([int(base), int(run)]).generate_state(1)[0])


def run_experiment(train_batch: EncodedBatch, val_batch: EncodedBatch, test_batch: EncodedBatch,
                   config: TrainConfig, n_runs: int = 5, channel_groups=None,
                   variants=("ProtoDoctor",), same_seed: bool = False) -> list[RunStatistics]:
    """Train ``n_runs`` models per variant on distinct derived seeds and score
    each on the fixed test partition.

    Args:
        variants: names from :data:`ABLATIONS`; "ProtoDoctor" alone uses the
            flags already in ``config``.
        same_seed: reuse ``config.seed`` for every run (determinism checks).
    """
    from .training import train

    if n_runs < 1:
        raise ContractError("n_runs must be >= 1")
    results = []
    for variant in variants:
        cfg = config if variant == "ProtoDoctor" and len(variants) == 1 else replace(config, **ABLATIONS[variant])
        stats = RunStatistics(variant, [], [], [], config_hash=cfg.config_hash())
        for r in range(n_runs):
            seed = cfg.seed if same_seed else derive_seed(cfg.seed, r)
            stats.seeds.append(seed)
            try:
                res = train(train_batch, val_batch, replace(cfg, seed=seed), channel_groups)
                p = res.model.predict_proba(test_batch)
                stats.auroc.append(auroc(p, test_batch.labels))
                stats.auprc.append(auprc(p, test_batch.labels))
            except ProtoDoctorError as exc:
                log.error("%s run %d failed: %s", variant, r, exc)
                stats.errors[str(r)] = f"{type(exc).__name__}: {exc}"
        results.append(stats)
    return results


def results_json(results: list[RunStatistics], config: TrainConfig) -> str:
    return json.dumps({"config_hash": config.config_hash(), "config": config.to_dict(),
                       "variants": [r.to_json() for r in results]}, indent=1, sort_keys=True)


def summary_csv(results: list[RunStatistics]) -> str:
    lines = ["model,AUROC,AUPRC"]
    for r in results:
        (am, asd), (pm, psd) = r.auroc_mean_std, r.auprc_mean_std
        lines.append(f"{r.variant},{am:.4f}±{asd:.4f},{pm:.4f}±{psd:.4f}")
    return "\n".join(lines) + "\n"
