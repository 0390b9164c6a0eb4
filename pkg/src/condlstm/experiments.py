"""Scaled model-comparison experiment: train several variants on one
synthetic corpus over a few seeds and summarize daily MAE and timeliness.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import models as M
from .data import PREDICTION_DAYS, Dataset, generate_synthetic, split_cases
from .evaluation import PredictionLog, timeliness_epsilon
from .training import EncodedSplit, TrainConfig, TrainHistory, predict_encoded, prepare_model, train

log = logging.getLogger(__name__)

COMPARED = ("lstm-cond", "lstm-concatenate", "lstm-replicate", "nn-time-invariant")


@dataclass(frozen=True)
class ComparisonConfig:
    n_cases: int = 2000
    corpus_seed: int = 0
    split_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = COMPARED
    arch: M.ArchConfig = field(default_factory=M.ArchConfig)
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            learning_rate=5e-4, max_epochs=80, batch_size=32, patience=15, batching="prefix"
        )
    )


@dataclass
class Run:
    variant: str
    seed: int
    predictions: np.ndarray  # (n_test, 41) RMB
    history: TrainHistory
    seconds: float


@dataclass
class Comparison:
    config: ComparisonConfig
    splits: Dataset
    runs: list[Run]

    def _runs(self, variant: str) -> list[Run]:
        return [r for r in self.runs if r.variant == variant]

    def mae_curve(self, variant: str) -> np.ndarray:
        """Median over seeds of the test MAE, indexed by day - 1."""
        y = np.array([c.total_donations for c in self.splits.test])
        per_seed = [np.mean(np.abs(r.predictions - y[:, None]), axis=0) for r in self._runs(variant)]
        return np.median(np.stack(per_seed), axis=0)

    def first_days(self, variant: str, gamma: float = 0.2, confidence: float = 0.9) -> list[int | None]:
        out = []
        for r in self._runs(variant):
            curve = timeliness_epsilon(PredictionLog.from_matrix(self.splits.test, r.predictions), confidence)
            out.append(curve.first_day_within(gamma))
        return out

    def median_first_day(self, variant: str, gamma: float = 0.2, confidence: float = 0.9) -> float:
        """Median over seeds; a seed that never reaches ``gamma`` counts as infinitely late."""
        days = [np.inf if d is None else d for d in self.first_days(variant, gamma, confidence)]
        return float(np.median(days))

    def max_seconds(self, variant: str) -> float:
        return max(r.seconds for r in self._runs(variant))


def run_comparison(cfg: ComparisonConfig | None = None) -> Comparison:
    cfg = cfg or ComparisonConfig()
    corpus = generate_synthetic(cfg.n_cases, cfg.corpus_seed)
    splits = split_cases(corpus, seed=cfg.split_seed)
    runs = []
    for variant in cfg.variants:
        for seed in cfg.seeds:
            start = time.perf_counter()
            model = prepare_model(variant, splits.train, cfg.arch, seed)
            train_cfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
            model, hist = train(model, splits, train_cfg)
            preds = predict_encoded(model, EncodedSplit.build(model, splits.test))
            seconds = time.perf_counter() - start
            assert preds.shape == (len(splits.test), PREDICTION_DAYS)
            log.info("%s seed %d: best epoch %d, %.0f s", variant, seed, hist.best_epoch, seconds)
            runs.append(Run(variant, seed, preds, hist, seconds))
    return Comparison(cfg, splits, runs)
