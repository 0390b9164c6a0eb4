"""Forecast accuracy and timeliness metrics.

Daily MAE, absolute percentage error, the empirical confidence that the
error stays under a threshold, the per-day error bound achievable at a given
confidence, the model-free "natural wait", and the saved-days comparison.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .data import HORIZON, PREDICTION_DAYS, CaseRecord

log = logging.getLogger(__name__)

DEFAULT_GAMMAS = (0.5, 0.4, 0.3, 0.2, 0.1, 0.05)
DEFAULT_CONFIDENCES = (0.9, 0.95)


class UsageError(ValueError):
    pass


@dataclass
class PredictionLog:
    """(case, day) -> predicted total, joined to each case's true total."""

    predictions: dict[tuple[str, int], float] = field(default_factory=dict)
    truth: dict[str, float] = field(default_factory=dict)

    def add(self, case_id: str, day: int, predicted: float, actual: float | None = None) -> None:
        if not 1 <= day <= PREDICTION_DAYS:
            raise ValueError(f"day {day} outside 1..{PREDICTION_DAYS}")
        key = (case_id, int(day))
        if key in self.predictions:
            raise ValueError(f"duplicate prediction for case {case_id} day {day}")
        self.predictions[key] = float(predicted)
        if actual is not None:
            self.truth[case_id] = float(actual)

    @classmethod
    def from_matrix(cls, cases: Sequence[CaseRecord], preds: np.ndarray) -> PredictionLog:
        """``preds[i, d-1]`` is case i's forecast on day d."""
        out = cls()
        for case, row in zip(cases, np.asarray(preds, dtype=np.float64)):
            out.truth[case.case_id] = case.total_donations
            for d, p in enumerate(row, start=1):
                out.predictions[(case.case_id, d)] = float(p)
        return out

    def days(self) -> list[int]:
        return sorted({d for _, d in self.predictions})

    def by_day(self) -> dict[int, list[tuple[str, float]]]:
        out: dict[int, list[tuple[str, float]]] = {}
        for (cid, d), p in self.predictions.items():
            out.setdefault(d, []).append((cid, p))
        return out


def mae_by_day(log_: PredictionLog) -> dict[int, float]:
    out = {}
    for d, rows in sorted(log_.by_day().items()):
        errs = [abs(log_.truth[cid] - p) for cid, p in rows]
        out[d] = float(np.mean(errs))
    return out


def abs_pct_error(y: float, yhat: float) -> float | None:
    """|y - yhat| / y, or None for a case with no positive total (excluded)."""
    if not y > 0:
        return None
    return abs(y - yhat) / y


def empirical_confidence(deltas: Sequence[float], eps: float) -> float:
    d = np.asarray(deltas, dtype=np.float64)
    if d.size == 0:
        raise UsageError("no errors to evaluate")
    return float(np.count_nonzero(d <= eps)) / d.size


def _quantile_rank(n: int, c: float) -> int:
    # smallest k with k/n >= c, using the same float comparison as empirical_confidence
    k = max(1, min(n, math.ceil(c * n)))
    while k > 1 and (k - 1) / n >= c:
        k -= 1
    while k < n and k / n < c:
        k += 1
    return k


def epsilon_at_confidence(deltas: Sequence[float], c: float) -> float:
    """Smallest observed error e with empirical_confidence(deltas, e) >= c."""
    d = np.sort(np.asarray(deltas, dtype=np.float64))
    if d.size == 0:
        raise UsageError("no errors to evaluate")
    return float(d[_quantile_rank(d.size, c) - 1])


@dataclass
class TimelinessCurve:
    confidence: float
    epsilon: dict[int, float]
    excluded_cases: int = 0

    def first_day_within(self, gamma: float) -> int | None:
        for d in sorted(self.epsilon):
            if self.epsilon[d] <= gamma:
                return d
        return None


def timeliness_epsilon(log_: PredictionLog, c: float) -> TimelinessCurve:
    if not 0.0 < c < 1.0:
        raise UsageError(f"confidence must lie in (0, 1), got {c}")
    excluded = {cid for cid, y in log_.truth.items() if not y > 0}
    if excluded:
        log.info("excluding %d case(s) with non-positive totals from percentage errors", len(excluded))
    eps = {}
    for d, rows in sorted(log_.by_day().items()):
        deltas = [abs_pct_error(log_.truth[cid], p) for cid, p in rows]
        deltas = [x for x in deltas if x is not None]
        if not deltas:
            log.warning("day %d has no cases with positive totals; omitted", d)
            continue
        eps[d] = epsilon_at_confidence(deltas, c)
    return TimelinessCurve(c, eps, len(excluded))


def _daily_donations(cases: Iterable) -> list[np.ndarray]:
    out = []
    for case in cases:
        m = case.series[0] if isinstance(case, CaseRecord) else np.asarray(case, dtype=np.float64)
        padded = np.zeros(max(HORIZON, m.size))
        padded[: m.size] = m
        out.append(padded[:HORIZON] if m.size <= HORIZON else padded)
    return out


def natural_wait(cases: Iterable, gamma: float, c: float, horizon: int = HORIZON) -> int:
    """First day by which a fraction >= c of cases hold >= (1 - gamma) of their final total.

    ``cases`` are CaseRecords or plain daily-donation arrays.  Returns
    ``horizon`` when the condition is only met on the last day.
    """
    if not (0.0 < gamma < 1.0 and 0.0 < c < 1.0):
        raise UsageError(f"gamma and confidence must lie in (0, 1), got {gamma}, {c}")
    fracs = []
    for m in _daily_donations(cases):
        cum = np.cumsum(m[:horizon])
        if cum[-1] > 0:
            fracs.append(cum / cum[-1])
    if not fracs:
        raise UsageError("no cases with positive total donations")
    F = np.stack(fracs)
    reached = np.count_nonzero(F >= 1.0 - gamma, axis=0) / F.shape[0]
    hit = np.nonzero(reached >= c)[0]
    return int(hit[0]) + 1 if hit.size else horizon


@dataclass(frozen=True)
class SavedDaysRow:
    gamma: float
    confidence: float
    natural: int
    model: int | None  # None: the model never reaches gamma within the horizon
    natural_capped: bool

    @property
    def saved(self) -> int | None:
        return None if self.model is None else self.natural - self.model


def saved_days_report(
    log_: PredictionLog,
    corpus: Iterable,
    gammas: Sequence[float] = DEFAULT_GAMMAS,
    confidences: Sequence[float] = DEFAULT_CONFIDENCES,
) -> list[SavedDaysRow]:
    if not gammas or not confidences:
        raise UsageError("gamma and confidence grids must be non-empty")
    corpus = list(corpus)
    rows = []
    for c in confidences:
        curve = timeliness_epsilon(log_, c)
        for g in gammas:
            nat = natural_wait(corpus, g, c)
            rows.append(SavedDaysRow(g, c, nat, curve.first_day_within(g), nat >= HORIZON))
    return rows


# ---------------------------------------------------------------- CSV output


def write_mae_csv(path, curves: Mapping[str, Mapping[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "model", "mae"])
        for model, curve in curves.items():
            for d, v in sorted(curve.items()):
                w.writerow([d, model, repr(float(v))])


def write_timeliness_csv(path, curves: Sequence[TimelinessCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "confidence", "epsilon"])
        for curve in curves:
            for d, e in sorted(curve.epsilon.items()):
                w.writerow([d, curve.confidence, repr(float(e))])


def write_saved_days_csv(path, rows: Sequence[SavedDaysRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "confidence", "natural", "model", "saved"])
        for r in rows:
            w.writerow(
                [
                    r.gamma,
                    r.confidence,
                    r.natural,
                    "not reached" if r.model is None else r.model,
                    "" if r.saved is None else r.saved,
                ]
            )
