"""Loss, Adam, length-bucketed mini-batches, the training loop and greedy tuning."""

from __future__ import annotations

import logging
import time
from collections import defaultdict
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import models as M
from .data import PREDICTION_DAYS, CaseRecord, Dataset, Instance, Vocab, expand_instances
from .numcore import NumericError, Rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 30
    patience: int = 5
    dropout_rate: float = 0.1
    seed: int = 0
    clip_norm: float = 5.0
    # "length": same-day instance buckets.  "prefix": batch_size whole cases
    # per step, each contributing its 41 day-prefix instances from a single
    # recurrent pass (same per-instance losses, ~20x fewer cell evaluations).
    batching: str = "length"

    def __post_init__(self):
        if self.batching not in ("length", "prefix"):
            raise ValueError("batching must be 'length' or 'prefix'")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("learning_rate, batch_size, max_epochs and patience must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_mae(self) -> float:
        return self.val_mae[self.best_epoch] if self.best_epoch >= 0 else float("inf")

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_mae,wall_time"]
        for e, (a, b, c) in enumerate(zip(self.train_loss, self.val_mae, self.wall_time)):
            rows.append(f"{e},{a!r},{b!r},{c:.3f}")
        return "\n".join(rows) + "\n"


def mse_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction/target lengths differ: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("mse_loss needs at least one prediction")
    return float(np.mean((y - p) ** 2))


def batch_by_length(instances: Sequence[Instance], batch_size: int, rng: Rng) -> list[list[Instance]]:
    """Same-day buckets, shuffled within each day, chunked, then batch order shuffled."""
    if not instances:
        raise ValueError("no instances to batch")
    buckets: dict[int, list[Instance]] = defaultdict(list)
    for inst in instances:
        buckets[inst.day].append(inst)
    gen = rng.gen
    batches = []
    for day in sorted(buckets):
        group = buckets[day]
        order = gen.permutation(len(group))
        for s in range(0, len(group), batch_size):
            batches.append([group[i] for i in order[s : s + batch_size]])
    return [batches[i] for i in gen.permutation(len(batches))]


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------- model preparation


def prepare_model(
    variant: M.Variant | str,
    train_cases: Sequence[CaseRecord],
    config: M.ArchConfig | None = None,
    seed: int = 0,
) -> M.Model:
    """Fit normalizer and vocabulary on the training split only, then build."""
    variant = M.Variant(variant)
    config = config or M.ArchConfig()
    norm = M.Normalizer.fit(train_cases, config.series_transform)
    vocab = Vocab.build((c.post_text for c in train_cases), config.vocab_size) if variant.uses_text else None
    return M.build_model(variant, config, Rng(seed), norm, vocab)


@dataclass
class EncodedSplit:
    cases: list[CaseRecord]
    batch: M.Batch  # full 41-day series for recurrent variants
    targets: np.ndarray  # scaled

    @classmethod
    def build(cls, model: M.Model, cases: Sequence[CaseRecord]) -> EncodedSplit:
        n_days = PREDICTION_DAYS if model.variant.is_recurrent else None
        batch = model.encode(list(cases), n_days)
        y = np.array([c.total_donations for c in cases], dtype=np.float64) / model.normalizer.target_scale
        return cls(list(cases), batch, y)

    def take(self, idx: np.ndarray, day: int | None) -> M.Batch:
        b = self.batch
        return M.Batch(
            b.tokens[idx] if b.tokens is not None else None,
            b.static[idx] if b.static is not None else None,
            b.series[idx, :day] if b.series is not None else None,
        )


def predict_encoded(model: M.Model, enc: EncodedSplit, chunk: int = 512) -> np.ndarray:
    """(n_cases, 41) RMB predictions."""
    out = np.empty((len(enc.cases), PREDICTION_DAYS))
    for s in range(0, len(enc.cases), chunk):
        idx = np.arange(s, min(s + chunk, len(enc.cases)))
        pred, _ = M.forward(model, enc.take(idx, None), all_steps=True)
        out[idx] = pred
    return out * model.normalizer.target_scale


def _set_dropout(model: M.Model, rate: float) -> None:
    for stack in (model.head, model.pre_dense):
        if stack is not None:
            stack.dropout_rate = rate
    model.config = replace(model.config, dropout=rate)


def train(model: M.Model, splits: Dataset, cfg: TrainConfig | None = None) -> tuple[M.Model, TrainHistory]:
    """Mini-batch Adam on the MSE over day-bucketed instances.

    The parameters of the epoch with the lowest validation MAE are restored
    before returning.
    """
    cfg = cfg or TrainConfig()
    train_ids = {c.case_id for c in splits.train}
    if train_ids & {c.case_id for c in splits.val} or train_ids & {c.case_id for c in splits.test}:
        raise ValueError("training cases overlap the validation or test split")
    _set_dropout(model, cfg.dropout_rate)
    enc_train = EncodedSplit.build(model, splits.train)
    enc_val = EncodedSplit.build(model, splits.val) if splits.val else None
    index = {c.case_id: i for i, c in enumerate(splits.train)}
    prefix = cfg.batching == "prefix" and model.variant.is_recurrent
    if model.variant.is_recurrent and not prefix:
        instances = expand_instances(splits.train)
    else:
        # static-only forecasts are identical for every day; one instance per case
        instances = [Instance(c.case_id, 0, c.total_donations) for c in splits.train]

    params = model.params()
    state = AdamState()
    history = TrainHistory()
    best: dict[str, np.ndarray] | None = None
    root = Rng(cfg.seed).split(0x7A)
    since_best = 0
    start = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        batches = batch_by_length(instances, cfg.batch_size, root.split(epoch))
        total, count = 0.0, 0
        for b, batch in enumerate(batches):
            idx = np.array([index[i.case_id] for i in batch])
            day = batch[0].day if model.variant.is_recurrent and not prefix else None
            pred, cache = M.forward(model, enc_train.take(idx, day), root.split(epoch, b + 1), all_steps=prefix)
            y = enc_train.targets[idx]
            if prefix:
                y = np.repeat(y[:, None], pred.shape[1], axis=1)
            loss = mse_loss(pred, y)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged in epoch {epoch}", history)
            grads = M.backward(model, 2.0 * (pred - y) / y.size, cache)
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, state, cfg.learning_rate)
            total += loss * y.size
            count += y.size
        train_loss = total / count
        if enc_val is not None:
            val_pred = predict_encoded(model, enc_val)
            val_mae = float(np.mean(np.abs(val_pred - enc_val.targets[:, None] * model.normalizer.target_scale)))
        else:
            val_mae = train_loss
        history.train_loss.append(train_loss)
        history.val_mae.append(val_mae)
        history.wall_time.append(time.perf_counter() - start)
        log.info("epoch %d train_loss=%.6g val_mae=%.6g", epoch, train_loss, val_mae)
        if history.best_epoch < 0 or val_mae < history.best_val_mae:
            history.best_epoch = epoch
            best = {k: v.copy() for k, v in params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if best is not None:
        for k, v in best.items():
            params[k][...] = v
    return model, history


# ---------------------------------------------------------------- tuning


@dataclass(frozen=True)
class SearchSpace:
    """Greedy layer-wise width search over one component ('head', 'lstm', 'nn', 'pre')."""

    widths: tuple[int, ...] = (16, 32, 48, 64, 80, 96, 102, 128)
    max_depth: int = 3
    component: str = "lstm"
    threshold: float = 0.01  # relative validation-MAE gain needed to keep a new layer

    def __post_init__(self):
        if not self.widths or self.max_depth < 1:
            raise ValueError("search space needs at least one width and depth >= 1")
        if self.component not in _COMPONENT_FIELD:
            raise ValueError(f"component must be one of {sorted(_COMPONENT_FIELD)}")


_COMPONENT_FIELD = {"lstm": "lstm_units", "head": "head_units", "nn": "nn_units", "pre": "pre_dense_units"}


def tune(
    variant: M.Variant | str,
    splits: Dataset,
    space: SearchSpace,
    base: M.ArchConfig | None = None,
    train_cfg: TrainConfig | None = None,
    evaluate: Callable[[M.ArchConfig], float] | None = None,
) -> M.ArchConfig:
    """Tune layer 1's width, freeze it, add layer 2, and so on; stop when the
    best new layer improves validation MAE by less than ``space.threshold``.

    ``evaluate`` maps a config to its validation MAE; by default the variant
    is trained on ``splits`` and its best validation MAE is used.
    """
    variant = M.Variant(variant)
    base = base or M.ArchConfig()
    key = _COMPONENT_FIELD[space.component]
    train_cfg = train_cfg or TrainConfig()

    if evaluate is None:

        def evaluate(cfg: M.ArchConfig) -> float:
            model = prepare_model(variant, splits.train, cfg, train_cfg.seed)
            _, hist = train(model, splits, train_cfg)
            return hist.best_val_mae

    chosen: list[int] = []
    best_cfg, best_score = None, float("inf")
    for _ in range(space.max_depth):
        scored = []
        for w in space.widths:
            cfg = replace(base, **{key: tuple(chosen + [w])})
            scored.append((evaluate(cfg), w, cfg))
            log.info("tune %s=%s val_mae=%.6g", key, cfg.__dict__[key], scored[-1][0])
        score, w, cfg = min(scored, key=lambda s: s[0])
        if best_cfg is not None and (best_score - score) < space.threshold * best_score:
            break
        chosen.append(w)
        best_cfg, best_score = cfg, score
    return best_cfg
