"""The seven forecasting variants and their shared forward/backward pass.

All variants predict a case's final donation total.  Internally the target
is divided by ``Normalizer.target_scale`` (mean training total) so the loss
is well conditioned; :func:`predict_day` returns RMB.
"""

from __future__ import annotations

import enum
import json
import struct
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import layers as L
from . import recurrent as R
from .data import HORIZON, N_SERIES, PREDICTION_DAYS, CaseRecord, Vocab, tokenize
from .numcore import Rng


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class Variant(str, enum.Enum):
    LSTM_COND = "lstm-cond"
    LSTM_COND_PARTIAL = "lstm-cond-partial"
    LSTM_REPLICATE = "lstm-replicate"
    LSTM_CONCATENATE = "lstm-concatenate"
    LSTM_TIME_SERIES = "lstm-time-series"
    NN_TIME_INVARIANT = "nn-time-invariant"
    NN_TIME_INVARIANT_NO_TEXT = "nn-time-invariant-no-text"

    @property
    def uses_text(self) -> bool:
        return self not in (Variant.LSTM_TIME_SERIES, Variant.NN_TIME_INVARIANT_NO_TEXT)

    @property
    def uses_static(self) -> bool:
        return self is not Variant.LSTM_TIME_SERIES

    @property
    def is_recurrent(self) -> bool:
        return self.value.startswith("lstm")

    @property
    def conditioned(self) -> bool:
        return self in (Variant.LSTM_COND, Variant.LSTM_COND_PARTIAL)

    @property
    def series_features(self) -> tuple[int, ...]:
        if not self.is_recurrent:
            return ()
        if self is Variant.LSTM_COND_PARTIAL:
            return (0,)
        return tuple(range(N_SERIES))


VARIANT_NAMES = tuple(v.value for v in Variant)


@dataclass(frozen=True)
class ArchConfig:
    vocab_size: int = 8192
    embed_dim: int = 32
    max_post_len: int = 48
    conv_filters: tuple[int, ...] = (16, 16)
    conv_windows: tuple[int, ...] = (3, 3)
    conv_pools: tuple[int, ...] = (2, 2)
    lstm_units: tuple[int, ...] = (64, 32)
    head_units: tuple[int, ...] = (32, 16)
    pre_dense_units: tuple[int, ...] = (64,)
    nn_units: tuple[int, ...] = (60, 130, 90)
    dropout: float = 0.1
    forget_bias: float = 1.0
    final_activation: str = "relu"
    series_transform: str = "zscore"

    def validate(self) -> None:
        bad = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                if any(int(u) <= 0 for u in v):
                    bad.append(f.name)
            elif f.name in ("vocab_size", "embed_dim", "max_post_len") and v <= 0:
                bad.append(f.name)
        if not (len(self.conv_filters) == len(self.conv_windows) == len(self.conv_pools)) or not self.conv_filters:
            bad.append("conv_filters/conv_windows/conv_pools")
        if not self.lstm_units:
            bad.append("lstm_units")
        if not 0.0 <= self.dropout < 1.0:
            bad.append("dropout")
        if self.vocab_size < 3:
            bad.append("vocab_size")
        if self.series_transform not in ("zscore", "log-zscore"):
            bad.append("series_transform")
        if self.final_activation not in ("relu", "linear"):
            bad.append("final_activation")
        if bad:
            raise ConfigError(f"invalid architecture config fields: {', '.join(bad)}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture config fields: {', '.join(sorted(unknown))}")
        return cls(**{k: tuple(int(u) for u in v) if isinstance(v, list) else v for k, v in d.items()})


# ---------------------------------------------------------------- input encoding

N_REGIONS = 31
_STATIC_NUMERIC = ("age", "log_target", "content_length", "title_length", "launch_day")


def static_raw(case: CaseRecord) -> np.ndarray:
    s = case.static
    return np.array([s.age, np.log(s.target_amount), s.content_length, s.title_length, s.launch_day], dtype=np.float64)


@dataclass
class Normalizer:
    series_mean: np.ndarray
    series_std: np.ndarray
    static_mean: np.ndarray
    static_std: np.ndarray
    target_scale: float
    transform: str = "zscore"

    @classmethod
    def fit(cls, cases: Sequence[CaseRecord], transform: str = "zscore") -> Normalizer:
        if not cases:
            raise InputError("cannot fit normalizer on an empty training split")
        S = np.stack([_transform(c.padded_series(), transform) for c in cases])  # (n, 8, 42)
        st = np.stack([static_raw(c) for c in cases])
        scale = float(np.mean([c.total_donations for c in cases]))
        return cls(
            S.mean(axis=(0, 2)),
            np.maximum(S.std(axis=(0, 2)), 1e-8),
            st.mean(axis=0),
            np.maximum(st.std(axis=0), 1e-8),
            scale if scale > 0 else 1.0,
            transform,
        )

    def series(self, case: CaseRecord, n_days: int, pad: bool = True) -> np.ndarray:
        """(n_days, 8) normalized daily inputs; days past the record are zero activity."""
        raw = case.padded_series(max(HORIZON, n_days)) if pad else case.series
        x = _transform(raw[:, :n_days], self.transform)
        return ((x - self.series_mean[:, None]) / self.series_std[:, None]).T

    def static(self, case: CaseRecord) -> np.ndarray:
        s = case.static
        num = (static_raw(case) - self.static_mean) / self.static_std
        flags = np.array(
            [s.is_female, s.has_basic_insurance, s.has_commercial_insurance, s.gender_disclosed], dtype=np.float64
        )
        region = np.zeros(N_REGIONS)
        if 0 <= s.region_id < N_REGIONS:
            region[s.region_id] = 1.0
        month = np.zeros(12)
        if 1 <= s.launch_month <= 12:
            month[s.launch_month - 1] = 1.0
        weekday = np.zeros(7)
        if 0 <= s.launch_weekday < 7:
            weekday[s.launch_weekday] = 1.0
        return np.concatenate([num, flags, region, month, weekday])

    def to_dict(self) -> dict:
        return {
            "series_mean": self.series_mean.tolist(),
            "series_std": self.series_std.tolist(),
            "static_mean": self.static_mean.tolist(),
            "static_std": self.static_std.tolist(),
            "target_scale": self.target_scale,
            "transform": self.transform,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        return cls(
            np.asarray(d["series_mean"], dtype=np.float64),
            np.asarray(d["series_std"], dtype=np.float64),
            np.asarray(d["static_mean"], dtype=np.float64),
            np.asarray(d["static_std"], dtype=np.float64),
            float(d["target_scale"]),
            d.get("transform", "zscore"),
        )


STATIC_DIM = len(_STATIC_NUMERIC) + 4 + N_REGIONS + 12 + 7


def _transform(x: np.ndarray, kind: str) -> np.ndarray:
    return np.log1p(x) if kind == "log-zscore" else x


@dataclass
class Batch:
    tokens: np.ndarray | None  # (B, max_post_len) int
    static: np.ndarray | None  # (B, STATIC_DIM)
    series: np.ndarray | None  # (B, days, features)


# ---------------------------------------------------------------- model


@dataclass
class Model:
    variant: Variant
    config: ArchConfig
    normalizer: Normalizer | None
    head: L.DenseStack
    vocab: Vocab | None = None
    embedding: L.EmbeddingTable | None = None
    text_encoder: L.ConvPoolStack | None = None
    pre_dense: L.DenseStack | None = None
    lstm: list[R.LstmParams] = field(default_factory=list)
    condition: R.ConditionParams | None = None

    def params(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable parameter (live references)."""
        out: dict[str, np.ndarray] = {}
        parts = [("embedding", self.embedding), ("text", self.text_encoder), ("pre", self.pre_dense)]
        parts += [(f"lstm.{k}", layer) for k, layer in enumerate(self.lstm)]
        parts += [("cond", self.condition), ("head", self.head)]
        for prefix, comp in parts:
            if comp is None:
                continue
            for name, arr in comp.params().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def condition_length(self) -> int:
        n = STATIC_DIM if self.variant.uses_static else 0
        if self.variant.uses_text:
            n += self.text_encoder.output_length(self.config.max_post_len)
        return n

    def step_input_size(self) -> int:
        n = len(self.variant.series_features)
        if self.variant is Variant.LSTM_REPLICATE:
            n += self.condition_length()
        return n

    # -- encoding

    def encode(self, cases: Sequence[CaseRecord], n_days: int | None) -> Batch:
        if self.normalizer is None:
            raise InputError("model has no normalizer; fit one on the training split first")
        v = self.variant
        tokens = static = series = None
        if v.uses_text:
            if self.vocab is None:
                raise InputError(f"{v.value} needs a vocabulary")
            tokens = np.stack([tokenize(c.post_text, self.vocab, self.config.max_post_len) for c in cases])
        if v.uses_static:
            static = np.stack([self.normalizer.static(c) for c in cases])
        if v.is_recurrent:
            if not n_days or n_days < 1:
                raise InputError(f"{v.value} predictions start at day 1")
            feats = list(v.series_features)
            series = np.stack([self.normalizer.series(c, n_days)[:, feats] for c in cases])
        return Batch(tokens, static, series)


def build_model(
    variant: Variant | str,
    config: ArchConfig | None = None,
    rng: Rng | None = None,
    normalizer: Normalizer | None = None,
    vocab: Vocab | None = None,
) -> Model:
    variant = Variant(variant)
    config = config or ArchConfig()
    config.validate()
    rng = rng or Rng(0)
    if vocab is not None and len(vocab) > config.vocab_size:
        raise ConfigError(f"vocabulary of {len(vocab)} words exceeds vocab_size={config.vocab_size}")
    model = Model(variant, config, normalizer, head=None, vocab=vocab if variant.uses_text else None)  # type: ignore[arg-type]
    drop = config.dropout
    if variant.uses_text:
        model.embedding = L.EmbeddingTable.init(config.vocab_size, config.embed_dim, rng.split(1))
        model.text_encoder = L.ConvPoolStack.init(
            config.embed_dim,
            list(config.conv_filters),
            list(config.conv_windows),
            list(config.conv_pools),
            rng.split(2),
        )
        if model.text_encoder.output_length(config.max_post_len) < 1:
            raise ConfigError("max_post_len is too short for conv_windows/conv_pools")
    cond_len = model.condition_length()

    if not variant.is_recurrent:
        sizes = [cond_len, *config.nn_units, 1]
        model.head = L.DenseStack.init(sizes, rng.split(6), drop, config.final_activation)
        return model

    step_in = model.step_input_size()
    if variant is Variant.LSTM_TIME_SERIES and config.pre_dense_units:
        model.pre_dense = L.DenseStack.init([step_in, *config.pre_dense_units], rng.split(3), drop)
        step_in = model.pre_dense.out_dim
    units = list(config.lstm_units)
    for k, h in enumerate(units):
        model.lstm.append(R.LstmParams.init(step_in, h, rng.split(4, k), config.forget_bias))
        step_in = h
    if variant.conditioned:
        model.condition = R.ConditionParams.init(cond_len, units[0], rng.split(5))
    head_in = units[-1] + (cond_len if variant is Variant.LSTM_CONCATENATE else 0)
    model.head = L.DenseStack.init([head_in, *config.head_units, 1], rng.split(6), drop, config.final_activation)
    return model


# ---------------------------------------------------------------- forward / backward


def forward(model: Model, batch: Batch, rng: Rng | None = None, all_steps: bool = False):
    """Scaled predictions: (B,) at the last day, or (B, days) with ``all_steps``.

    ``rng`` switches on training mode (dropout).
    """
    v = model.variant
    cache: dict = {}
    cond = None
    if v.uses_text:
        emb, cache["emb"] = L.embedding_forward(model.embedding, batch.tokens)
        text, cache["text"] = L.conv_stack_forward(model.text_encoder, emb)
        cond = L.concat_conditions(text, batch.static)
        cache["text_len"] = text.shape[1]
    elif v.uses_static:
        cond = batch.static
    head_rng = rng.split(7) if rng is not None else None

    if not v.is_recurrent:
        out, cache["head"] = L.dense_stack_forward(model.head, cond, head_rng)
        pred = out[:, 0]
        if all_steps:
            pred = np.repeat(pred[:, None], PREDICTION_DAYS, axis=1)
        return pred, cache

    x = batch.series
    B, T, _ = x.shape
    if v is Variant.LSTM_REPLICATE:
        x = np.concatenate([x, np.broadcast_to(cond[:, None, :], (B, T, cond.shape[1]))], axis=2)
    if model.pre_dense is not None:
        x, cache["pre"] = L.dense_stack_forward(model.pre_dense, x, rng.split(8) if rng is not None else None)
    if v.conditioned:
        hs, cache["lstm"] = R.lstm_stack_forward(model.lstm, x, model.condition, cond)
    else:
        hs, cache["lstm"] = R.lstm_stack_forward(model.lstm, x)
    r = hs if all_steps else hs[:, -1:]
    if v is Variant.LSTM_CONCATENATE:
        r = np.concatenate([r, np.broadcast_to(cond[:, None, :], (B, r.shape[1], cond.shape[1]))], axis=2)
    out, cache["head"] = L.dense_stack_forward(model.head, r, head_rng)
    cache.update(T=T, all_steps=all_steps, hidden=hs.shape[2])
    pred = out[..., 0]
    return (pred if all_steps else pred[:, 0]), cache


def backward(model: Model, d_pred: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
    """Gradients of a loss with respect to every entry of ``model.params()``."""
    v = model.variant
    grads: dict[str, np.ndarray] = {}

    def put(prefix, g):
        for k, val in g.items():
            grads[f"{prefix}.{k}"] = val

    d_cond = None
    if not v.is_recurrent:
        d_cond, g = L.dense_stack_backward(model.head, d_pred[:, None], cache["head"])
        put("head", g)
    else:
        T, H = cache["T"], cache["hidden"]
        d_out = d_pred[..., None] if cache["all_steps"] else d_pred[:, None, None]
        d_r, g = L.dense_stack_backward(model.head, d_out, cache["head"])
        put("head", g)
        if v is Variant.LSTM_CONCATENATE:
            d_cond = d_r[:, :, H:].sum(axis=1)
            d_r = d_r[:, :, :H]
        d_hs = np.zeros((d_r.shape[0], T, H))
        if cache["all_steps"]:
            d_hs += d_r
        else:
            d_hs[:, -1] = d_r[:, 0]
        d_x, d_c, lgrads, cgrads = R.lstm_stack_backward(model.lstm, d_hs, cache["lstm"], model.condition)
        for k, lg in enumerate(lgrads):
            put(f"lstm.{k}", lg)
        if cgrads is not None:
            put("cond", cgrads)
            d_cond = d_c
        if model.pre_dense is not None:
            d_x, g = L.dense_stack_backward(model.pre_dense, d_x, cache["pre"])
            put("pre", g)
        if v is Variant.LSTM_REPLICATE:
            d_cond = d_x[:, :, len(v.series_features) :].sum(axis=1)

    if v.uses_text:
        n_text = cache["text_len"]
        d_emb, g = L.conv_stack_backward(model.text_encoder, d_cond[:, :n_text], cache["text"])
        put("text", g)
        put("embedding", L.embedding_backward(model.embedding, d_emb, cache["emb"]))
    return grads


# ---------------------------------------------------------------- prediction


def predict_day(model: Model, case: CaseRecord, d: int) -> float:
    """Forecast of the case's final total (RMB) using days 1..d."""
    if model.variant.is_recurrent:
        if d < 1:
            raise InputError(f"{model.variant.value} forecasts start at day 1, got day {d}")
        if case.n_days < d:
            raise InputError(f"case {case.case_id} has {case.n_days} observed days, fewer than {d}")
    elif d < 0:
        raise InputError("day must be non-negative")
    batch = model.encode([case], d if model.variant.is_recurrent else None)
    pred, _ = forward(model, batch)
    return float(pred[0]) * model.normalizer.target_scale


def predict_days(model: Model | OracleModel, cases: Sequence[CaseRecord], batch_size: int = 256) -> np.ndarray:
    """(n_cases, 41) RMB forecasts for days 1..41 from one pass per case.

    Recurrent outputs at step d depend only on days <= d, so reading every
    step of the full pass equals predicting on each truncated prefix.
    """
    if isinstance(model, OracleModel):
        return model.predict_days(cases)
    out = np.empty((len(cases), PREDICTION_DAYS))
    n_days = PREDICTION_DAYS if model.variant.is_recurrent else None
    for s in range(0, len(cases), batch_size):
        chunk = cases[s : s + batch_size]
        pred, _ = forward(model, model.encode(chunk, n_days), all_steps=True)
        out[s : s + len(chunk)] = pred
    return out * model.normalizer.target_scale


@dataclass
class OracleModel:
    """Reference predictor that returns the true totals (checks the evaluation path)."""

    variant_tag: str = "oracle"

    def predict_days(self, cases: Sequence[CaseRecord]) -> np.ndarray:
        y = np.array([c.total_donations for c in cases], dtype=np.float64)
        return np.repeat(y[:, None], PREDICTION_DAYS, axis=1)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CONDLSTM-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: Model | OracleModel, meta: dict | None = None) -> bytes:
    if isinstance(model, OracleModel):
        header = {"version": FORMAT_VERSION, "variant": "oracle", "meta": meta or {}, "arrays": []}
        payload = b""
    else:
        params = model.params()
        arrays, chunks, offset = [], [], 0
        for name, arr in params.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            arrays.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        header = {
            "version": FORMAT_VERSION,
            "variant": model.variant.value,
            "config": model.config.to_dict(),
            "normalizer": model.normalizer.to_dict() if model.normalizer else None,
            "vocab": model.vocab.words if model.vocab else None,
            "meta": meta or {},
            "arrays": arrays,
            "dtype": "<f8",
        }
        payload = b"".join(chunks)
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hdr)) + hdr + payload


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta))


def load_checkpoint(path) -> tuple[Model | OracleModel, dict]:
    """Returns (model, meta)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a model checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos : pos + n].decode("utf-8"))
    pos += n
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if header["variant"] == "oracle":
        return OracleModel(), header["meta"]
    config = ArchConfig.from_dict(header["config"])
    vocab = Vocab(header["vocab"]) if header["vocab"] is not None else None
    norm = Normalizer.from_dict(header["normalizer"]) if header["normalizer"] else None
    model = build_model(header["variant"], config, Rng(0), norm, vocab)
    params = model.params()
    names = [a["name"] for a in header["arrays"]]
    if names != list(params):
        raise CheckpointError("checkpoint parameters do not match the variant's layout")
    for spec in header["arrays"]:
        start = pos + spec["offset"]
        arr = np.frombuffer(raw[start : start + spec["nbytes"]], dtype="<f8").reshape(spec["shape"])
        target = params[spec["name"]]
        if target.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {spec['name']}: {arr.shape} vs {target.shape}")
        target[...] = arr
    return model, header["meta"]
