"""Case schema, corpus I/O, tokenization, instance expansion and splitting.

Also hosts the synthetic corpus generator (four planted donation-pattern
clusters whose scales follow published per-cluster means) and two small
planted-structure generators used to check the clustering pipeline.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from .numcore import Rng

log = logging.getLogger(__name__)

HORIZON = 42  # days observed per case
PREDICTION_DAYS = 41  # the final day is never forecast
SERIES_FEATURES = (
    "donate_amt",
    "donate_user_num",
    "reply_num",
    "verification_user_num",
    "share_wechat_msg",
    "share_wechat_moment",
    "share_cnt",
    "total_view",
)
N_SERIES = len(SERIES_FEATURES)
SUM_TOLERANCE = 0.5  # RMB

FIELDS = (
    "case_id",
    "age",
    "is_female",
    "has_basic_insurance",
    "has_commercial_insurance",
    "target_amount",
    "content_length",
    "title_length",
    "region_id",
    "launch_month",
    "launch_day",
    "launch_weekday",
    "gender_disclosed",
    "post_text",
    "series",
    "total_donations",
)

PAD_ID = 0
UNK_ID = 1


class CorpusError(ValueError):
    """Malformed corpus line or record violating the case invariants."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class StaticFeatures:
    age: float
    is_female: bool
    has_basic_insurance: bool
    has_commercial_insurance: bool
    target_amount: float
    content_length: int
    title_length: int
    region_id: int
    launch_month: int
    launch_day: int
    launch_weekday: int
    gender_disclosed: bool


@dataclass(eq=False)
class CaseRecord:
    case_id: str
    static: StaticFeatures
    post_text: str
    series: np.ndarray  # (8, T), feature order as SERIES_FEATURES
    total_donations: float
    planted_cluster: int | None = field(default=None, repr=False)

    @property
    def target_amount(self) -> float:
        return self.static.target_amount

    @property
    def n_days(self) -> int:
        return self.series.shape[1]

    def padded_series(self, horizon: int = HORIZON) -> np.ndarray:
        out = np.zeros((N_SERIES, horizon))
        out[:, : self.n_days] = self.series[:, :horizon]
        return out

    def __eq__(self, other):
        if not isinstance(other, CaseRecord):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.static == other.static
            and self.post_text == other.post_text
            and self.total_donations == other.total_donations
            and self.series.shape == other.series.shape
            and bool(np.array_equal(self.series, other.series))
        )


@dataclass(frozen=True)
class Instance:
    case_id: str
    day: int
    label: float


@dataclass
class Dataset:
    train: list[CaseRecord]
    val: list[CaseRecord]
    test: list[CaseRecord]


# ------------------------------------------------------------------ validation


def validate_case(case: CaseRecord) -> None:
    s = case.static
    if not 0 <= s.age <= 120:
        raise CorpusError(f"case {case.case_id}: age {s.age} outside [0, 120]")
    if s.content_length < 0 or s.title_length < 0:
        raise CorpusError(f"case {case.case_id}: negative text length")
    if not s.target_amount > 0:
        raise CorpusError(f"case {case.case_id}: target amount must be positive")
    series = case.series
    if series.ndim != 2 or series.shape[0] != N_SERIES:
        raise CorpusError(f"case {case.case_id}: series must have {N_SERIES} rows, got shape {series.shape}")
    if series.shape[1] > HORIZON:
        raise CorpusError(f"case {case.case_id}: series longer than {HORIZON} days")
    if not np.all(np.isfinite(series)) or np.any(series < 0):
        raise CorpusError(f"case {case.case_id}: series values must be finite and non-negative")
    if case.total_donations < 0:
        raise CorpusError(f"case {case.case_id}: negative total donations")
    gap = abs(float(series[0].sum()) - case.total_donations)
    if gap > SUM_TOLERANCE:
        raise CorpusError(
            f"case {case.case_id}: daily donations sum to {series[0].sum():.2f} but total is {case.total_donations:.2f}"
        )


# ------------------------------------------------------------------ file I/O


def case_to_json(case: CaseRecord) -> str:
    s = case.static
    rec = {
        "case_id": case.case_id,
        "age": s.age,
        "is_female": s.is_female,
        "has_basic_insurance": s.has_basic_insurance,
        "has_commercial_insurance": s.has_commercial_insurance,
        "target_amount": s.target_amount,
        "content_length": s.content_length,
        "title_length": s.title_length,
        "region_id": s.region_id,
        "launch_month": s.launch_month,
        "launch_day": s.launch_day,
        "launch_weekday": s.launch_weekday,
        "gender_disclosed": s.gender_disclosed,
        "post_text": case.post_text,
        "series": case.series.tolist(),
        "total_donations": case.total_donations,
    }
    return json.dumps(rec, ensure_ascii=False, separators=(",", ":"))


def case_from_json(obj: dict) -> CaseRecord:
    missing = [k for k in FIELDS if k not in obj]
    if missing:
        raise CorpusError(f"missing fields {missing}")
    static = StaticFeatures(
        age=float(obj["age"]),
        is_female=bool(obj["is_female"]),
        has_basic_insurance=bool(obj["has_basic_insurance"]),
        has_commercial_insurance=bool(obj["has_commercial_insurance"]),
        target_amount=float(obj["target_amount"]),
        content_length=int(obj["content_length"]),
        title_length=int(obj["title_length"]),
        region_id=int(obj["region_id"]),
        launch_month=int(obj["launch_month"]),
        launch_day=int(obj["launch_day"]),
        launch_weekday=int(obj["launch_weekday"]),
        gender_disclosed=bool(obj["gender_disclosed"]),
    )
    series = np.asarray(obj["series"], dtype=np.float64)
    if series.ndim == 1 and series.size == 0:
        series = series.reshape(N_SERIES, 0)
    return CaseRecord(str(obj["case_id"]), static, str(obj["post_text"]), series, float(obj["total_donations"]))


def write_corpus(cases: Iterable[CaseRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for case in cases:
            fh.write(case_to_json(case))
            fh.write("\n")


def load_corpus(path, strict: bool = True) -> list[CaseRecord]:
    """Read a line-delimited corpus.

    With ``strict`` any bad line raises :class:`CorpusError`; otherwise bad
    lines are logged with their line numbers and skipped.
    """
    cases: list[CaseRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"malformed record: {exc.msg}") from None
                case = case_from_json(obj)
                validate_case(case)
                if case.case_id in seen:
                    raise CorpusError(f"duplicate case id {case.case_id}")
            except (CorpusError, TypeError, ValueError) as exc:
                msg = exc.args[0] if isinstance(exc, CorpusError) else str(exc)
                if isinstance(exc, CorpusError) and exc.line is None:
                    msg = str(exc)
                if strict:
                    raise CorpusError(msg, lineno) from None
                log.warning("rejected line %d: %s", lineno, msg)
                continue
            seen.add(case.case_id)
            cases.append(case)
    return cases


# ------------------------------------------------------------------ text


@dataclass
class Vocab:
    words: list[str]  # index = token id; entries 0 and 1 are the pad/unk markers

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 8192) -> Vocab:
        counts = Counter(w for t in texts for w in t.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = ["<pad>", "<unk>"] + [w for w, _ in ranked[: max_size - 2]]
        return cls(words)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index and self._index[word] > UNK_ID

    def id(self, word: str) -> int:
        i = self._index.get(word, UNK_ID)
        return UNK_ID if i == PAD_ID else i


def tokenize(text: str | Sequence[str], vocab: Vocab, max_len: int) -> np.ndarray:
    """Whitespace tokens (or a pre-segmented list) to ids, right-padded/truncated."""
    words = text.split() if isinstance(text, str) else list(text)
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    for k, w in enumerate(words[:max_len]):
        ids[k] = vocab.id(w)
    return ids


# ------------------------------------------------------------------ instances and splits


def expand_instances(corpus: Sequence[CaseRecord]) -> list[Instance]:
    return [Instance(case.case_id, d, case.total_donations) for case in corpus for d in range(1, PREDICTION_DAYS + 1)]


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    return n - n_val - n_test, n_val, n_test


def split_cases(corpus: Sequence[CaseRecord], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Case-level partition; all daily instances of a case share its split."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise UsageError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if len(corpus) < 10:
        raise UsageError(f"need at least 10 cases to split, got {len(corpus)}")
    order = Rng(seed).split(0x5B11).gen.permutation(len(corpus))
    n_train, n_val, _ = split_sizes(len(corpus), ratios)
    pick = lambda idx: [corpus[i] for i in idx]
    return Dataset(
        pick(order[:n_train]),
        pick(order[n_train : n_train + n_val]),
        pick(order[n_train + n_val :]),
    )


# ------------------------------------------------------------------ synthetic corpus

# Per-cluster means (total over 42 days) for the eight daily series plus the
# static profile, in the order low interest, active repliers, social
# attention attracters, young & female.
CLUSTER_NAMES = ("low_interest", "active_repliers", "social_attention", "young_female")
CLUSTER_SERIES_MEANS = np.array(
    [
        [17677, 574, 334, 38, 26, 298, 515, 6326],
        [74782, 2721, 1034, 114, 68, 1155, 1809, 25417],
        [65069, 2555, 827, 110, 811, 21252, 43298, 25160],
        [246493, 10028, 967, 220, 160, 4595, 7645, 75560],
    ],
    dtype=np.float64,
)
CLUSTER_AGE = (41.0, 31.0, 28.0, 22.0)
CLUSTER_FEMALE = (0.401, 0.388, 0.430, 0.485)
CLUSTER_TARGET = (182187.0, 269570.0, 268861.0, 383299.0)
CLUSTER_CONTENT = (375.0, 527.0, 482.0, 687.0)
CLUSTER_TITLE = (17.0, 18.0, 19.0, 18.0)
DEFAULT_MIX = (0.854, 0.07, 0.05, 0.026)

# daily decay rate of each cluster's activity; attracters burn out fastest
CLUSTER_DECAY = (0.10, 0.16, 0.30, 0.20)

_GENERIC_WORDS = 300
_CLUSTER_WORDS = 40
_QUALITY_WORDS = 30


def _word(kind: str, i: int) -> str:
    return f"{kind}{i:03d}"


def _sample_post(gen: np.random.Generator, cluster: int, quality: float) -> str:
    n = int(np.clip(gen.poisson(36), 12, 80))
    words = []
    p_cluster, p_quality = 0.25, 0.15
    for _ in range(n):
        u = gen.random()
        if u < p_cluster:
            words.append(_word(f"c{cluster}w", int(gen.zipf(1.6)) % _CLUSTER_WORDS))
        elif u < p_cluster + p_quality:
            tag = "pos" if gen.random() < 1.0 / (1.0 + math.exp(-2.0 * quality)) else "neg"
            words.append(_word(tag, int(gen.integers(_QUALITY_WORDS))))
        else:
            words.append(_word("g", int(gen.zipf(1.3)) % _GENERIC_WORDS))
    return " ".join(words)


def _overdispersed(gen: np.random.Generator, mean: np.ndarray, shape: float = 4.0) -> np.ndarray:
    # gamma-Poisson mixture: variance = mean + mean^2 / shape
    return gen.poisson(mean * gen.gamma(shape, 1.0 / shape, size=mean.shape)).astype(np.float64)


def _decay_weights(gen: np.random.Generator, rate: float, noise: float) -> np.ndarray:
    t = np.arange(HORIZON)
    w = np.exp(-rate * t + noise * gen.standard_normal(HORIZON))
    return w / w.sum()


def generate_synthetic(n_cases: int, seed: int = 0, cluster_mix: Sequence[float] = DEFAULT_MIX) -> list[CaseRecord]:
    """Synthetic corpus; a pure function of (n_cases, seed, cluster_mix)."""
    mix = np.asarray(cluster_mix, dtype=np.float64)
    if n_cases < 10:
        raise UsageError(f"n_cases must be at least 10, got {n_cases}")
    if mix.shape != (4,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-6:
        raise UsageError(f"cluster mix must be 4 non-negative weights summing to 1, got {list(cluster_mix)}")
    mix = mix / mix.sum()
    root = Rng(seed)
    clusters = root.split(0).gen.choice(4, size=n_cases, p=mix)
    cases = []
    for idx in range(n_cases):
        gen = root.split(1, idx).gen
        k = int(clusters[idx])
        means = CLUSTER_SERIES_MEANS[k]

        age = float(np.clip(round(gen.normal(CLUSTER_AGE[k], 10.0)), 1, 90))
        female = bool(gen.random() < CLUSTER_FEMALE[k])
        target = float(round(CLUSTER_TARGET[k] * math.exp(0.5 * gen.standard_normal() - 0.125), -2))
        target = max(target, 1000.0)
        content = int(max(20, round(gen.normal(CLUSTER_CONTENT[k], 0.25 * CLUSTER_CONTENT[k]))))
        title = int(max(4, round(gen.normal(CLUSTER_TITLE[k], 4.0))))
        static = StaticFeatures(
            age=age,
            is_female=female,
            has_basic_insurance=bool(gen.random() < 0.7),
            has_commercial_insurance=bool(gen.random() < 0.15),
            target_amount=target,
            content_length=content,
            title_length=title,
            region_id=int(gen.integers(31)),
            launch_month=int(gen.integers(1, 13)),
            launch_day=int(gen.integers(1, 29)),
            launch_weekday=int(gen.integers(7)),
            gender_disclosed=bool(gen.random() < 0.95),
        )
        quality = float(gen.standard_normal())
        post = _sample_post(gen, k, quality)

        # case-level appeal: static attributes and post quality shift the total
        appeal = (
            0.35 * math.log(target / CLUSTER_TARGET[k])
            - 0.015 * (age - CLUSTER_AGE[k])
            + 0.08 * (1.0 if female else 0.0)
            + 0.35 * quality
            + 0.45 * gen.standard_normal()
        )
        scale = math.exp(appeal - 0.5 * (0.35**2 * 0.25 + 0.015**2 * 100 + 0.35**2 + 0.45**2))
        total_mean = means[0] * scale
        rate = CLUSTER_DECAY[k] * math.exp(0.3 * gen.standard_normal())

        series = np.zeros((N_SERIES, HORIZON))
        w_don = _decay_weights(gen, rate, 0.35)
        series[0] = np.round(total_mean * w_don, 2)
        gift = means[0] / means[1]
        series[1] = gen.poisson(series[0] / gift * gen.gamma(8.0, 1.0 / 8.0, size=HORIZON))
        engage = math.sqrt(scale)
        for j in (2, 3, 4, 5):
            w = _decay_weights(gen, rate * 0.8, 0.4)
            series[j] = _overdispersed(gen, means[j] * engage * w)
        other = _overdispersed(gen, max(means[6] - means[4] - means[5], 1.0) * engage * _decay_weights(gen, rate, 0.4))
        series[6] = series[4] + series[5] + other
        series[7] = _overdispersed(gen, means[7] * scale * _decay_weights(gen, rate * 0.9, 0.3), shape=8.0)

        total = float(round(series[0].sum(), 2))
        cases.append(CaseRecord(f"case{idx:06d}", static, post, series, total, planted_cluster=k))
    return cases


# ------------------------------------------------------------------ planted structures


def _series_archetypes(length: int = HORIZON) -> np.ndarray:
    t = np.arange(length)
    return np.stack([3.0 * np.exp(-0.15 * t), np.full(length, 0.6), 2.0 / (1.0 + np.exp(-(t - 20) / 3.0))])


def planted_series_archetypes(n_per: int, seed: int, noise: float = 0.15, length: int = HORIZON):
    """Three series archetypes (early burst, flat trickle, late rise) plus Gaussian noise."""
    protos = _series_archetypes(length)
    gen = Rng(seed).split(0xA1).gen
    labels = np.repeat(np.arange(3), n_per)
    x = protos[labels] + noise * gen.standard_normal((labels.size, length))
    perm = gen.permutation(labels.size)
    return x[perm], labels[perm]


def planted_label_clusters(
    n: int, seed: int, n_clusters: int = 4, n_columns: int = 8, n_levels: int = 4, flip: float = 0.1
):
    """Categorical rows copied from ``n_clusters`` prototypes with per-cell noise."""
    gen = Rng(seed).split(0xB2).gen
    while True:
        protos = gen.integers(n_levels, size=(n_clusters, n_columns))
        dist = (protos[:, None, :] != protos[None, :, :]).sum(-1)
        if dist[np.triu_indices(n_clusters, 1)].min() >= n_columns // 2:
            break
    labels = gen.integers(n_clusters, size=n)
    x = protos[labels].copy()
    noise = gen.random(x.shape) < flip
    x[noise] = gen.integers(n_levels, size=int(noise.sum()))
    return x, labels


# archetype index per feature for each planted case cluster; pairwise Hamming >= 4
PLANTED_CASE_PROTOTYPES = np.array(
    [
        [0, 0, 0, 0, 0, 0, 0, 0],
        [1, 1, 1, 1, 0, 0, 0, 0],
        [2, 2, 0, 0, 1, 1, 1, 1],
        [0, 2, 2, 1, 2, 2, 0, 2],
    ]
)


def planted_cluster_corpus(n_per: int, seed: int = 0, noise: float = 0.15, scale: float = 100.0) -> list[CaseRecord]:
    """Corpus with four case clusters that the two-step clustering should recover.

    Each feature of a case follows the archetype its cluster prescribes
    (see ``PLANTED_CASE_PROTOTYPES``), scaled and perturbed, clipped at zero.
    Static fields are drawn as in ``generate_synthetic`` but carry no signal.
    """
    if n_per < 1:
        raise UsageError("n_per must be positive")
    protos = _series_archetypes()
    gen = Rng(seed).split(0xC3).gen
    labels = gen.permutation(np.repeat(np.arange(len(PLANTED_CASE_PROTOTYPES)), n_per))
    cases = []
    for idx, k in enumerate(labels):
        series = scale * protos[PLANTED_CASE_PROTOTYPES[k]]
        series = np.round(np.maximum(series + scale * noise * gen.standard_normal(series.shape), 0.0), 2)
        static = StaticFeatures(
            age=float(gen.integers(18, 70)),
            is_female=bool(gen.random() < 0.5),
            has_basic_insurance=bool(gen.random() < 0.7),
            has_commercial_insurance=bool(gen.random() < 0.15),
            target_amount=float(gen.integers(10, 500) * 1000),
            content_length=int(gen.integers(100, 800)),
            title_length=int(gen.integers(8, 30)),
            region_id=int(gen.integers(31)),
            launch_month=int(gen.integers(1, 13)),
            launch_day=int(gen.integers(1, 29)),
            launch_weekday=int(gen.integers(7)),
            gender_disclosed=True,
        )
        post = " ".join(_word("g", int(w)) for w in gen.integers(_GENERIC_WORDS, size=20))
        total = float(round(series[0].sum(), 2))
        cases.append(CaseRecord(f"planted{idx:06d}", static, post, series, total, planted_cluster=int(k)))
    return cases
