import dataclasses

import numpy as np
import pytest
from conftest import TOY_ARCH
from hypothesis import given, settings
from hypothesis import strategies as st

from condlstm import models as M
from condlstm import training as T
from condlstm.data import Dataset, Instance, split_cases
from condlstm.numcore import NumericError, Rng


def test_mse_examples():
    assert T.mse_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert T.mse_loss([0.0, 0.0], [3.0, 4.0]) == 12.5
    with pytest.raises(ValueError):
        T.mse_loss([], [])


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=30), st.randoms())
def test_mse_permutation_invariant(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = T.mse_loss(*zip(*pairs))
    b = T.mse_loss(*zip(*shuffled))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def _inst(days):
    return [Instance(f"c{k}", d, 1.0) for k, d in enumerate(days)]


def test_batch_by_length_buckets():
    batches = T.batch_by_length(_inst([1, 1, 2]), 10, Rng(0))
    assert sorted(len(b) for b in batches) == [1, 2]
    for b in batches:
        assert len({i.day for i in b}) == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 41), min_size=1, max_size=200), st.integers(1, 16), st.integers(0, 2**31))
def test_batch_by_length_properties(days, size, seed):
    inst = _inst(days)
    batches = T.batch_by_length(inst, size, Rng(seed))
    flat = [i for b in batches for i in b]
    assert sorted(flat, key=lambda i: i.case_id) == sorted(inst, key=lambda i: i.case_id)
    assert all(0 < len(b) <= size and len({i.day for i in b}) == 1 for b in batches)
    assert T.batch_by_length(inst, size, Rng(seed)) == batches


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    T.adam_step(p, {"w": np.zeros(2)}, T.AdamState(), 1e-3)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_magnitude():
    p = {"w": np.zeros(3)}
    T.adam_step(p, {"w": np.array([0.5, -3.0, 100.0])}, T.AdamState(), 1e-3)
    np.testing.assert_allclose(np.abs(p["w"]), 1e-3, rtol=1e-6)


def test_adam_quadratic_bowl_monotone():
    p = {"w": np.array([0.3, -0.2, 0.1])}
    state = T.AdamState()
    losses = []
    for _ in range(100):
        losses.append(float(np.sum(p["w"] ** 2)))
        T.adam_step(p, {"w": 2 * p["w"]}, state, 1e-3)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_rejects_non_finite():
    p = {"w": np.ones(2)}
    with pytest.raises(NumericError):
        T.adam_step(p, {"w": np.array([np.nan, 1.0])}, T.AdamState(), 1e-3)
    assert p["w"].tolist() == [1.0, 1.0]


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert T.clip_global_norm(g, 1.0) == 5.0
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        T.TrainConfig(learning_rate=0.0)


def test_single_step_decreases_instance_loss(small_corpus):
    arch = dataclasses.replace(TOY_ARCH, dropout=0.0)
    model = T.prepare_model("lstm-cond", small_corpus, arch, seed=2)
    g = np.random.default_rng(0)
    for case_i, day in zip(g.integers(len(small_corpus), size=20), g.integers(1, 42, size=20)):
        case = small_corpus[case_i]
        batch = model.encode([case], int(day))
        y = np.array([case.total_donations / model.normalizer.target_scale])
        pred, cache = M.forward(model, batch)
        before = T.mse_loss(pred, y)
        grads = M.backward(model, 2 * (pred - y), cache)
        saved = {k: v.copy() for k, v in model.params().items()}
        T.adam_step(model.params(), grads, T.AdamState(), 1e-4)
        after = T.mse_loss(M.forward(model, batch)[0], y)
        assert after < before
        for k, v in model.params().items():
            v[...] = saved[k]


def _tiny_split(corpus, n=50):
    return split_cases(corpus[:n], seed=1)


@pytest.mark.parametrize("batching", ["length", "prefix"])
def test_smoke_training_reduces_loss(small_corpus, batching):
    ds = _tiny_split(small_corpus)
    model = T.prepare_model("lstm-cond", ds.train, TOY_ARCH, seed=0)
    cfg = T.TrainConfig(learning_rate=1e-2, batch_size=64, max_epochs=4, patience=10, batching=batching)
    _, hist = T.train(model, ds, cfg)
    assert hist.train_loss[-1] < hist.train_loss[0]
    assert len(hist.train_loss) <= cfg.max_epochs
    assert hist.best_val_mae == min(hist.val_mae)


def test_training_is_deterministic(small_corpus):
    ds = _tiny_split(small_corpus)
    cfg = T.TrainConfig(learning_rate=1e-2, batch_size=32, max_epochs=3, batching="prefix", seed=5)
    runs = []
    for _ in range(2):
        model = T.prepare_model("lstm-replicate", ds.train, TOY_ARCH, seed=0)
        _, hist = T.train(model, ds, cfg)
        runs.append((hist.train_loss, hist.val_mae, hist.best_epoch, model.params()))
    assert runs[0][:3] == runs[1][:3]
    for k in runs[0][3]:
        assert np.array_equal(runs[0][3][k], runs[1][3][k])


def test_best_epoch_parameters_are_restored(small_corpus):
    ds = _tiny_split(small_corpus, 60)
    model = T.prepare_model("nn-time-invariant", ds.train, TOY_ARCH, seed=0)
    cfg = T.TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=12, patience=12)
    _, hist = T.train(model, ds, cfg)
    enc = T.EncodedSplit.build(model, ds.val)
    mae = np.mean(np.abs(T.predict_encoded(model, enc) - enc.targets[:, None] * model.normalizer.target_scale))
    assert mae == hist.val_mae[hist.best_epoch]


def test_memorization(small_corpus):
    cases = small_corpus[:5]
    arch = dataclasses.replace(TOY_ARCH, lstm_units=(8,), head_units=(8,), dropout=0.0)
    model = T.prepare_model("lstm-cond", cases, arch, seed=0)
    cfg = T.TrainConfig(
        learning_rate=1e-2, batch_size=5, max_epochs=2000, patience=2000, dropout_rate=0.0, batching="prefix"
    )
    T.train(model, Dataset(cases, [], []), cfg)
    y = np.array([c.total_donations for c in cases])
    pred = M.predict_days(model, cases)
    assert np.mean(np.abs(pred - y[:, None])) < 0.05 * y.std()


def test_divergence_raises_with_history(small_corpus):
    ds = _tiny_split(small_corpus)
    model = T.prepare_model("nn-time-invariant-no-text", ds.train, TOY_ARCH, seed=0)
    model.head.weights[0][...] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(T.TrainingError) as err:
        T.train(model, ds, T.TrainConfig(max_epochs=2))
    assert isinstance(err.value.history, T.TrainHistory)
    assert all(np.isfinite(err.value.history.train_loss))


def test_overlapping_splits_rejected(small_corpus):
    ds = _tiny_split(small_corpus)
    model = T.prepare_model("nn-time-invariant", ds.train, TOY_ARCH)
    with pytest.raises(ValueError):
        T.train(model, Dataset(ds.train, ds.train[:2], ds.test))


def test_prepare_model_fits_on_train_only(small_corpus):
    ds = _tiny_split(small_corpus)
    model = T.prepare_model("lstm-cond", ds.train, TOY_ARCH)
    ref = M.Normalizer.fit(ds.train)
    assert np.array_equal(model.normalizer.series_mean, ref.series_mean)


def test_tune_singleton():
    space = T.SearchSpace(widths=(32,), max_depth=1)
    cfg = T.tune("lstm-cond", None, space, M.ArchConfig(), evaluate=lambda c: 1.0)
    assert cfg.lstm_units == (32,)


def test_tune_picks_dominant_config():
    space = T.SearchSpace(widths=(16, 48, 64), max_depth=1, component="head")
    cfg = T.tune("lstm-cond", None, space, evaluate=lambda c: 0.5 if c.head_units == (48,) else 1.0)
    assert cfg.head_units == (48,)


def test_tune_stops_on_flat_tail():
    calls = []

    def score(c):
        calls.append(c.lstm_units)
        depth_gain = {1: 10.0, 2: 8.0, 3: 7.99}[len(c.lstm_units)]
        return depth_gain + 0.001 * c.lstm_units[-1]

    cfg = T.tune("lstm-cond", None, T.SearchSpace(widths=(16, 32), max_depth=3), evaluate=score)
    assert cfg.lstm_units == (16, 16)
    assert any(len(u) == 3 for u in calls)


def test_tune_trains_real_models(small_corpus):
    ds = _tiny_split(small_corpus)
    space = T.SearchSpace(widths=(2, 4), max_depth=1, component="nn")
    cfg = T.tune("nn-time-invariant-no-text", ds, space, TOY_ARCH, T.TrainConfig(max_epochs=2))
    assert cfg.nn_units in ((2,), (4,))
