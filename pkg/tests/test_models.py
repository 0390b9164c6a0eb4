import dataclasses

import numpy as np
import pytest
from conftest import TOY_ARCH, model_gradient_errors, toy_model
from hypothesis import given, settings
from hypothesis import strategies as st

from condlstm import layers as L
from condlstm import models as M
from condlstm import recurrent as R
from condlstm.models import Variant


def test_table_of_inputs():
    assert len(M.VARIANT_NAMES) == 7
    full = Variant.LSTM_COND
    assert full.uses_text and full.uses_static and full.is_recurrent and full.conditioned
    assert Variant.LSTM_COND_PARTIAL.series_features == (0,)
    assert not Variant.LSTM_TIME_SERIES.uses_text and not Variant.LSTM_TIME_SERIES.uses_static
    assert not Variant.NN_TIME_INVARIANT_NO_TEXT.uses_text
    assert not Variant.NN_TIME_INVARIANT.is_recurrent


def test_build_nn_no_text(small_corpus):
    m = toy_model("nn-time-invariant-no-text", small_corpus)
    assert m.embedding is None and m.text_encoder is None and not m.lstm and m.condition is None
    assert m.head.out_dim == 1


def test_build_lstm_cond_defaults(small_corpus):
    norm = M.Normalizer.fit(small_corpus)
    from condlstm.data import Vocab

    vocab = Vocab.build(c.post_text for c in small_corpus)
    m = M.build_model("lstm-cond", M.ArchConfig(), None, norm, vocab)
    assert m.embedding is not None and m.text_encoder is not None and m.condition is not None
    assert [layer.hidden_size for layer in m.lstm] == [64, 32]
    assert m.head.out_dim == 1


def test_build_time_series_defaults():
    m = M.build_model("lstm-time-series")
    assert m.embedding is None and m.condition is None
    assert m.pre_dense.out_dim == 64
    assert [layer.hidden_size for layer in m.lstm] == [64, 32]
    assert [w.shape[0] for w in m.head.weights] == [32, 16, 1]


def test_nn_default_widths():
    m = M.build_model("nn-time-invariant-no-text")
    assert [w.shape[0] for w in m.head.weights] == [60, 130, 90, 1]


def test_config_error_lists_fields():
    bad = dataclasses.replace(M.ArchConfig(), embed_dim=0, dropout=1.5)
    with pytest.raises(M.ConfigError, match="embed_dim.*dropout"):
        M.build_model("lstm-cond", bad)


def test_unknown_variant():
    with pytest.raises(ValueError):
        M.build_model("lstm-magic")


def test_nn_prediction_constant_across_days(small_corpus):
    m = toy_model("nn-time-invariant", small_corpus)
    case = small_corpus[4]
    assert M.predict_day(m, case, 3) == M.predict_day(m, case, 17)
    assert M.predict_day(m, case, 0) == M.predict_day(m, case, 41)


def test_lstm_day_zero_is_an_error(small_corpus):
    m = toy_model("lstm-cond", small_corpus)
    with pytest.raises(M.InputError):
        M.predict_day(m, small_corpus[0], 0)


def test_short_series_is_an_input_error(small_corpus):
    m = toy_model("lstm-cond", small_corpus)
    case = dataclasses.replace(small_corpus[0], series=small_corpus[0].series[:, :5])
    with pytest.raises(M.InputError, match="fewer than 9"):
        M.predict_day(m, case, 9)


def test_severed_conditions_make_text_irrelevant(small_corpus):
    m = toy_model("lstm-cond", small_corpus)
    m.condition.W_con[...] = 0.0
    m.condition.b_con[...] = 0.0
    case = small_corpus[0]
    other = dataclasses.replace(case, post_text=small_corpus[7].post_text + " extra words")
    assert M.predict_day(m, case, 6) == M.predict_day(m, other, 6)


def test_replicate_step_input_size(small_corpus):
    m = toy_model("lstm-replicate", small_corpus)
    assert m.step_input_size() == 8 + m.condition_length()
    assert m.lstm[0].W.shape[1] == m.lstm[0].hidden_size + 8 + m.condition_length()


@pytest.mark.parametrize("variant", M.VARIANT_NAMES)
def test_end_to_end_gradients(variant, toy_cases):
    errs = model_gradient_errors(toy_model(variant, toy_cases), toy_cases)
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-5, (worst, errs[worst])


@pytest.mark.parametrize("variant", ["lstm-cond", "lstm-replicate", "nn-time-invariant"])
def test_gradients_with_relu_output(variant, toy_cases):
    arch = dataclasses.replace(TOY_ARCH, final_activation="relu")
    m = toy_model(variant, toy_cases, arch)
    m.head.biases[-1][...] = 0.5  # keep the output unit active for the check
    errs = model_gradient_errors(m, toy_cases)
    assert max(errs.values()) < 1e-5


@pytest.mark.parametrize("variant", ["lstm-cond", "lstm-replicate", "lstm-concatenate", "lstm-cond-partial"])
def test_future_days_never_leak(variant, small_corpus):
    m = toy_model(variant, small_corpus)
    case = small_corpus[2]
    g = np.random.default_rng(0)
    for d in (1, 5, 20, 40):
        mutated = case.series.copy()
        mutated[:, d:] = g.uniform(0, 1e5, size=mutated[:, d:].shape)
        truncated = dataclasses.replace(case, series=case.series[:, :d])
        noisy = dataclasses.replace(case, series=mutated)
        ref = M.predict_day(m, case, d)
        assert M.predict_day(m, truncated, d) == ref
        assert M.predict_day(m, noisy, d) == ref


@pytest.mark.parametrize("variant", ["lstm-cond", "lstm-time-series", "nn-time-invariant"])
def test_predict_days_matches_predict_day(variant, small_corpus):
    m = toy_model(variant, small_corpus)
    cases = small_corpus[:4]
    table = M.predict_days(m, cases)
    assert table.shape == (4, 41)
    for i, case in enumerate(cases):
        for d in (1, 2, 13, 41):
            assert table[i, d - 1] == pytest.approx(M.predict_day(m, case, d), rel=1e-12, abs=1e-9)


def _copy_recurrent_core(src, dst, head_rows=None):
    for a, b in zip(src.lstm, dst.lstm):
        b.W[...] = a.W
        b.b[...] = a.b
    for k, (w, bias) in enumerate(zip(src.head.weights, src.head.biases)):
        dst.head.weights[k][...] = w if k or head_rows is None else w[:, :head_rows]
        dst.head.biases[k][...] = bias


def test_zeroed_concat_weights_reduce_to_time_series(small_corpus):
    arch = dataclasses.replace(TOY_ARCH, pre_dense_units=())
    ts = toy_model("lstm-time-series", small_corpus, arch, seed=3)
    concat = toy_model("lstm-concatenate", small_corpus, arch, seed=5)
    H = concat.lstm[-1].hidden_size
    concat.head.weights[0][:, H:] = 0.0
    _copy_recurrent_core(concat, ts, head_rows=H)
    cases = small_corpus[:5]
    np.testing.assert_allclose(M.predict_days(concat, cases), M.predict_days(ts, cases), rtol=1e-13)


def test_zeroed_conditions_equal_time_series_with_blank_first_hidden(small_corpus):
    # h at step 1 is replaced outright, so a severed condition path leaves
    # the series path with h1 = tanh(0) = 0 in the bottom layer
    arch = dataclasses.replace(TOY_ARCH, pre_dense_units=(), head_units=())
    ts = toy_model("lstm-time-series", small_corpus, arch, seed=3)
    cond = toy_model("lstm-cond", small_corpus, arch, seed=4)
    cond.condition.W_con[...] = 0.0
    cond.condition.b_con[...] = 0.0
    _copy_recurrent_core(cond, ts)
    blank = R.ConditionParams(np.zeros((ts.lstm[0].hidden_size, 1)), np.zeros(ts.lstm[0].hidden_size))
    case = small_corpus[1]
    for d in (1, 2, 9):
        x = ts.normalizer.series(case, d)
        r = R.run_sequence(ts.lstm, blank, np.zeros(1), x, "conditioned")
        expect = L.dense_forward(ts.head, r)[0] * ts.normalizer.target_scale
        assert M.predict_day(cond, case, d) == pytest.approx(expect, rel=1e-13)
    assert M.predict_day(cond, case, 3) != M.predict_day(ts, case, 3)


def test_normalizer_uses_given_cases_only(small_corpus):
    a = M.Normalizer.fit(small_corpus[:20])
    b = M.Normalizer.fit(small_corpus[:20] + small_corpus[40:])
    assert not np.array_equal(a.series_mean, b.series_mean)
    assert a.target_scale == pytest.approx(np.mean([c.total_donations for c in small_corpus[:20]]))
    assert a.static(small_corpus[0]).shape == (M.STATIC_DIM,)


@pytest.mark.parametrize("variant", M.VARIANT_NAMES)
def test_checkpoint_round_trip(variant, small_corpus, tmp_path):
    m = toy_model(variant, small_corpus)
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(m, path, {"best_epoch": 3})
    loaded, meta = M.load_checkpoint(path)
    assert meta == {"best_epoch": 3}
    assert M.checkpoint_bytes(loaded, meta) == path.read_bytes()
    np.testing.assert_array_equal(M.predict_days(loaded, small_corpus[:3]), M.predict_days(m, small_corpus[:3]))


def test_oracle_checkpoint(tmp_path, small_corpus):
    path = tmp_path / "o.ckpt"
    M.save_checkpoint(M.OracleModel(), path)
    loaded, _ = M.load_checkpoint(path)
    assert isinstance(loaded, M.OracleModel)
    assert np.all(M.predict_days(loaded, small_corpus[:2])[:, 0] == [c.total_donations for c in small_corpus[:2]])


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(p)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_arch_config_dict_round_trip(seed):
    g = np.random.default_rng(seed)
    cfg = dataclasses.replace(
        M.ArchConfig(),
        lstm_units=tuple(int(u) for u in g.integers(1, 99, size=g.integers(1, 4))),
        dropout=float(g.uniform(0, 0.9)),
    )
    assert M.ArchConfig.from_dict(cfg.to_dict()) == cfg
