import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condlstm import layers as L
from condlstm.numcore import Rng, ShapeError, gradient_errors


def table(v=10, d=4, seed=0):
    return L.EmbeddingTable.init(v, d, Rng(seed))


def test_padding_tokens_embed_to_zero():
    t = table()
    assert np.array_equal(L.embed_post(t, [0, 0, 0]), np.zeros((3, 4)))


def test_embedding_is_row_lookup():
    t = table()
    assert np.array_equal(L.embed_post(t, [5])[0], t.weights[5])


def test_embedding_permutation():
    t = table()
    perm = t.weights.copy()
    perm[[5, 7]] = perm[[7, 5]]
    t2 = L.EmbeddingTable(perm)
    assert np.array_equal(L.embed_post(t, [5, 7]), L.embed_post(t2, [7, 5]))


def test_embedding_out_of_vocab_names_id_and_position():
    with pytest.raises(L.EncodingError, match=r"token id 12 at position \(0, 1\)"):
        L.embed_post(table(), [3, 12])


def test_pad_row_gets_no_gradient():
    t = table()
    tokens = np.array([[0, 3, 0, 3]])
    out, cache = L.embedding_forward(t, tokens)
    g = L.embedding_backward(t, np.ones_like(out), cache)["weights"]
    assert np.all(g[0] == 0)
    assert np.all(g[3] == 2)


def single_conv(weights, pool):
    w = np.asarray(weights, dtype=np.float64)
    return L.ConvPoolStack([L.ConvLayer(w, np.zeros(w.shape[0]), pool)])


def test_zero_filter_gives_zero_vector():
    stack = single_conv(np.zeros((1, 2, 3)), 1)
    out = L.encode_text(stack, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.array_equal(out, np.zeros(4))


def test_sliding_sum_then_max():
    stack = single_conv(np.ones((1, 2, 1)), 2)  # conv length 2, pool over it all
    assert L.encode_text(stack, [[1.0], [3.0], [2.0]]).tolist() == [5.0]


def test_doubling_filters_doubles_output():
    g = np.random.default_rng(1)
    w = g.normal(size=(3, 2, 2))
    x = np.abs(g.normal(size=(7, 2)))
    w = np.abs(w)  # keep activations in ReLU's linear region
    a = L.encode_text(single_conv(w, 2), x)
    b = L.encode_text(single_conv(2 * w, 2), x)
    np.testing.assert_allclose(b, 2 * a, rtol=1e-14)


def test_short_input_asks_for_padding():
    stack = L.ConvPoolStack.init(2, [2, 2], [3, 3], [2, 2], Rng(0))
    with pytest.raises(ShapeError, match="pad"):
        L.encode_text(stack, np.zeros((stack.min_input_length() - 1, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(8, 40), st.integers(0, 1000))
def test_encoding_length_is_config_function(length, seed):
    stack = L.ConvPoolStack.init(3, [4, 5], [3, 2], [2, 2], Rng(0))
    x = Rng(seed).gen.normal(size=(length, 3))
    assert L.encode_text(stack, x).shape == (stack.output_length(length),)


def test_concat_conditions():
    assert L.concat_conditions([], [1.0, 2.0]).tolist() == [1.0, 2.0]
    assert L.concat_conditions([0.5], [1.0, 2.0]).tolist() == [0.5, 1.0, 2.0]


@given(st.lists(st.floats(-1e3, 1e3), max_size=10), st.lists(st.floats(-1e3, 1e3), max_size=10))
def test_concat_length(a, b):
    assert len(L.concat_conditions(a, b)) == len(a) + len(b)


def test_dense_identity_relu():
    stack = L.DenseStack([np.eye(2)], [np.zeros(2)], 0.0)
    assert L.dense_forward(stack, [1.0, -1.0]).tolist() == [1.0, 0.0]


def test_dense_train_equals_inference_without_dropout():
    stack = L.DenseStack.init([4, 5, 2], Rng(0), dropout_rate=0.0)
    x = np.arange(4.0)
    assert np.array_equal(L.dense_forward(stack, x, "train", Rng(3)), L.dense_forward(stack, x))


def test_dense_dropout_deterministic_given_seed():
    stack = L.DenseStack.init([6, 8, 3], Rng(0), dropout_rate=0.5)
    x = np.linspace(-1, 1, 6)
    a = L.dense_forward(stack, x, "train", Rng(4))
    b = L.dense_forward(stack, x, "train", Rng(4))
    assert np.array_equal(a, b)


def test_dense_shape_errors():
    with pytest.raises(ShapeError):
        L.DenseStack([np.ones((3, 2)), np.ones((1, 4))], [np.zeros(3), np.zeros(1)])
    stack = L.DenseStack.init([3, 2], Rng(0))
    with pytest.raises(ShapeError):
        L.dense_forward(stack, [1.0, 2.0])


def test_dropout_rate_bounds():
    with pytest.raises(ValueError):
        L.DenseStack.init([2, 2], Rng(0), dropout_rate=1.0)


def test_composed_layer_gradients():
    """embedding -> conv/pool -> dense, checked against central differences."""
    rng = Rng(10)
    emb = L.EmbeddingTable.init(12, 3, rng.split(0))
    emb.weights[1:] *= 4.0
    conv = L.ConvPoolStack.init(3, [3, 2], [2, 2], [2, 1], rng.split(1))
    for layer in conv.layers:
        layer.weights *= 3.0
        layer.bias += 0.05  # keep padded windows off the ReLU kink at exactly zero
    tokens = np.array([[4, 2, 9, 0, 0, 0, 0, 0, 0], [1, 11, 3, 3, 7, 5, 8, 2, 0]])
    n_feat = conv.output_length(tokens.shape[1])
    dense = L.DenseStack.init([n_feat, 4, 1], rng.split(2), dropout_rate=0.3, final_activation="linear")
    for b in dense.biases:
        b += 0.05
    target = np.array([0.3, -0.4])

    def run():
        e, ce = L.embedding_forward(emb, tokens)
        t, ct = L.conv_stack_forward(conv, e)
        out, cd = L.dense_stack_forward(dense, t, Rng(8))
        return out[:, 0], (ce, ct, cd)

    def loss():
        return float(np.sum((run()[0] - target) ** 2))

    pred, (ce, ct, cd) = run()
    d_t, g_dense = L.dense_stack_backward(dense, 2 * (pred - target)[:, None], cd)
    d_e, g_conv = L.conv_stack_backward(conv, d_t, ct)
    g_emb = L.embedding_backward(emb, d_e, ce)

    params = {**{"emb." + k: v for k, v in emb.params().items()}}
    params.update({"conv." + k: v for k, v in conv.params().items()})
    params.update({"dense." + k: v for k, v in dense.params().items()})
    grads = {"emb.weights": g_emb["weights"]}
    grads.update({"conv." + k: v for k, v in g_conv.items()})
    grads.update({"dense." + k: v for k, v in g_dense.items()})
    errs = gradient_errors(params, loss, grads)
    bad = {k: v for k, v in errs.items() if v >= 1e-5}
    assert not bad, bad
