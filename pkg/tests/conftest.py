import numpy as np
import pytest

from condlstm import models as M
from condlstm.data import Vocab, generate_synthetic
from condlstm.numcore import Rng

TOY_ARCH = M.ArchConfig(
    vocab_size=20,
    embed_dim=3,
    max_post_len=8,
    conv_filters=(2,),
    conv_windows=(2,),
    conv_pools=(2,),
    lstm_units=(4, 3),
    head_units=(3,),
    pre_dense_units=(3,),
    nn_units=(4, 3),
    dropout=0.2,
    final_activation="linear",
)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(60, seed=11)


@pytest.fixture(scope="session")
def toy_cases(small_corpus):
    return small_corpus[:3]


def toy_model(variant, cases, arch=TOY_ARCH, seed=1):
    vocab = Vocab.build([c.post_text for c in cases], max_size=arch.vocab_size)
    norm = M.Normalizer.fit(cases)
    return M.build_model(variant, arch, Rng(seed), norm, vocab)


def model_gradient_errors(model, cases, n_days=5, dropout_seed=9):
    from condlstm.numcore import gradient_errors

    batch = model.encode(cases, n_days if model.variant.is_recurrent else None)
    y = np.array([c.total_donations for c in cases]) / model.normalizer.target_scale

    def loss():
        p, _ = M.forward(model, batch, Rng(dropout_seed))
        return float(np.mean((p - y) ** 2))

    p, cache = M.forward(model, batch, Rng(dropout_seed))
    grads = M.backward(model, 2.0 * (p - y) / len(y), cache)
    return gradient_errors(model.params(), loss, grads)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
