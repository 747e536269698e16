import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_bits, random_model, sample, signature_corpus, small_dictionary
from xmalkit import model as M
from xmalkit.dataset import Sample, SplitSpec, as_matrix, labels_of, split
from xmalkit.nn import ContractError, DenseLayer, TrainConfig, dense_forward, grad_check, sigmoid, softmax


SIGNATURE = ("SEND_SMS", "READ_PHONE_STATE", "RECEIVE_BOOT_COMPLETED")


@pytest.fixture(scope="module")
def trained(dictionary):
    corpus = signature_corpus(dictionary, 1000, seed=0)
    train_set, test_set = split(corpus.samples, SplitSpec(0.7, 0, stratified=True))
    return M.train(train_set, dictionary, TrainConfig(seed=0)), train_set, test_set


def test_zero_attention_is_uniform():
    d = small_dictionary(8)
    m = random_model(d, np.random.default_rng(0))
    m.attention[:] = 0
    out = M.forward(m, np.ones(8))
    np.testing.assert_allclose(out.weights, 1 / 8, atol=1e-15)


def test_zero_sample_has_zero_weighted_features():
    d = small_dictionary(8)
    out = M.forward(random_model(d, np.random.default_rng(1)), np.zeros(8))
    assert np.all(out.weighted_features == 0)


def test_forward_matches_composed_oracle():
    rng = np.random.default_rng(2)
    d = small_dictionary(7)
    m = random_model(d, rng, hidden=(6, 4))
    x = random_bits(rng, 7).astype(float)
    scores = dense_forward(DenseLayer(m.attention, np.zeros(7)), x)
    alpha = softmax(scores)
    h = alpha * x
    h = np.maximum(dense_forward(m.mlp[0], h), 0)
    h = np.maximum(dense_forward(m.mlp[1], h), 0)
    logit = dense_forward(m.mlp[2], h)[0]
    out = M.forward(m, x)
    np.testing.assert_allclose(out.scores, scores, rtol=1e-13)
    np.testing.assert_allclose(out.weights, alpha, rtol=1e-13)
    assert out.probability == pytest.approx(float(sigmoid(logit)), rel=1e-13)
    assert out.label == int(out.probability > 0.5)


def test_forward_dimension_mismatch():
    d = small_dictionary(5)
    with pytest.raises(ContractError):
        M.forward(random_model(d, np.random.default_rng(0)), np.ones(4))


def test_probability_exactly_half_is_benign():
    d = small_dictionary(4)
    m = random_model(d, np.random.default_rng(0))
    m.mlp[-1] = DenseLayer(np.zeros((1, m.mlp[-1].in_dim)), np.zeros(1))
    label, p = M.predict(m, np.ones(4))
    assert p == 0.5 and label == 0


def test_model_shape_validation():
    d = small_dictionary(4)
    with pytest.raises(ContractError):
        M.AttentionModel(np.zeros((3, 3)), [DenseLayer(np.zeros((1, 4)), np.zeros(1))], d)
    with pytest.raises(ContractError):
        M.AttentionModel(np.zeros((4, 4)), [DenseLayer(np.zeros((2, 4)), np.zeros(2))], d)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10_000), st.sampled_from(["relu", "tanh"]))
def test_gradients_match_finite_differences(n, seed, activation):
    rng = np.random.default_rng(seed)
    d = small_dictionary(n)
    hidden = tuple(int(h) for h in rng.integers(2, 7, size=2))
    m = random_model(d, rng, hidden, activation)
    X = random_bits(rng, n, 0.5, size=3).astype(float)
    y = rng.integers(0, 2, 3)

    def f(params):
        probe = M.AttentionModel(params[0], [DenseLayer(params[i], params[i + 1])
                                             for i in range(1, len(params), 2)], d, activation=activation)
        return probe.loss_and_grad(X, y)

    assert grad_check(f, m.parameters()) < 1e-4


def test_key_features_single_active(dictionary):
    m = random_model(dictionary, np.random.default_rng(0), hidden=(4,))
    keys = M.key_features(m, sample(dictionary, "a", ["SEND_SMS"]))
    assert keys.names == ["SEND_SMS"] and keys.n == M.DEFAULT_TOP_N == 6


def test_key_features_empty_sample(dictionary):
    m = random_model(dictionary, np.random.default_rng(0), hidden=(4,))
    assert len(M.key_features(m, np.zeros(len(dictionary)))) == 0


def test_key_feature_ties_follow_dictionary_order():
    d = small_dictionary(6)
    m = random_model(d, np.random.default_rng(0))
    m.attention[:] = 0
    keys = M.key_features(m, np.array([0, 1, 1, 0, 1, 1]), n=3)
    assert [k.index for k in keys] == [1, 2, 4]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 12))
def test_key_features_present_sorted_capped(seed, n):
    rng = np.random.default_rng(seed)
    d = small_dictionary(15)
    m = random_model(d, rng)
    x = random_bits(rng, 15, rng.random())
    keys = M.key_features(m, x, n)
    w = [k.weight for k in keys]
    assert len(keys) == min(n, int(x.sum()))
    assert all(x[k.index] == 1 for k in keys)
    assert w == sorted(w, reverse=True)


def test_permutation_equivariance():
    rng = np.random.default_rng(7)
    d = small_dictionary(9)
    m = random_model(d, rng)
    perm = rng.permutation(9)
    mlp = [DenseLayer(m.mlp[0].weights[:, perm], m.mlp[0].bias)] + m.mlp[1:]
    pm = M.AttentionModel(m.attention[np.ix_(perm, perm)], mlp, d.permuted(perm))
    for _ in range(20):
        x = random_bits(rng, 9)
        a, b = M.forward(m, x), M.forward(pm, x[perm])
        np.testing.assert_allclose(b.weights, a.weights[perm], atol=1e-12)
        assert abs(a.probability - b.probability) <= 1e-9


def test_inference_is_stateless(trained):
    m, _, test_set = trained
    s = test_set[0]
    before = M.key_features(m, s)
    for _ in range(3):
        M.key_features(m, s)
        M.forward(m, test_set[1])
    assert M.key_features(m, s) == before


def test_training_separable_corpus(trained):
    m, train_set, test_set = trained
    acc = np.mean((m.predict_proba(as_matrix(train_set)) > 0.5) == labels_of(train_set))
    assert acc >= 0.99
    assert len(m.loss_trace) == 10
    assert m.loss_trace[-1] < m.loss_trace[0]


def test_planted_malicious_sample_predicted(trained, dictionary):
    m, _, test_set = trained
    mal = next(s for s in test_set if s.label == 1)
    assert M.predict(m, mal)[0] == 1


def test_all_zero_vector_probability(trained, dictionary):
    m, _, _ = trained
    label, p = M.predict(m, np.zeros(len(dictionary)))
    assert 0 <= p <= 1 and label == 0  # the signature is absent


def test_training_deterministic(dictionary):
    corpus = signature_corpus(dictionary, 200, seed=4)
    cfg = TrainConfig(epochs=2, seed=9)
    a = M.train(corpus.samples, dictionary, cfg)
    b = M.train(corpus.samples, dictionary, cfg)
    assert M.model_digest(a) == M.model_digest(b)
    assert a.loss_trace == b.loss_trace
    c = M.train(corpus.samples, dictionary, TrainConfig(epochs=2, seed=10))
    assert M.model_digest(c) != M.model_digest(a)


def test_training_refuses_single_class(dictionary):
    only = [Sample("a", np.zeros(158, dtype=np.uint8), 1), Sample("b", np.ones(158, dtype=np.uint8), 1)]
    with pytest.raises(M.TrainingError):
        M.train(only, dictionary)


def test_sgd_and_tanh_train(dictionary):
    corpus = signature_corpus(dictionary, 200, seed=4)
    m = M.train(corpus.samples, dictionary, TrainConfig(epochs=2, optimizer="sgd", learning_rate=0.1),
                activation="tanh")
    assert m.activation == "tanh" and np.isfinite(m.loss_trace).all()


def test_grid_search_rows(dictionary):
    corpus = signature_corpus(dictionary, 300, seed=1)
    tr, va = split(corpus.samples, SplitSpec(0.7, 0))
    rows = M.grid_search(tr, va, dictionary, {"learning_rate": [0.001, 0.01], "epochs": [1]})
    assert len(rows) == 2
    assert rows[0]["accuracy"] >= rows[1]["accuracy"]


def test_save_load_round_trip(trained, dictionary):
    m, _, test_set = trained
    buf = io.BytesIO()
    M.save_model(m, buf)
    raw = buf.getvalue()
    assert raw.startswith(M.MODEL_MAGIC)
    assert struct.unpack("<I", raw[8:12])[0] == M.MODEL_VERSION
    back = M.load_model(io.BytesIO(raw), dictionary)
    assert M.model_digest(back) == M.model_digest(m)
    assert back.loss_trace == m.loss_trace
    X = as_matrix(test_set[:20])
    assert np.array_equal(back.predict_proba(X), m.predict_proba(X))
    again = io.BytesIO()
    M.save_model(back, again)
    assert again.getvalue() == raw


def test_load_rejects_other_dictionary(trained, dictionary):
    m, _, _ = trained
    buf = io.BytesIO()
    M.save_model(m, buf)
    other = dictionary.permuted(list(range(158))[::-1])
    with pytest.raises(M.DictionaryMismatch):
        M.load_model(io.BytesIO(buf.getvalue()), other)


def test_load_rejects_bad_files(trained):
    m, _, _ = trained
    buf = io.BytesIO()
    M.save_model(m, buf)
    raw = buf.getvalue()
    with pytest.raises(M.ModelFormatError):
        M.load_model(io.BytesIO(b"junk" + raw))
    with pytest.raises(M.ModelVersionError):
        M.load_model(io.BytesIO(raw[:8] + struct.pack("<I", 99) + raw[12:]))
    with pytest.raises(M.ModelFormatError):
        M.load_model(io.BytesIO(raw[:-16]))
