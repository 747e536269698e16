import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_bits, sample, signature_corpus, small_dictionary
from xmalkit import baselines as B
from xmalkit.dataset import Sample, SplitSpec, as_matrix, labels_of, split
from xmalkit.model import DictionaryMismatch, TrainingError
from xmalkit.nn import ContractError, TrainConfig
from xmalkit.model import train
from xmalkit.synthetic import planted_family_corpus


@pytest.fixture(scope="module")
def corpus(dictionary):
    return signature_corpus(dictionary, 600, seed=3)


@pytest.fixture(scope="module")
def svm(corpus, dictionary):
    return B.train_svm(corpus.samples, dictionary)


def test_svm_separable_training_accuracy(svm, corpus):
    acc = np.mean(svm.predict(as_matrix(corpus.samples)) == labels_of(corpus.samples))
    assert acc >= 0.99


def test_svm_decision_matches_brute_force(svm, corpus):
    for s in corpus.samples[:100]:
        margin = sum(w * x for w, x in zip(svm.weights, s.features)) + svm.bias
        assert svm.predict(s.features)[0] == int(margin > 0)


def test_svm_deterministic(corpus, dictionary):
    a = B.train_svm(corpus.samples, dictionary, B.SvmConfig(seed=5))
    b = B.train_svm(corpus.samples, dictionary, B.SvmConfig(seed=5))
    assert a.dump() == b.dump()


def test_svm_norm_shrinks_with_lambda(corpus, dictionary):
    norms = [np.linalg.norm(B.train_svm(corpus.samples, dictionary, B.SvmConfig(regularization=lam)).weights)
             for lam in (1e-3, 1e-2, 1e-1, 1.0, 10.0)]
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.1


def test_svm_single_class_refused(dictionary):
    only = [Sample("a", np.zeros(158, dtype=np.uint8), 0), Sample("b", np.ones(158, dtype=np.uint8), 0)]
    with pytest.raises(TrainingError):
        B.train_svm(only, dictionary)


def test_svm_dump_load(svm, dictionary):
    back = B.LinearSvmModel.load(io.StringIO(svm.dump()), dictionary)
    assert np.array_equal(back.weights, svm.weights) and back.bias == svm.bias
    with pytest.raises(DictionaryMismatch):
        B.LinearSvmModel.load(io.StringIO(svm.dump()), dictionary.permuted(list(range(158))[::-1]))


def test_svm_equal_weights_use_dictionary_order():
    d = small_dictionary(8)
    m = B.LinearSvmModel(np.ones(8), 0.0, d)
    keys = B.svm_key_features(m, Sample("a", np.array([0, 1, 1, 0, 1, 1, 1, 1], dtype=np.uint8)), 3)
    assert [k.index for k in keys] == [1, 2, 4]


def test_svm_presence_filter():
    d = small_dictionary(5)
    m = B.LinearSvmModel(np.array([9.0, 1, 2, 3, 4]), 0.0, d)
    keys = B.svm_key_features(m, Sample("a", np.array([0, 1, 1, 1, 1], dtype=np.uint8)), 6)
    assert "f000" not in keys.names and keys.names[0] == "f004"


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 8))
def test_svm_keys_always_present(seed, n):
    rng = np.random.default_rng(seed)
    d = small_dictionary(12)
    m = B.LinearSvmModel(rng.normal(size=12), 0.0, d)
    x = random_bits(rng, 12)
    keys = B.svm_key_features(m, Sample("s", x), n)
    assert all(x[k.index] for k in keys) and len(keys) == min(n, int(x.sum()))


def test_svm_same_top_features_across_samples(svm, corpus):
    mal = [s for s in corpus.samples if s.label == 1]
    tops = {tuple(B.svm_key_features(svm, s, 3).names) for s in mal}
    assert len(tops) == 1  # every malicious sample carries the whole signature


# surrogate

def test_surrogate_config_validation():
    with pytest.raises(ContractError):
        B.SurrogateConfig(num_perturbations=0)
    with pytest.raises(ContractError):
        B.SurrogateConfig(kernel_width=0)
    with pytest.raises(ContractError):
        B.SurrogateConfig(ridge_lambda=-1)


def test_perturb_first_row_and_distances():
    x = np.array([1, 0, 1, 0, 0, 1], dtype=np.uint8)
    Z = B.perturb(x, B.SurrogateConfig(num_perturbations=200, seed=1))
    assert np.array_equal(Z[0], x)
    dist = (Z[1:] != x).sum(axis=1)
    assert dist.min() >= 1 and dist.max() <= 6
    full = B.perturb(x, B.SurrogateConfig(exhaustive=True))
    assert full.shape == (64, 6) and len({r.tobytes() for r in full}) == 64


def test_proximity_kernel():
    x = np.zeros(4, dtype=np.uint8)
    Z = np.array([[0, 0, 0, 0], [1, 0, 0, 0], [1, 1, 0, 0]], dtype=np.uint8)
    np.testing.assert_allclose(B.proximity(x, Z, 2.0), np.exp(-np.array([0, 1, 4]) / 4.0))
    assert B.proximity(x, Z, float("inf")).tolist() == [1, 1, 1]


def test_indicator_black_box():
    d = small_dictionary(10)
    target = 4

    def box(Z):
        return Z[:, target].astype(float)

    s = Sample("a", np.ones(10, dtype=np.uint8))
    coef = B.surrogate_coefficients(box, s, B.SurrogateConfig(num_perturbations=500, seed=2))
    assert np.argmax(coef) == target
    assert coef[target] == pytest.approx(1.0, abs=1e-2)
    assert np.all(np.abs(np.delete(coef, target)) < 1e-2)
    assert B.surrogate_explain(box, s, d, B.SurrogateConfig(num_perturbations=500, seed=2), 1).names == ["f004"]


def test_surrogate_default_n_is_six():
    d = small_dictionary(10)
    keys = B.surrogate_explain(lambda Z: Z.mean(axis=1), Sample("a", np.ones(10, dtype=np.uint8)), d,
                               B.SurrogateConfig(num_perturbations=50))
    assert keys.n == 6 and len(keys) == 6


def test_surrogate_deterministic():
    rng = np.random.default_rng(0)
    w = rng.normal(size=9)

    def box(Z):
        return 1 / (1 + np.exp(-(Z @ w)))

    x = random_bits(rng, 9, 0.5)
    cfg = B.SurrogateConfig(num_perturbations=300, seed=4)
    assert np.array_equal(B.surrogate_coefficients(box, x, cfg), B.surrogate_coefficients(box, x, cfg))


def test_duplicate_rows_keep_ranking():
    rng = np.random.default_rng(1)
    w = rng.normal(size=8)
    x = random_bits(rng, 8, 0.5)
    Z = B.perturb(x, B.SurrogateConfig(num_perturbations=200, seed=3))
    target = 1 / (1 + np.exp(-(Z @ w)))
    prox = B.proximity(x, Z, 3.0)
    coef, _ = B.fit_surrogate(Z, target, prox, 1e-3)
    Z2, t2, p2 = np.vstack([Z, Z[:50]]), np.concatenate([target, target[:50]]), np.concatenate([prox, prox[:50]])
    coef2, _ = B.fit_surrogate(Z2, t2, p2, 1e-3)
    assert np.array_equal(np.argsort(-coef, kind="stable"), np.argsort(-coef2, kind="stable"))
    # duplicating every row is the same as doubling the weights
    coef3, _ = B.fit_surrogate(np.vstack([Z, Z]), np.concatenate([target] * 2), np.concatenate([prox] * 2), 2e-3)
    np.testing.assert_allclose(coef3, coef, rtol=1e-9, atol=1e-12)


def test_degenerate_design_warns():
    Z = np.ones((5, 3))
    with pytest.warns(RuntimeWarning, match="ridge floor"):
        coef, _ = B.fit_surrogate(Z, np.linspace(0, 1, 5), np.ones(5), 0.0)
    assert np.all(np.isfinite(coef))


def test_surrogate_rejects_bad_black_box():
    with pytest.raises(ContractError):
        B.surrogate_coefficients(lambda Z: np.full(len(Z), 2.0), np.ones(3, dtype=np.uint8),
                                 B.SurrogateConfig(num_perturbations=10))


# comparison

@pytest.fixture(scope="module")
def comparison(dictionary):
    pc = planted_family_corpus(dictionary, 1200, n_families=1, seed=2, semantic_fraction=0.17)
    tr, te = split(pc.samples, SplitSpec(0.7, 2, stratified=True))
    model = train(tr, dictionary, TrainConfig(seed=2))
    svm = B.train_svm(tr, dictionary, B.SvmConfig(seed=2))
    ev = [s for s in te if s.id in pc.truths][:60]
    exps = B.default_explainers(model, svm, B.SurrogateConfig(num_perturbations=300))
    return pc, ev, B.compare_explainers(exps, ev, pc.truths, pc.db, pc.synonyms, dictionary, 6, pc.family)


def test_comparison_shapes(comparison, dictionary):
    pc, ev, report = comparison
    assert report.methods == ["attention", "surrogate", "svm"]
    assert len(report.rows) == 3 * len(ev)
    assert report.frequency.shape == (3, 158)
    assert len(report.summary_rows()) == 3
    assert report.summary_csv().count("\n") == 4
    assert report.frequency_csv().splitlines()[0].split(",")[1:] == list(dictionary.names)
    assert set(report.family_table()["svm"]) == {"family0"}


def test_frequency_row_sums(comparison):
    pc, ev, report = comparison
    expected = sum(min(6, int(s.features.sum())) for s in ev)
    assert report.frequency.sum(axis=1).tolist() == [expected] * 3


def test_svm_shared_overlap_is_total(comparison):
    _, _, report = comparison
    assert report.shared_overlap("svm") == 1.0
    assert report.shared_overlap("attention") < 1.0


def test_single_sample_report(comparison, dictionary):
    pc, ev, _ = comparison
    exps = {"svm": B.svm_explainer(B.LinearSvmModel(np.ones(158), 0.0, dictionary))}
    report = B.compare_explainers(exps, ev[:1], pc.truths, pc.db, pc.synonyms, dictionary)
    assert len(report.summary_rows()) == 1 and len(report.rows) == 1


def test_empty_evaluation_set(comparison, dictionary):
    pc, _, _ = comparison
    with pytest.raises(ContractError):
        B.compare_explainers({}, [], pc.truths, pc.db, pc.synonyms, dictionary)


def test_overlap_measures():
    assert B.mean_pairwise_overlap([["a", "b"], ["a", "b"]]) == 1.0
    assert B.mean_pairwise_overlap([["a"], ["b"]]) == 0.0
    # same ranking on the shared features, different private ones
    assert B.shared_top_overlap([[0, 1, 5], [0, 1, 7]], 2) == 1.0
    assert B.shared_top_overlap([[0, 1, 2], [2, 1, 0]], 1) == 0.0
