"""Builders shared by the test modules."""
import numpy as np

from xmalkit.dataset import FeatureDictionary, PlantedRule, Sample, generate_synthetic
from xmalkit.model import AttentionModel
from xmalkit.nn import DenseLayer, TrainConfig


def small_dictionary(n, n_api=None):
    n_api = n // 2 if n_api is None else n_api
    names = tuple(f"f{j:03d}" for j in range(n))
    kinds = tuple("api_call" if j < n_api else "permission" for j in range(n))
    return FeatureDictionary(names, kinds)


def random_model(dictionary, rng, hidden=(5, 3), activation="relu", scale=0.5):
    """Model with every parameter, biases included, drawn from N(0, scale).

    Non-zero biases keep ReLU pre-activations away from the kink so central
    differences stay valid.
    """
    n = len(dictionary)
    dims = [n, *hidden, 1]
    mlp = [DenseLayer(rng.normal(0, scale, (b, a)), rng.normal(0, scale, b)) for a, b in zip(dims, dims[1:])]
    return AttentionModel(rng.normal(0, scale, (n, n)), mlp, dictionary, TrainConfig(), activation)


def random_bits(rng, n, density=0.4, size=None):
    shape = (n,) if size is None else (size, n)
    return (rng.random(shape) < density).astype(np.uint8)


def signature_corpus(dictionary, n_samples=1000, noise=0.05, seed=0,
                     signature=("SEND_SMS", "READ_PHONE_STATE", "RECEIVE_BOOT_COMPLETED")):
    rule = PlantedRule(1, tuple(signature), 1.0, "signature")
    return generate_synthetic(n_samples, dictionary, [rule], noise, seed)


def sample(dictionary, sid, names, label=None):
    x = np.zeros(len(dictionary), dtype=np.uint8)
    for name in names:
        x[dictionary.index[name]] = 1
    return Sample(sid, x, label)
