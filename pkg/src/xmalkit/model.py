"""Attention-weighted MLP malware classifier and key-feature extraction.

The attention layer is a bias-free N x N dense map ``e = A x`` followed by a
softmax. The softmax weights scale the input bits elementwise and the MLP maps
the weighted vector to a single malicious-class logit.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from . import nn
from .dataset import FeatureDictionary, Sample, as_matrix, labels_of
from .nn import AdamState, ContractError, DenseLayer, TrainConfig

DEFAULT_HIDDEN = (64, 16)
DEFAULT_TOP_N = 6
ACTIVATIONS = ("relu", "tanh")

MODEL_MAGIC = b"XMALMDL\x00"
MODEL_VERSION = 1


class TrainingError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class DictionaryMismatch(ValueError):
    """A model (or database) was built against a different feature dictionary."""


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


@dataclass(frozen=True)
class AttentionOutput:
    scores: np.ndarray
    weights: np.ndarray
    weighted_features: np.ndarray
    probability: float
    label: int


@dataclass(frozen=True)
class KeyFeature:
    name: str
    index: int
    weight: float


@dataclass(frozen=True)
class KeyFeatureList:
    entries: tuple[KeyFeature, ...]
    n: int

    @property
    def names(self) -> list[str]:
        return [k.name for k in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def rank_present(values: np.ndarray, x: np.ndarray, dictionary: FeatureDictionary, n: int) -> KeyFeatureList:
    """Present features (bit = 1) sorted by ``values`` descending, index ascending on ties."""
    if n < 1:
        raise ContractError("n must be >= 1")
    active = np.flatnonzero(np.asarray(x))
    order = sorted(active, key=lambda j: (-values[j], j))[:n]
    return KeyFeatureList(tuple(KeyFeature(dictionary.names[j], int(j), float(values[j])) for j in order), n)


@dataclass
class AttentionModel:
    attention: np.ndarray  # (N, N): scores = attention @ x
    mlp: list[DenseLayer]
    dictionary: FeatureDictionary
    train_config: TrainConfig = field(default_factory=TrainConfig)
    activation: str = "relu"
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.dictionary)
        self.attention = np.asarray(self.attention, dtype=np.float64)
        if self.attention.shape != (n, n):
            raise ContractError(f"attention must be {n}x{n}, got {self.attention.shape}")
        if not self.mlp or self.mlp[0].in_dim != n or self.mlp[-1].out_dim != 1:
            raise ContractError("MLP must map N inputs to a single logit")
        for a, b in zip(self.mlp, self.mlp[1:]):
            if a.out_dim != b.in_dim:
                raise ContractError("MLP layer dimensions do not chain")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @classmethod
    def initialise(cls, dictionary: FeatureDictionary, rng: np.random.Generator,
                   hidden: Sequence[int] = DEFAULT_HIDDEN, activation: str = "relu",
                   train_config: TrainConfig | None = None) -> "AttentionModel":
        n = len(dictionary)
        attention = nn.glorot_layer(n, n, rng).weights
        dims = [n, *hidden, 1]
        mlp = [nn.glorot_layer(a, b, rng) for a, b in zip(dims, dims[1:])]
        return cls(attention, mlp, dictionary, train_config or TrainConfig(), activation)

    @property
    def n_features(self) -> int:
        return len(self.dictionary)

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(layer.out_dim for layer in self.mlp[:-1])

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in a fixed order: attention, then (W, b) per layer."""
        out = [self.attention]
        for layer in self.mlp:
            out += [layer.weights, layer.bias]
        return out

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features:
            raise ContractError(f"sample has {X.shape[-1]} features, model expects {self.n_features}")
        return X

    def _forward_batch(self, X):
        scores = X @ self.attention.T
        alpha = nn.softmax(scores, axis=1)
        c = alpha * X
        pre, post = [], [c]
        h = c
        for k, layer in enumerate(self.mlp):
            z = nn.dense_forward(layer, h)
            pre.append(z)
            h = z if k == len(self.mlp) - 1 else _activate(z, self.activation)
            post.append(h)
        return scores, alpha, c, pre, post

    def logits(self, X) -> np.ndarray:
        X = self._check(np.atleast_2d(X))
        return self._forward_batch(X)[4][-1][:, 0]

    def predict_proba(self, X) -> np.ndarray:
        return nn.sigmoid(self.logits(X))

    def loss_and_grad(self, X, y) -> tuple[float, list[np.ndarray]]:
        """Mean BCE over the batch and its gradient for every parameter()."""
        X = self._check(np.atleast_2d(X))
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        b = X.shape[0]
        scores, alpha, c, pre, post = self._forward_batch(X)
        losses, dz = nn.sigmoid_bce_loss(pre[-1][:, 0], y)
        loss = float(np.mean(losses))
        delta = (dz / b)[:, None]
        layer_grads = []
        for k in range(len(self.mlp) - 1, -1, -1):
            layer = self.mlp[k]
            if k < len(self.mlp) - 1:
                delta = delta * _activate_grad(pre[k], post[k + 1], self.activation)
            layer_grads.append((delta.T @ post[k], delta.sum(axis=0)))
            delta = delta @ layer.weights
        d_alpha = delta * X
        d_scores = alpha * (d_alpha - np.sum(d_alpha * alpha, axis=1, keepdims=True))
        grads = [d_scores.T @ X]
        for gw, gb in reversed(layer_grads):
            grads += [gw, gb]
        return loss, grads


def forward(model: AttentionModel, sample: Sample | np.ndarray) -> AttentionOutput:
    x = sample.features if isinstance(sample, Sample) else sample
    x = model._check(np.asarray(x, dtype=np.float64))
    if x.ndim != 1:
        raise ContractError("forward takes a single sample")
    scores, alpha, c, _, post = model._forward_batch(x[None, :])
    p = float(nn.sigmoid(post[-1][0, 0]))
    return AttentionOutput(scores[0], alpha[0], c[0], p, int(p > 0.5))


def predict(model: AttentionModel, sample: Sample | np.ndarray) -> tuple[int, float]:
    """``(label, probability)``; a probability of exactly 0.5 is benign."""
    out = forward(model, sample)
    return out.label, out.probability


def key_features(model: AttentionModel, sample: Sample | np.ndarray, n: int = DEFAULT_TOP_N) -> KeyFeatureList:
    out = forward(model, sample)
    x = sample.features if isinstance(sample, Sample) else sample
    return rank_present(out.weights, x, model.dictionary, n)


def train(train_set: Sequence[Sample], dictionary: FeatureDictionary, config: TrainConfig | None = None,
          hidden: Sequence[int] = DEFAULT_HIDDEN, activation: str = "relu") -> AttentionModel:
    """Fit the attention MLP with mini-batch BCE.

    Per-epoch shuffles come from ``config.seed``; the trailing partial batch is
    used. The returned model carries the mean training loss of each epoch in
    ``loss_trace``.
    """
    config = config or TrainConfig()
    if not train_set:
        raise TrainingError("training set is empty")
    X = as_matrix(train_set)
    y = labels_of(train_set)
    if X.shape[1] != len(dictionary):
        raise TrainingError("samples do not match the dictionary size")
    if len(np.unique(y)) < 2:
        raise TrainingError(f"training set holds a single class ({int(y[0])}); both labels are required")
    rng = np.random.default_rng(config.seed)
    model = AttentionModel.initialise(dictionary, rng, hidden, activation, config)
    params = model.parameters()
    state = AdamState.zeros_like(params)
    m = X.shape[0]
    for _ in range(config.epochs):
        perm = rng.permutation(m)
        total = 0.0
        for start in range(0, m, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grads = model.loss_and_grad(X[idx], y[idx])
            total += loss * len(idx)
            if config.optimizer == "adam":
                nn.adam_step(params, grads, state, config.learning_rate)
            else:
                nn.sgd_step(params, grads, config.learning_rate)
        model.loss_trace.append(total / m)
    return model


def grid_search(train_set: Sequence[Sample], valid_set: Sequence[Sample], dictionary: FeatureDictionary,
                grid: dict[str, Sequence], seed: int = 0) -> list[dict]:
    """Train one model per grid point and report validation accuracy.

    ``grid`` keys: any of learning_rate, optimizer, epochs, batch_size,
    activation. Rows come back best-first (ties keep grid order).
    """
    import itertools

    keys = list(grid)
    Xv = as_matrix(valid_set)
    yv = labels_of(valid_set)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        activation = point.pop("activation", "relu")
        cfg = TrainConfig(seed=seed, **point)
        model = train(train_set, dictionary, cfg, activation=activation)
        acc = float(np.mean((model.predict_proba(Xv) > 0.5).astype(int) == yv))
        rows.append({**point, "activation": activation, "accuracy": acc})
    return sorted(rows, key=lambda r: -r["accuracy"])


# --- persistence -----------------------------------------------------------

def _array_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_model(model: AttentionModel, fh: BinaryIO) -> None:
    """Versioned little-endian binary dump with the dictionary embedded.

    Layout: magic, u32 version, u32 header length, UTF-8 JSON header, then the
    float64 arrays of ``parameters()`` back to back.
    """
    header = {
        "dictionary_hash": model.dictionary.hash,
        "dictionary": [list(p) for p in zip(model.dictionary.names, model.dictionary.kinds)],
        "hidden": list(model.hidden),
        "activation": model.activation,
        "train_config": asdict(model.train_config),
        "loss_trace": [float(v) for v in model.loss_trace],
        "shapes": [list(p.shape) for p in model.parameters()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(MODEL_MAGIC)
    fh.write(struct.pack("<II", MODEL_VERSION, len(blob)))
    fh.write(blob)
    for p in model.parameters():
        fh.write(_array_bytes(p))


def load_model(fh: BinaryIO, dictionary: FeatureDictionary | None = None) -> AttentionModel:
    """Read a model; if ``dictionary`` is given its hash must match the embedded one."""
    if fh.read(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise ModelFormatError("not an xmalkit model file")
    try:
        version, n = struct.unpack("<II", fh.read(8))
    except struct.error as exc:
        raise ModelFormatError("truncated model header") from exc
    if version != MODEL_VERSION:
        raise ModelVersionError(f"unsupported model version {version}")
    header = json.loads(fh.read(n).decode("utf-8"))
    names, kinds = zip(*header["dictionary"])
    embedded = FeatureDictionary(tuple(names), tuple(kinds))
    if embedded.hash != header["dictionary_hash"]:
        raise ModelFormatError("embedded dictionary is corrupt")
    if dictionary is not None and dictionary.hash != header["dictionary_hash"]:
        raise DictionaryMismatch(
            f"model was trained on dictionary {header['dictionary_hash'][:12]}, "
            f"active dictionary is {dictionary.hash[:12]}"
        )
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise ModelFormatError("truncated parameter block")
        arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
    attention, rest = arrays[0], arrays[1:]
    mlp = [DenseLayer(rest[i], rest[i + 1]) for i in range(0, len(rest), 2)]
    return AttentionModel(attention, mlp, embedded, TrainConfig(**header["train_config"]),
                          header["activation"], list(header["loss_trace"]))


def model_digest(model: AttentionModel) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(_array_bytes(p))
    return h.hexdigest()
