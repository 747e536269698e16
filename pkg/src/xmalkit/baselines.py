"""Comparison explainers: global linear-SVM weights and a local linear surrogate."""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np

from .dataset import FeatureDictionary, Sample, as_matrix, labels_of
from .evaluation import ConceptSet, Explainer, attention_explainer, score_sample
from .interpreter import SemanticDatabase
from .model import DEFAULT_TOP_N, AttentionModel, KeyFeatureList, TrainingError, rank_present
from .nn import ContractError

RIDGE_FLOOR = 1e-8


@dataclass(frozen=True)
class SvmConfig:
    regularization: float = 1e-3
    epochs: int = 20
    batch_size: int = 20
    seed: int = 0


@dataclass
class LinearSvmModel:
    weights: np.ndarray
    bias: float
    dictionary: FeatureDictionary
    config: SvmConfig = field(default_factory=SvmConfig)

    def decision(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=np.float64)) @ self.weights + self.bias

    def predict(self, X) -> np.ndarray:
        return (self.decision(X) > 0).astype(int)

    def dump(self) -> str:
        return json.dumps({
            "dictionary_hash": self.dictionary.hash,
            "config": asdict(self.config),
            "bias": float(self.bias).hex(),
            "weights": [float(w).hex() for w in self.weights],
        }, indent=1)

    @classmethod
    def load(cls, fh: TextIO, dictionary: FeatureDictionary) -> "LinearSvmModel":
        from .model import DictionaryMismatch

        raw = json.load(fh)
        if raw["dictionary_hash"] != dictionary.hash:
            raise DictionaryMismatch("SVM model was trained on a different dictionary")
        w = np.array([float.fromhex(v) for v in raw["weights"]])
        return cls(w, float.fromhex(raw["bias"]), dictionary, SvmConfig(**raw["config"]))


def train_svm(train_set: Sequence[Sample], dictionary: FeatureDictionary,
              config: SvmConfig | None = None) -> LinearSvmModel:
    """L2-regularised hinge loss by mini-batch subgradient descent (Pegasos steps).

    Step size at update t is ``1 / (lambda * t)``; the bias is not regularised.
    The returned weights are the average of the iterates over the last epoch.
    """
    config = config or SvmConfig()
    if config.regularization <= 0:
        raise ContractError("regularization must be > 0")
    X = as_matrix(train_set)
    y01 = labels_of(train_set)
    if len(np.unique(y01)) < 2:
        raise TrainingError("linear SVM needs both classes in the training set")
    y = 2.0 * y01 - 1.0
    rng = np.random.default_rng(config.seed)
    lam = config.regularization
    m, n = X.shape
    w = np.zeros(n)
    b = 0.0
    t = 0
    avg_w, avg_b, count = np.zeros(n), 0.0, 0
    for epoch in range(config.epochs):
        perm = rng.permutation(m)
        for start in range(0, m, config.batch_size):
            idx = perm[start:start + config.batch_size]
            t += 1
            eta = 1.0 / (lam * t)
            margin = y[idx] * (X[idx] @ w + b)
            viol = idx[margin < 1.0]
            w *= 1.0 - eta * lam
            if viol.size:
                w += (eta / idx.size) * (y[viol] @ X[viol])
                b += (eta / idx.size) * y[viol].sum()
            radius = 1.0 / math.sqrt(lam)
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
            if epoch == config.epochs - 1:
                avg_w += w
                avg_b += b
                count += 1
    return LinearSvmModel(avg_w / count, avg_b / count, dictionary, config)


def svm_key_features(model: LinearSvmModel, sample: Sample, n: int = DEFAULT_TOP_N) -> KeyFeatureList:
    """Present features ranked by their global weight toward the malicious class."""
    return rank_present(model.weights, sample.features, model.dictionary, n)


@dataclass(frozen=True)
class SurrogateConfig:
    num_perturbations: int = 1000
    kernel_width: float | None = None  # None: 0.75 * sqrt(N)
    ridge_lambda: float = 1e-3
    seed: int = 0
    exhaustive: bool = False  # enumerate all 2^N flip patterns instead of sampling

    def __post_init__(self):
        if self.num_perturbations < 1 and not self.exhaustive:
            raise ContractError("num_perturbations must be positive")
        if self.kernel_width is not None and not self.kernel_width > 0:
            raise ContractError("kernel_width must be > 0")
        if self.ridge_lambda < 0:
            raise ContractError("ridge_lambda must be >= 0")


def perturb(x: np.ndarray, cfg: SurrogateConfig) -> np.ndarray:
    """Bit-flip neighbours of ``x``; row 0 is ``x`` itself.

    Sampling draws a flip count uniformly from 1..N, then that many distinct
    positions, so neighbours of every distance appear.
    """
    x = np.asarray(x, dtype=np.uint8)
    n = x.size
    if cfg.exhaustive:
        if n > 20:
            raise ContractError(f"exhaustive perturbation of {n} features is too large")
        masks = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.uint8)
        return masks ^ x
    rng = np.random.default_rng(cfg.seed)
    rows = np.empty((cfg.num_perturbations, n), dtype=np.uint8)
    rows[0] = x
    for i in range(1, cfg.num_perturbations):
        k = int(rng.integers(1, n + 1))
        flip = rng.choice(n, size=k, replace=False)
        rows[i] = x
        rows[i, flip] ^= 1
    return rows


def proximity(x: np.ndarray, Z: np.ndarray, kernel_width: float) -> np.ndarray:
    d = np.sum(Z != np.asarray(x, dtype=Z.dtype), axis=1).astype(np.float64)
    if math.isinf(kernel_width):
        return np.ones_like(d)
    return np.exp(-(d ** 2) / kernel_width ** 2)


def fit_surrogate(Z: np.ndarray, target: np.ndarray, weights: np.ndarray,
                  ridge_lambda: float) -> tuple[np.ndarray, float]:
    """Weighted ridge regression with an unpenalised intercept; returns (coef, intercept)."""
    Z = np.asarray(Z, dtype=np.float64)
    sw = np.asarray(weights, dtype=np.float64)
    total = sw.sum()
    zm = sw @ Z / total
    tm = sw @ target / total
    Zc = Z - zm
    tc = target - tm
    gram = (Zc * sw[:, None]).T @ Zc
    rhs = (Zc * sw[:, None]).T @ tc
    lam = ridge_lambda
    eye = np.eye(Z.shape[1])
    if np.linalg.cond(gram + lam * eye) > 1e12:
        warnings.warn("degenerate surrogate design; applying ridge floor", RuntimeWarning, stacklevel=2)
        lam = max(lam, RIDGE_FLOOR * max(1.0, np.trace(gram) / Z.shape[1]))
    coef = np.linalg.solve(gram + lam * eye, rhs)
    return coef, float(tm - zm @ coef)


def surrogate_coefficients(predict_fn: Callable[[np.ndarray], np.ndarray], sample: Sample | np.ndarray,
                           cfg: SurrogateConfig | None = None) -> np.ndarray:
    cfg = cfg or SurrogateConfig()
    x = sample.features if isinstance(sample, Sample) else np.asarray(sample)
    Z = perturb(x, cfg)
    target = np.asarray(predict_fn(Z.astype(np.float64)), dtype=np.float64).reshape(-1)
    if target.shape[0] != Z.shape[0]:
        raise ContractError("predict_fn must return one probability per row")
    if np.any((target < 0) | (target > 1)) or not np.all(np.isfinite(target)):
        raise ContractError("predict_fn must return probabilities in [0, 1]")
    width = cfg.kernel_width if cfg.kernel_width is not None else 0.75 * math.sqrt(x.size)
    coef, _ = fit_surrogate(Z, target, proximity(x, Z, width), cfg.ridge_lambda)
    return coef


def surrogate_explain(predict_fn: Callable[[np.ndarray], np.ndarray], sample: Sample,
                      dictionary: FeatureDictionary, cfg: SurrogateConfig | None = None,
                      n: int = DEFAULT_TOP_N) -> KeyFeatureList:
    """Present features ranked by signed local-surrogate coefficient (toward malicious)."""
    coef = surrogate_coefficients(predict_fn, sample, cfg)
    return rank_present(coef, sample.features, dictionary, n)


def svm_explainer(model: LinearSvmModel) -> Explainer:
    return lambda sample, n: svm_key_features(model, sample, n)


def surrogate_explainer(model: AttentionModel, cfg: SurrogateConfig | None = None) -> Explainer:
    return lambda sample, n: surrogate_explain(model.predict_proba, sample, model.dictionary, cfg, n)


def mean_pairwise_overlap(key_sets: Sequence[Sequence[str]]) -> float:
    """Mean Jaccard similarity of key-feature sets over all sample pairs."""
    sets = [set(k) for k in key_sets]
    vals = []
    for a, b in itertools.combinations(sets, 2):
        union = a | b
        vals.append(len(a & b) / len(union) if union else 1.0)
    return float(np.mean(vals)) if vals else 1.0


def shared_top_overlap(rankings: Sequence[Sequence[int]], n: int) -> float:
    """Cross-sample agreement of top-n choices on the features two samples share.

    For each pair, both full rankings are restricted to the features present
    in both samples and the first ``n`` of each are compared by Jaccard
    similarity. A global weight vector always scores 1.0; per-sample weights
    score lower whenever they reorder shared features.
    """
    vals = []
    present = [set(r) for r in rankings]
    for (ra, pa), (rb, pb) in itertools.combinations(zip(rankings, present), 2):
        shared = pa & pb
        ta = {j for j in ra if j in shared}
        if not ta:
            vals.append(1.0)
            continue
        ta = set([j for j in ra if j in shared][:n])
        tb = set([j for j in rb if j in shared][:n])
        vals.append(len(ta & tb) / len(ta | tb))
    return float(np.mean(vals)) if vals else 1.0


@dataclass
class ComparisonReport:
    methods: list[str]
    feature_names: tuple[str, ...]
    rows: list[dict]  # one per (method, sample)
    frequency: np.ndarray  # (methods, N) key-feature counts
    rankings: dict[str, list[list[int]]] = field(default_factory=dict, repr=False)
    n: int = DEFAULT_TOP_N

    def _method_rows(self, method):
        return [r for r in self.rows if r["method"] == method]

    def mean_ir(self, method: str) -> float:
        return float(np.mean([r["ir"] for r in self._method_rows(method)]))

    def overlap(self, method: str) -> float:
        """Raw mean pairwise Jaccard of the emitted key-feature sets."""
        return mean_pairwise_overlap([r["key_features"] for r in self._method_rows(method)])

    def shared_overlap(self, method: str) -> float:
        return shared_top_overlap(self.rankings[method], self.n)

    def family_table(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for m in self.methods:
            fams: dict[str, list[float]] = {}
            for r in self._method_rows(m):
                fams.setdefault(r["family"], []).append(r["ir"])
            out[m] = {f: float(np.mean(v)) for f, v in sorted(fams.items())}
        return out

    def summary_rows(self) -> list[dict]:
        return [{"method": m, "mean_ir": self.mean_ir(m), "overlap": self.overlap(m),
                 "shared_overlap": self.shared_overlap(m), "samples": len(self._method_rows(m))}
                for m in self.methods]

    def rows_csv(self) -> str:
        lines = ["method,sample_id,family,ir,key_features"]
        for r in self.rows:
            lines.append(f"{r['method']},{r['sample_id']},{r['family']},{r['ir']:.6f},{';'.join(r['key_features'])}")
        return "\n".join(lines) + "\n"

    def summary_csv(self) -> str:
        lines = ["method,mean_ir,overlap,shared_overlap,samples"]
        lines += [f"{r['method']},{r['mean_ir']:.6f},{r['overlap']:.6f},{r['shared_overlap']:.6f},{r['samples']}"
                  for r in self.summary_rows()]
        return "\n".join(lines) + "\n"

    def frequency_csv(self) -> str:
        lines = ["method," + ",".join(self.feature_names)]
        for m, row in zip(self.methods, self.frequency):
            lines.append(m + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        lines = [f"{'method':<10} {'mean ir':>8} {'overlap':>8} {'shared':>8} {'samples':>8}"]
        for r in self.summary_rows():
            lines.append(f"{r['method']:<10} {r['mean_ir']:8.2f} {r['overlap']:8.2f} "
                         f"{r['shared_overlap']:8.2f} {r['samples']:8d}")
        return "\n".join(lines)


def compare_explainers(explainers: Mapping[str, Explainer], samples: Sequence[Sample],
                       truths: Mapping[str, ConceptSet], db: SemanticDatabase, synonyms: Mapping[str, str],
                       dictionary: FeatureDictionary, n: int = DEFAULT_TOP_N,
                       families: Mapping[str, str] | None = None) -> ComparisonReport:
    """Score every explainer through the interpreter and ir on the same samples.

    Each explainer ranks all present features once; the first ``n`` feed the
    description and the full ranking feeds the shared-feature overlap.
    """
    scored = [s for s in samples if s.id in truths]
    if not scored:
        raise ContractError("no evaluation sample has ground truth")
    methods = list(explainers)
    freq = np.zeros((len(methods), len(dictionary)), dtype=np.int64)
    rows, rankings = [], {}
    for mi, method in enumerate(methods):
        explain = explainers[method]
        rankings[method] = []
        for s in scored:
            full = explain(s, len(dictionary))
            keys = KeyFeatureList(full.entries[:n], n)
            score, desc, _ = score_sample(keys, truths[s.id], db, synonyms)
            for k in keys:
                freq[mi, k.index] += 1
            rankings[method].append([k.index for k in full])
            rows.append({"method": method, "sample_id": s.id,
                         "family": (families or {}).get(s.id, ""), "ir": score.ir,
                         "key_features": keys.names, "description": desc.text})
    return ComparisonReport(methods, dictionary.names, rows, freq, rankings, n)


def default_explainers(model: AttentionModel, svm: LinearSvmModel,
                       surrogate: SurrogateConfig | None = None) -> dict[str, Explainer]:
    return {
        "attention": attention_explainer(model),
        "surrogate": surrogate_explainer(model, surrogate),
        "svm": svm_explainer(svm),
    }
