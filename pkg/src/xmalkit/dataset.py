"""Feature dictionaries, sparse sample files, splitting and synthetic corpora."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence, TextIO

import numpy as np

from .nn import ContractError

KINDS = ("api_call", "permission")
SAMPLE_HEADER = ("id", "label", "features")


class ParseError(ValueError):
    """Malformed input file; ``line`` is 1-based and counts the header."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class FeatureDictionary:
    names: tuple[str, ...]
    kinds: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise ContractError("names and kinds differ in length")
        if not self.names:
            raise ContractError("a feature dictionary needs at least one entry")
        index = {}
        for i, (name, kind) in enumerate(zip(self.names, self.kinds)):
            if name in index:
                raise ContractError(f"duplicate feature name {name!r}")
            if kind not in KINDS:
                raise ContractError(f"unknown feature kind {kind!r}")
            index[name] = i
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.names)

    def count(self, kind: str) -> int:
        return sum(1 for k in self.kinds if k == kind)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("name", "kind"))
        w.writerows(zip(self.names, self.kinds))
        return buf.getvalue()

    @property
    def hash(self) -> str:
        """SHA-256 of the canonical CSV form; ties models to their dictionary."""
        return hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()

    def permuted(self, order: Sequence[int]) -> "FeatureDictionary":
        return FeatureDictionary(tuple(self.names[i] for i in order), tuple(self.kinds[i] for i in order))


@dataclass(frozen=True)
class Sample:
    id: str
    features: np.ndarray  # uint8 bits, dictionary order
    label: int | None = None

    def active(self) -> np.ndarray:
        return np.flatnonzero(self.features)


def load_dictionary(source: TextIO) -> FeatureDictionary:
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["name", "kind"]:
        raise ParseError("expected header 'name,kind'", 1)
    names, kinds, seen = [], [], {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 columns, got {len(row)}", lineno)
        name, kind = row[0].strip(), row[1].strip()
        if not name:
            raise ParseError("empty feature name", lineno)
        if kind not in KINDS:
            raise ParseError(f"unknown kind {kind!r} (expected one of {', '.join(KINDS)})", lineno)
        if name in seen:
            raise ParseError(f"duplicate feature name {name!r} (first seen on line {seen[name]})", lineno)
        seen[name] = lineno
        names.append(name)
        kinds.append(kind)
    if not names:
        raise ParseError("dictionary has no entries")
    return FeatureDictionary(tuple(names), tuple(kinds))


def bundled_dictionary() -> FeatureDictionary:
    """The shipped 158-entry dictionary (97 API calls, 61 permissions).

    Names seen in published malware analyses are real; the rest are
    ``synthetic.ApiNNN`` / ``SYNTHETIC_PERMISSION_NNN`` placeholders.
    """
    with resources.files("xmalkit.data").joinpath("dictionary.csv").open("r", encoding="utf-8") as f:
        return load_dictionary(f)


def load_samples(source: TextIO, dictionary: FeatureDictionary, require_labels: bool = True) -> list[Sample]:
    """Parse ``id,label,feat1;feat2;...`` rows into dense bit-vectors.

    A leading ``id,label,features`` header is optional. An empty label is only
    accepted when ``require_labels`` is false (predict mode).
    """
    samples = []
    ids = set()
    for lineno, row in enumerate(csv.reader(source), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and tuple(c.strip() for c in row) == SAMPLE_HEADER:
            continue
        if len(row) == 2:
            row = row + [""]
        if len(row) != 3:
            raise ParseError(f"expected 3 columns (id,label,features), got {len(row)}", lineno)
        sid, raw_label, raw_feats = (c.strip() for c in row)
        if not sid:
            raise ParseError("empty sample id", lineno)
        if sid in ids:
            raise ParseError(f"duplicate sample id {sid!r}", lineno)
        ids.add(sid)
        if raw_label == "":
            if require_labels:
                raise ParseError(f"sample {sid!r} has no label", lineno)
            label = None
        elif raw_label in ("0", "1"):
            label = int(raw_label)
        else:
            raise ParseError(f"label must be 0, 1 or empty, got {raw_label!r}", lineno)
        bits = np.zeros(len(dictionary), dtype=np.uint8)
        for name in raw_feats.split(";"):
            name = name.strip()
            if not name:
                continue
            j = dictionary.index.get(name)
            if j is None:
                raise ParseError(f"unknown feature {name!r}", lineno)
            bits[j] = 1
        samples.append(Sample(sid, bits, label))
    return samples


def serialize_samples(samples: Iterable[Sample], dictionary: FeatureDictionary) -> str:
    """Canonical text form: header, features in dictionary order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SAMPLE_HEADER)
    for s in samples:
        feats = ";".join(dictionary.names[j] for j in s.active())
        w.writerow((s.id, "" if s.label is None else str(s.label), feats))
    return buf.getvalue()


def as_matrix(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.features for s in samples]).astype(np.float64)


def labels_of(samples: Sequence[Sample]) -> np.ndarray:
    if any(s.label is None for s in samples):
        raise ContractError("every sample needs a label here")
    return np.array([s.label for s in samples], dtype=np.int64)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0
    stratified: bool = False


def split(samples: Sequence[Sample], spec: SplitSpec) -> tuple[list[Sample], list[Sample]]:
    """Seeded disjoint train/test partition, optionally stratified by label."""
    n = len(samples)
    if n < 2:
        raise ContractError("need at least 2 samples to split")
    if not 0.0 < spec.train_fraction < 1.0:
        raise ContractError(f"train_fraction must lie in (0, 1), got {spec.train_fraction}")
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            if s.label is None:
                raise ContractError("stratified split needs labelled samples")
            groups.setdefault(s.label, []).append(i)
        if len(groups) < 2:
            raise ContractError("stratified split needs both classes present")
        train_idx, test_idx = [], []
        for label in sorted(groups):
            idx = np.array(groups[label])
            perm = idx[rng.permutation(len(idx))]
            k = int(round(spec.train_fraction * len(idx)))
            train_idx.extend(perm[:k])
            test_idx.extend(perm[k:])
        train_idx.sort()
        test_idx.sort()
    else:
        perm = rng.permutation(n)
        k = int(round(spec.train_fraction * n))
        train_idx, test_idx = sorted(perm[:k]), sorted(perm[k:])
    if not train_idx or not test_idx:
        raise ContractError(f"train_fraction {spec.train_fraction} leaves an empty side for n={n}")
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


@dataclass(frozen=True)
class PlantedRule:
    """Signature features planted into samples of one class.

    Each listed feature is switched on independently with ``probability``.
    ``exclusive`` rules of a class form families: every sample of that class
    draws exactly one of them (by ``weight``). Non-exclusive rules apply to
    every sample of the class.
    """

    label: int
    features: tuple[str, ...]
    probability: float = 1.0
    name: str = ""
    exclusive: bool = True
    weight: float = 1.0


@dataclass
class SyntheticCorpus:
    samples: list[Sample]
    family: dict[str, str]  # sample id -> rule name ("" for none)
    base_pattern: np.ndarray


def generate_synthetic(n_samples: int, dictionary: FeatureDictionary, planted_rules: Sequence[PlantedRule],
                       noise_rate: float, seed: int, malicious_fraction: float = 0.5,
                       base_density: float = 0.1) -> SyntheticCorpus:
    """Labelled corpus with planted per-class signatures.

    A single background base pattern (each non-signature feature on with
    ``base_density``) is shared by all samples; every background bit is then
    flipped independently with ``noise_rate``. Signature bits are set only by
    their rule and never flipped by noise in samples that carry that rule.
    """
    if not planted_rules:
        raise ContractError("planted_rules must not be empty")
    if not 0.0 <= noise_rate <= 1.0:
        raise ContractError("noise_rate must be in [0, 1]")
    if n_samples < 1:
        raise ContractError("n_samples must be positive")
    for r in planted_rules:
        if r.label not in (0, 1) or not r.features or not 0.0 <= r.probability <= 1.0:
            raise ContractError(f"invalid planted rule {r!r}")
        for f in r.features:
            if f not in dictionary.index:
                raise ContractError(f"planted feature {f!r} not in dictionary")
    rng = np.random.default_rng(seed)
    n = len(dictionary)
    signature_cols = sorted({dictionary.index[f] for r in planted_rules for f in r.features})
    base = (rng.random(n) < base_density).astype(np.uint8)
    base[signature_cols] = 0

    labels = (rng.random(n_samples) < malicious_fraction).astype(int)
    rules_by_label = {lab: [r for r in planted_rules if r.label == lab] for lab in (0, 1)}
    samples, family = [], {}
    width = len(str(n_samples))
    for i in range(n_samples):
        y = int(labels[i])
        bits = base.copy()
        flips = rng.random(n) < noise_rate
        bits[flips] ^= 1
        rules = rules_by_label[y]
        chosen = [r for r in rules if not r.exclusive]
        exclusive = [r for r in rules if r.exclusive]
        fam = ""
        if exclusive:
            w = np.array([r.weight for r in exclusive], dtype=np.float64)
            pick = exclusive[int(rng.choice(len(exclusive), p=w / w.sum()))]
            chosen.append(pick)
            fam = pick.name
        for r in chosen:
            cols = [dictionary.index[f] for f in r.features]
            bits[cols] = (rng.random(len(cols)) < r.probability).astype(np.uint8)
        sid = f"s{i:0{width}d}"
        samples.append(Sample(sid, bits, y))
        family[sid] = fam
    return SyntheticCorpus(samples, family, base)
