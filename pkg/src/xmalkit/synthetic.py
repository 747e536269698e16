"""Synthetic corpora with planted behaviours and their ground-truth concepts.

Every feature gets its own semantic and behaviour clause
(``perform behavior 17``), so the concepts a description mentions can be
compared exactly against the concepts planted in each malware family.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import FeatureDictionary, PlantedRule, Sample, SyntheticCorpus, generate_synthetic
from .evaluation import ConceptSet
from .interpreter import SemanticDatabase, SemanticEntry


def concept_of(index: int) -> str:
    return f"behavior-{index:03d}"


def planted_semantics(dictionary: FeatureDictionary, with_semantics=None) -> tuple[SemanticDatabase, dict[str, str]]:
    """One semantic per feature plus the synonym table that reads them back.

    Features outside ``with_semantics`` (indices; default all) are marked as
    carrying no semantic, like most entries of a real semantic database.
    """
    entries, behaviors, synonyms = {}, {}, {}
    keep = set(range(len(dictionary))) if with_semantics is None else set(with_semantics)
    for j, name in enumerate(dictionary.names):
        if j not in keep:
            entries[name] = SemanticEntry(None)
            continue
        sid = f"sem-{j:03d}"
        entries[name] = SemanticEntry(sid, f"Behavior {j:03d}")
        behaviors[sid] = f"perform behavior {j:03d}"
        synonyms[f"perform behavior {j:03d}"] = concept_of(j)
    return SemanticDatabase(entries, behaviors, []), synonyms


@dataclass
class PlantedCorpus:
    corpus: SyntheticCorpus
    rules: list[PlantedRule]
    truths: dict[str, ConceptSet]  # malicious samples only
    db: SemanticDatabase
    synonyms: dict[str, str]

    @property
    def samples(self) -> list[Sample]:
        return self.corpus.samples

    @property
    def family(self) -> dict[str, str]:
        return self.corpus.family


def planted_family_corpus(dictionary: FeatureDictionary, n_samples: int = 5000, n_families: int = 4,
                          concepts_per_family: int = 3, noise_rate: float = 0.05, seed: int = 0,
                          decoys: int = 0, decoy_probability: float = 0.5,
                          family_weights=None, signature_probability: float = 1.0,
                          semantic_fraction: float = 1.0, decoy_benign_probability: float = 0.0,
                          signatures=None) -> PlantedCorpus:
    """Malware families with disjoint behaviour signatures.

    Signature features are drawn at random (seeded) from the dictionary. Each
    malicious sample belongs to one family and its truth is exactly the
    concepts of the family-signature features it actually carries (each is
    planted with ``signature_probability``). ``decoys`` features, shared by all
    malware with ``decoy_probability`` but absent from every truth, model
    features that are globally predictive without describing a behaviour.
    Planted and decoy features always carry a semantic; of the remaining
    features only a seeded ``semantic_fraction`` do. ``signatures`` (one
    feature-name list per family) fixes the family signatures instead of
    drawing them.
    """
    rng = np.random.default_rng(seed)
    if signatures is not None:
        n_families = len(signatures)
        concepts_per_family = len(signatures[0])
        if any(len(sig) != concepts_per_family for sig in signatures):
            raise ValueError("all family signatures must have the same length")
    need = n_families * concepts_per_family + decoys
    if need > len(dictionary):
        raise ValueError(f"dictionary too small for {need} planted features")
    picked = [int(j) for j in rng.choice(len(dictionary), size=need, replace=False)]
    if signatures is not None:
        fixed = [dictionary.index[f] for sig in signatures for f in sig]
        if len(set(fixed)) != len(fixed):
            raise ValueError("family signatures overlap")
        rest = [j for j in picked + [int(j) for j in rng.permutation(len(dictionary))] if j not in fixed]
        picked = fixed + list(dict.fromkeys(rest))[:decoys]
    weights = list(family_weights) if family_weights is not None else [1.0] * n_families
    rules = []
    for f in range(n_families):
        cols = picked[f * concepts_per_family:(f + 1) * concepts_per_family]
        rules.append(PlantedRule(1, tuple(dictionary.names[j] for j in cols), signature_probability, f"family{f}",
                                 exclusive=True, weight=weights[f]))
    if decoys:
        cols = picked[n_families * concepts_per_family:]
        names = tuple(dictionary.names[j] for j in cols)
        rules.append(PlantedRule(1, names, decoy_probability, "decoy", exclusive=False))
        if decoy_benign_probability > 0:
            rules.append(PlantedRule(0, names, decoy_benign_probability, "decoy", exclusive=False))
    corpus = generate_synthetic(n_samples, dictionary, rules, noise_rate, seed + 1)
    others = [j for j in range(len(dictionary)) if j not in set(picked)]
    described = rng.permutation(others)[:int(round(semantic_fraction * len(others)))]
    db, synonyms = planted_semantics(dictionary, set(picked) | {int(j) for j in described})
    by_name = {r.name: r for r in rules}
    truths = {}
    for s in corpus.samples:
        fam = corpus.family[s.id]
        if s.label == 1 and fam:
            concepts = {concept_of(dictionary.index[f]) for f in by_name[fam].features
                        if s.features[dictionary.index[f]]}
            if concepts:
                truths[s.id] = ConceptSet(frozenset(concepts), synonyms)
    return PlantedCorpus(corpus, rules, truths, db, synonyms)
