"""Detection metrics, concept extraction and the ir interpretability score."""
from __future__ import annotations

import csv
import io
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Iterable, Mapping, Sequence, TextIO

import numpy as np

from .dataset import ParseError, Sample
from .interpreter import Description, SemanticDatabase, describe
from .model import AttentionModel, KeyFeatureList, key_features
from .nn import ContractError


@dataclass(frozen=True)
class DetectionReport:
    tp: int
    fp: int
    tn: int
    fn: int
    recall: float
    precision: float
    accuracy: float
    f_measure: float


def _safe_div(a, b):
    return a / b if b else 0.0


def detection_metrics(predictions: Sequence[int], labels: Sequence[int]) -> DetectionReport:
    pred = np.asarray(predictions, dtype=int)
    true = np.asarray(labels, dtype=int)
    if pred.shape != true.shape:
        raise ContractError(f"{pred.size} predictions for {true.size} labels")
    if pred.size == 0:
        raise ContractError("no predictions to score")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    return report_from_counts(tp, fp, tn, fn)


def report_from_counts(tp: int, fp: int, tn: int, fn: int) -> DetectionReport:
    if tp + fp == 0:
        warnings.warn("no positive predictions; precision set to 0", RuntimeWarning, stacklevel=2)
    if tp + fn == 0:
        warnings.warn("no positive labels; recall set to 0", RuntimeWarning, stacklevel=2)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    accuracy = (tp + tn) / (tp + fp + tn + fn)
    f = _safe_div(2 * precision * recall, precision + recall)
    return DetectionReport(tp, fp, tn, fn, recall, precision, accuracy, f)


_NON_WORD = re.compile(r"[^\w\s/-]+")
_SPACE = re.compile(r"\s+")


def normalize_surface(text: str) -> str:
    return _SPACE.sub(" ", _NON_WORD.sub(" ", text.lower())).strip()


@dataclass
class ConceptSet:
    concepts: frozenset[str]
    synonyms: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.concepts = frozenset(self.concepts)
        self.synonyms = {normalize_surface(k): v for k, v in self.synonyms.items()}

    def canonical(self, surface: str) -> str:
        if surface in self.concepts:
            return surface
        norm = normalize_surface(surface)
        return self.synonyms.get(norm, surface)


@dataclass(frozen=True)
class IrScore:
    detect_concepts: int
    surplus_concepts: int
    total_concepts: int
    precision: float
    recall: float
    ir: float

    @property
    def rounded(self) -> float:
        return round(self.ir, 2)


def ir_score(generated: Iterable[str], truth: ConceptSet) -> IrScore:
    """Concept-level precision, recall and their harmonic mean.

    Generated surfaces are canonicalised through ``truth.synonyms``; anything
    that does not land on a truth concept counts as surplus.
    """
    if not truth.concepts:
        raise ContractError("ground truth holds no concepts")
    gen = {truth.canonical(s) for s in generated}
    detect = len(gen & truth.concepts)
    surplus = len(gen - truth.concepts)
    total = len(truth.concepts)
    precision = _safe_div(detect, detect + surplus)
    recall = detect / total
    ir = _safe_div(2 * precision * recall, precision + recall)
    return IrScore(detect, surplus, total, precision, recall, ir)


def load_synonyms(source: TextIO) -> dict[str, str]:
    out = {}
    for lineno, row in enumerate(csv.reader(source), start=1):
        if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
            continue
        if lineno == 1 and [c.strip() for c in row] == ["surface", "concept_id"]:
            continue
        if len(row) != 2 or not row[0].strip() or not row[1].strip():
            raise ParseError("expected 'surface,concept_id'", lineno)
        out[normalize_surface(row[0])] = row[1].strip()
    return out


def bundled_synonyms() -> dict[str, str]:
    with resources.files("xmalkit.data").joinpath("synonyms.csv").open("r", encoding="utf-8") as f:
        return load_synonyms(f)


def load_truth(source: TextIO, synonyms: Mapping[str, str] | None = None) -> dict[str, ConceptSet]:
    """Parse ``sample_id: concept;concept;...`` lines."""
    out = {}
    syn = dict(synonyms or {})
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        sid, sep, rest = line.partition(":")
        if not sep or not sid.strip():
            raise ParseError("expected 'sample_id: concept;concept;...'", lineno)
        concepts = [c.strip() for c in rest.split(";") if c.strip()]
        if not concepts:
            raise ParseError(f"sample {sid.strip()!r} has no concepts", lineno)
        if sid.strip() in out:
            raise ParseError(f"duplicate sample id {sid.strip()!r}", lineno)
        out[sid.strip()] = ConceptSet(frozenset(concepts), syn)
    return out


def dump_truth(truths: Mapping[str, ConceptSet]) -> str:
    return "".join(f"{sid}: {';'.join(sorted(t.concepts))}\n" for sid, t in truths.items())


def dump_synonyms(synonyms: Mapping[str, str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("surface", "concept_id"))
    w.writerows(sorted(synonyms.items()))
    return buf.getvalue()


def _clauses(text: str) -> list[str]:
    parts = []
    for piece in text.split(","):
        piece = normalize_surface(piece)
        piece = re.sub(r"^and\s+", "", piece)
        if piece:
            parts.append(piece)
    return parts


def concept_extract(description: Description | str, synonyms: Mapping[str, str]) -> list[str]:
    """Concept ids found in a description, in reading order.

    Each comma-separated clause is scanned for the longest non-overlapping
    synonym surfaces (so one clause may yield several concepts). A clause with
    no known surface is returned verbatim as an unknown surface.
    """
    text = description.text if isinstance(description, Description) else description
    surfaces = sorted({normalize_surface(k): v for k, v in synonyms.items()}.items(),
                      key=lambda kv: (-len(kv[0]), kv[0]))
    out: list[str] = []
    for clause in _clauses(text):
        taken: list[tuple[int, int, str]] = []
        for surface, concept in surfaces:
            for m in re.finditer(r"(?<![\w-])" + re.escape(surface) + r"(?![\w-])", clause):
                a, b = m.span()
                if all(b <= s or a >= e for s, e, _ in taken):
                    taken.append((a, b, concept))
        if not taken:
            out.append(clause)
            continue
        for _, _, concept in sorted(taken):
            if concept not in out:
                out.append(concept)
    return out


Explainer = Callable[[Sample, int], KeyFeatureList]


def attention_explainer(model: AttentionModel) -> Explainer:
    return lambda sample, n: key_features(model, sample, n)


def score_sample(keys: KeyFeatureList, truth: ConceptSet, db: SemanticDatabase,
                 synonyms: Mapping[str, str]) -> tuple[IrScore, Description, list[str]]:
    desc = describe(keys, db)
    concepts = concept_extract(desc, synonyms)
    return ir_score(concepts, truth), desc, concepts


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[tuple[int, float], ...]

    @property
    def best_n(self) -> int:
        return max(self.rows, key=lambda r: (r[1], -r[0]))[0]

    def to_csv(self) -> str:
        return "n,mean_ir\n" + "".join(f"{n},{ir:.6f}\n" for n, ir in self.rows)

    def table(self) -> str:
        lines = ["  n  mean ir", " --  -------"]
        lines += [f"{n:3d}  {ir:7.2f}" + ("  <- best" if n == self.best_n else "") for n, ir in self.rows]
        return "\n".join(lines)


def sweep_n(model: AttentionModel | Explainer, samples: Sequence[Sample], truths: Mapping[str, ConceptSet],
            n_values: Iterable[int], db: SemanticDatabase, synonyms: Mapping[str, str]) -> SweepResult:
    """Mean ir over the samples that have ground truth, for each candidate n."""
    n_values = list(n_values)
    if not n_values:
        raise ContractError("n range is empty")
    explainer = attention_explainer(model) if isinstance(model, AttentionModel) else model
    scored = [s for s in samples if s.id in truths]
    if not scored:
        raise ContractError("no sample has a ground-truth concept set")
    rows = []
    for n in n_values:
        irs = [score_sample(explainer(s, n), truths[s.id], db, synonyms)[0].ir for s in scored]
        rows.append((int(n), float(np.mean(irs))))
    return SweepResult(tuple(rows))
