"""Turn ranked key features into a malicious-behaviour sentence.

Phase 1 maps features to short semantics (deduplicating features that share a
semantic id and merging members of a merge group into one combined phrase).
Phase 2 orders the semantics with precedence rules and renders each through a
behaviour clause.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Sequence, TextIO

from .dataset import FeatureDictionary, ParseError, Sample
from .model import DEFAULT_TOP_N, AttentionModel, KeyFeatureList, forward, rank_present

SEMANTICS_HEADER = ["feature", "semantic_id", "semantic_phrase", "merge_group", "behavior_phrase"]
NO_SEMANTIC = "-"


class OrderingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SemanticEntry:
    semantic_id: str | None  # None: feature deliberately carries no semantic
    phrase: str = ""
    merge_group: str | None = None


@dataclass(frozen=True)
class OrderingRule:
    kind: str  # "first" | "before"
    ids: tuple[str, ...]

    def __str__(self):
        return f"{self.kind}:{','.join(self.ids)}"


@dataclass(frozen=True)
class Semantic:
    semantic_id: str
    phrase: str
    merge_group: str | None
    members: tuple[str, ...]
    features: tuple[str, ...]

    @property
    def ids(self) -> frozenset[str]:
        """Every id an ordering rule may use to address this semantic."""
        extra = {self.merge_group} if self.merge_group else set()
        return frozenset({self.semantic_id, *self.members, *extra})


@dataclass(frozen=True)
class Description:
    semantics: tuple[Semantic, ...]
    text: str
    warnings: tuple[str, ...] = ()


@dataclass
class SemanticDatabase:
    entries: dict[str, SemanticEntry]
    behaviors: dict[str, str]  # semantic id or merge group -> behaviour clause
    ordering: list[OrderingRule] = field(default_factory=list)

    def __post_init__(self):
        validate_ordering(self.ordering)

    def coverage_gaps(self, dictionary: FeatureDictionary) -> list[str]:
        """Dictionary features the database neither maps nor marks as semantic-free."""
        return [n for n in dictionary.names if n not in self.entries]


def load_ordering(source: TextIO) -> list[OrderingRule]:
    rules = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind, sep, rest = line.partition(":")
        ids = tuple(p.strip() for p in rest.split(",")) if sep else ()
        if kind == "first" and len(ids) == 1 and ids[0]:
            rules.append(OrderingRule("first", ids))
        elif kind == "before" and len(ids) == 2 and all(ids) and ids[0] != ids[1]:
            rules.append(OrderingRule("before", ids))
        else:
            raise OrderingConfigError(f"line {lineno}: expected 'first:<id>' or 'before:<a>,<b>', got {line!r}")
    validate_ordering(rules)
    return rules


def validate_ordering(rules: Sequence[OrderingRule]) -> None:
    """Reject precedence sets that cannot all hold at once."""
    firsts = {r.ids[0] for r in rules if r.kind == "first"}
    graph: dict[str, set[str]] = {}
    for r in rules:
        if r.kind != "before":
            continue
        a, b = r.ids
        if b in firsts and a not in firsts:
            raise OrderingConfigError(f"rule {r} conflicts with first:{b}")
        graph.setdefault(a, set()).add(b)
    state: dict[str, int] = {}

    def visit(node, path):
        state[node] = 1
        for nxt in sorted(graph.get(node, ())):
            if state.get(nxt) == 1:
                raise OrderingConfigError("cyclic ordering rules: " + " -> ".join(path + [node, nxt]))
            if nxt not in state:
                visit(nxt, path + [node])
        state[node] = 2

    for node in sorted(graph):
        if node not in state:
            visit(node, [])


def load_semantics(source: TextIO, ordering: TextIO | None = None) -> SemanticDatabase:
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != SEMANTICS_HEADER:
        raise ParseError("expected header " + ",".join(SEMANTICS_HEADER), 1)
    entries: dict[str, SemanticEntry] = {}
    behaviors: dict[str, str] = {}
    phrases: dict[str, str] = {}
    group_of: dict[str, str | None] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5:
            raise ParseError(f"expected 5 columns, got {len(row)}", lineno)
        feature, sid, phrase, group, behavior = (c.strip() for c in row)
        if not feature:
            raise ParseError("empty feature name", lineno)
        if feature in entries:
            raise ParseError(f"duplicate feature {feature!r}", lineno)
        if sid in ("", NO_SEMANTIC):
            entries[feature] = SemanticEntry(None)
            continue
        if not phrase:
            raise ParseError(f"semantic {sid!r} has no phrase", lineno)
        group = group or None
        if phrases.setdefault(sid, phrase) != phrase:
            raise ParseError(f"semantic {sid!r} has conflicting phrases", lineno)
        if group_of.setdefault(sid, group) != group:
            raise ParseError(f"semantic {sid!r} listed under two merge groups", lineno)
        if behavior:
            if behaviors.setdefault(sid, behavior) != behavior:
                raise ParseError(f"semantic {sid!r} has conflicting behaviour phrases", lineno)
            if group and behaviors.setdefault(group, behavior) != behavior:
                raise ParseError(f"merge group {group!r} members disagree on the behaviour phrase", lineno)
        entries[feature] = SemanticEntry(sid, phrase, group)
    clash = {g for g in group_of.values() if g} & set(phrases)
    if clash:
        raise ParseError(f"merge group names collide with semantic ids: {sorted(clash)}")
    rules = load_ordering(ordering) if ordering is not None else []
    return SemanticDatabase(entries, behaviors, rules)


def bundled_semantics() -> SemanticDatabase:
    pkg = resources.files("xmalkit.data")
    with pkg.joinpath("semantics.csv").open("r", encoding="utf-8") as f, \
            pkg.joinpath("ordering.txt").open("r", encoding="utf-8") as o:
        return load_semantics(f, o)


def dump_semantics(db: SemanticDatabase) -> str:
    """Serialise a database back to the CSV layout read by ``load_semantics``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEMANTICS_HEADER)
    for feature, e in db.entries.items():
        if e.semantic_id is None:
            w.writerow((feature, NO_SEMANTIC, "", "", ""))
        else:
            w.writerow((feature, e.semantic_id, e.phrase, e.merge_group or "",
                        db.behaviors.get(e.semantic_id, "")))
    return buf.getvalue()


def dump_ordering(rules: Sequence[OrderingRule]) -> str:
    return "".join(f"{r}\n" for r in rules)


def merged_phrase(phrases: Sequence[str]) -> str:
    """Combine similar phrases: ``Collect IMEI`` + ``Collect IMSI`` -> ``Collect IMEI/IMSI``."""
    split = [p.split() for p in phrases]
    prefix = 0
    while all(len(w) > prefix + 1 for w in split) and len({w[prefix].lower() for w in split}) == 1:
        prefix += 1
    if prefix == 0:
        return "/".join(phrases)
    head = " ".join(split[0][:prefix])
    return head + " " + "/".join(" ".join(w[prefix:]) for w in split)


def match_semantics(keys: KeyFeatureList | Iterable[str], db: SemanticDatabase) -> tuple[list[Semantic], list[str]]:
    """Phase 1. Returns the semantic list in key-feature order and any warnings."""
    names = keys.names if isinstance(keys, KeyFeatureList) else list(keys)
    out: list[Semantic] = []
    member_phrases: dict[int, list[str]] = {}
    warnings = []
    for name in names:
        entry = db.entries.get(name)
        if entry is None:
            warnings.append(f"no semantic entry for feature {name!r}")
            continue
        if entry.semantic_id is None:
            continue
        hit = next((i for i, s in enumerate(out) if entry.semantic_id in s.members), None)
        if hit is not None:  # same functionality: absorb
            out[hit] = replace(out[hit], features=out[hit].features + (name,))
            continue
        group = entry.merge_group
        hit = next((i for i, s in enumerate(out) if group and s.merge_group == group), None)
        if hit is not None:  # similar functionality: combine into one
            s = out[hit]
            member_phrases[hit].append(entry.phrase)
            out[hit] = Semantic(group, merged_phrase(member_phrases[hit]), group,
                                s.members + (entry.semantic_id,), s.features + (name,))
            continue
        member_phrases[len(out)] = [entry.phrase]
        out.append(Semantic(entry.semantic_id, entry.phrase, group, (entry.semantic_id,), (name,)))
    return out, warnings


def order_semantics(semantics: Sequence[Semantic], rules: Sequence[OrderingRule]) -> tuple[list[Semantic], list[str]]:
    """Stable topological sort: ``first`` semantics lead, ``before`` pairs hold, else input order."""
    firsts = {r.ids[0] for r in rules if r.kind == "first"}
    pairs = [r.ids for r in rules if r.kind == "before"]
    lead = [i for i, s in enumerate(semantics) if s.ids & firsts]
    tail = [i for i, s in enumerate(semantics) if not s.ids & firsts]
    warnings: list[str] = []
    order = _stable_topo(semantics, lead, pairs, warnings) + _stable_topo(semantics, tail, pairs, warnings)
    return [semantics[i] for i in order], warnings


def _stable_topo(semantics, idx, pairs, warnings):
    preds = {i: set() for i in idx}
    for i in idx:
        for j in idx:
            if i != j and any(a in semantics[i].ids and b in semantics[j].ids for a, b in pairs):
                preds[j].add(i)
    remaining = list(idx)
    done: list[int] = []
    while remaining:
        ready = [i for i in remaining if not preds[i] - set(done)]
        if not ready:
            warnings.append("ordering rules form a cycle for merged semantics; keeping input order")
            ready = remaining[:1]
        pick = ready[0]
        done.append(pick)
        remaining.remove(pick)
    return done


def join_clauses(clauses: Sequence[str]) -> str:
    if not clauses:
        return ""
    if len(clauses) == 1:
        text = clauses[0]
    else:
        text = ", ".join(clauses[:-1]) + ", and " + clauses[-1]
    return text[0].upper() + text[1:]


def render_description(semantics: Sequence[Semantic], db: SemanticDatabase) -> Description:
    """Phase 2: one behaviour clause per semantic, comma-joined with a final ``and``."""
    clauses, warnings = [], []
    for s in semantics:
        clause = db.behaviors.get(s.semantic_id)
        if clause is None and s.merge_group:
            clause = db.behaviors.get(s.merge_group)
        if clause is None:
            warnings.append(f"no behaviour phrase for semantic {s.semantic_id!r}; using its raw phrase")
            clause = s.phrase[0].lower() + s.phrase[1:]
        if clause not in clauses:
            clauses.append(clause)
    if not semantics:
        warnings.append("no semantics to describe")
    return Description(tuple(semantics), join_clauses(clauses), tuple(warnings))


def describe(keys: KeyFeatureList | Iterable[str], db: SemanticDatabase) -> Description:
    """Both phases for an already ranked key-feature list."""
    matched, w1 = match_semantics(keys, db)
    ordered, w2 = order_semantics(matched, db.ordering)
    desc = render_description(ordered, db)
    return replace(desc, warnings=tuple(w1) + tuple(w2) + desc.warnings)


@dataclass(frozen=True)
class Explanation:
    sample_id: str
    label: int
    probability: float
    key_features: KeyFeatureList
    description: Description

    @property
    def semantics(self) -> list[str]:
        return [s.phrase for s in self.description.semantics]

    @property
    def text(self) -> str:
        return self.description.text

    @property
    def warnings(self) -> tuple[str, ...]:
        return self.description.warnings

    def record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "label": self.label,
            "probability": self.probability,
            "key_features": [{"name": k.name, "weight": k.weight} for k in self.key_features],
            "semantics": self.semantics,
            "description": self.text,
            "warnings": list(self.warnings),
        }


def explain(model: AttentionModel, sample: Sample, n: int = DEFAULT_TOP_N,
            db: SemanticDatabase | None = None) -> Explanation:
    db = db if db is not None else bundled_semantics()
    out = forward(model, sample)
    keys = rank_present(out.weights, sample.features, model.dictionary, n)
    return Explanation(sample.id, out.label, out.probability, keys, describe(keys, db))
