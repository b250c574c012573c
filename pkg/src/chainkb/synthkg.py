"""Synthetic knowledge graphs with planted Horn-clause rules.

A rule ``head(s, t) <- b1(s, x1) & b2(x1, x2) & ... & bk(x_{k-1}, t)`` is
materialised on every body chain; type-conditional rules additionally need
the first intermediate entity to carry a given type. Labels are flipped with
the rule's noise rate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np

from .kgraph import KnowledgeGraph, Vocab, inverse_name, reachable_within

SPLITS = ("train", "dev", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


class UnsatisfiableSpec(ValueError):
    pass


@dataclass(frozen=True)
class PlantedRule:
    head: str
    body: tuple[str, ...]
    required_type: str | None = None   # None means universal
    noise: float = 0.0

    def __post_init__(self):
        if not 1 <= len(self.body) <= 4:
            raise ValueError("rule body must have 1..4 relations")
        if self.head in self.body or inverse_name(self.head) in self.body:
            raise ValueError("rule head may not appear in its body")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise must be in [0, 1)")
        if self.required_type is not None and len(self.body) < 2:
            raise ValueError("a type-conditional rule needs an intermediate entity")

    @property
    def universal(self) -> bool:
        return self.required_type is None

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedRule":
        cond = d.get("conditioning", "universal")
        req = None
        if isinstance(cond, dict):
            req = cond["type"]
        elif cond != "universal":
            raise ValueError(f"bad conditioning {cond!r}")
        return cls(d["head"], tuple(d["body"]), req, float(d.get("noise", 0.0)))

    def to_dict(self) -> dict:
        return {
            "head": self.head,
            "body": list(self.body),
            "conditioning": "universal" if self.universal else {"type": self.required_type},
            "noise": self.noise,
        }


@dataclass
class SynthSpec:
    rules: list[PlantedRule]
    n_entities: int = 200
    n_types: int = 8
    n_body_relations: int = 6
    edges_per_relation: int | None = None
    negatives_per_positive: int = 4
    chain_negatives: bool = False
    max_len: int = 4

    @classmethod
    def default(cls, noise: float = 0.05) -> "SynthSpec":
        return cls(
            rules=[
                PlantedRule("h_universal", ("rel0", "rel1"), None, noise),
                PlantedRule("h_conditional", ("_inv:rel2", "rel3"), "T0", noise),
            ]
        )

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        rules = [PlantedRule.from_dict(r) for r in d.pop("rules")]
        return cls(rules=rules, **d)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["rules"] = [r.to_dict() for r in self.rules]
        return d


@dataclass(frozen=True)
class LabelledTriple:
    source: str
    relation: str
    target: str
    label: int


@dataclass
class SynthDataset:
    kg: KnowledgeGraph
    triples: list[tuple[str, str, str]]
    entity_types: dict[str, list[str]]
    heads: set[tuple[str, str, str]]
    chained: dict[str, set[tuple[str, str]]]
    splits: dict[str, list[LabelledTriple]]
    spec: SynthSpec
    type_names: list[str] = field(default_factory=list)

    @property
    def head_relations(self) -> list[str]:
        return list(dict.fromkeys(r.head for r in self.spec.rules))

    def write(self, out_dir) -> None:
        out = FsPath(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "triples.tsv", "w", encoding="utf-8") as f:
            for s, r, t in self.triples:
                f.write(f"{s}\t{r}\t{t}\n")
        with open(out / "types.tsv", "w", encoding="utf-8") as f:
            for e, ts in self.entity_types.items():
                f.write(f"{e}\t{','.join(ts)}\n")
        for name in SPLITS:
            with open(out / f"{name}.tsv", "w", encoding="utf-8") as f:
                for lt in self.splits[name]:
                    f.write(f"{lt.source}\t{lt.relation}\t{lt.target}\t{lt.label}\n")
        (out / "spec.json").write_text(json.dumps(self.spec.to_dict(), indent=2, sort_keys=True) + "\n")


def _chains(adj: dict[str, dict[str, list[str]]], body: Sequence[str], source: str) -> list[list[str]]:
    """All entity sequences ``[x1, ..., t]`` following ``body`` from ``source``."""
    frontier = [[source]]
    for rel in body:
        nxt = []
        for seq in frontier:
            for e in adj.get(rel, {}).get(seq[-1], ()):
                nxt.append(seq + [e])
        frontier = nxt
    return [seq[1:] for seq in frontier]


def rule_holds(
    rule: PlantedRule,
    adj: dict[str, dict[str, list[str]]],
    types: dict[str, list[str]],
    source: str,
) -> tuple[set[str], set[str]]:
    """Targets reachable through the body from ``source``: (all, satisfying)."""
    reached, holding = set(), set()
    for seq in _chains(adj, rule.body, source):
        t = seq[-1]
        if t == source:
            continue
        reached.add(t)
        if rule.universal or rule.required_type in types[seq[0]]:
            holding.add(t)
    return reached, holding


def generate(spec: SynthSpec, rng: np.random.Generator) -> SynthDataset:
    if spec.n_entities < 20:
        raise ValueError("n_entities must be >= 20")
    ents = [f"e{i}" for i in range(spec.n_entities)]
    type_names = [f"T{i}" for i in range(spec.n_types)]
    body_rels = [f"rel{i}" for i in range(spec.n_body_relations)]
    known = set(body_rels) | {inverse_name(r) for r in body_rels}
    for rule in spec.rules:
        for b in rule.body:
            if b not in known:
                raise UnsatisfiableSpec(f"rule body relation {b!r} is not one of the generated relations")
        if rule.head in known:
            raise UnsatisfiableSpec(f"rule head {rule.head!r} collides with a body relation")
        if rule.required_type is not None and rule.required_type not in type_names:
            raise UnsatisfiableSpec(f"unknown required type {rule.required_type!r}")

    entity_types: dict[str, list[str]] = {}
    for e in ents:
        k = int(rng.integers(1, 4))
        picks = sorted(rng.choice(spec.n_types, size=min(k, spec.n_types), replace=False))
        entity_types[e] = [type_names[i] for i in picks]

    n_edges = spec.edges_per_relation or spec.n_entities
    edges: list[tuple[str, str, str]] = []
    seen = set()
    for r in body_rels:
        made = 0
        while made < n_edges:
            s, t = rng.integers(spec.n_entities, size=2)
            if s == t or (s, r, t) in seen:
                continue
            seen.add((s, r, t))
            edges.append((ents[s], r, ents[t]))
            made += 1

    adj: dict[str, dict[str, list[str]]] = {}
    for s, r, t in edges:
        adj.setdefault(r, {}).setdefault(s, []).append(t)
        adj.setdefault(inverse_name(r), {}).setdefault(t, []).append(s)

    heads: set[tuple[str, str, str]] = set()
    chained: dict[str, set[tuple[str, str]]] = {}
    for rule in spec.rules:
        ch = chained.setdefault(rule.head, set())
        realised = 0
        for s in ents:
            reached, holding = rule_holds(rule, adj, entity_types, s)
            for t in sorted(reached, key=lambda n: int(n[1:])):
                ch.add((s, t))
                label = t in holding
                if rule.noise and rng.random() < rule.noise:
                    label = not label
                if label:
                    heads.add((s, rule.head, t))
                realised += 1
        if realised == 0:
            raise UnsatisfiableSpec(f"rule for {rule.head!r} has no body chains in the generated graph")

    # split labelled pairs (no pair shared between splits)
    pair_rows: dict[tuple[str, str], list[LabelledTriple]] = {}
    for s, h, t in sorted(heads):
        pair_rows.setdefault((s, t), []).append(LabelledTriple(s, h, t, 1))
    if spec.chain_negatives:
        for h in sorted(chained):
            for s, t in sorted(chained[h]):
                if (s, h, t) not in heads:
                    pair_rows.setdefault((s, t), []).append(LabelledTriple(s, h, t, 0))
    pairs = sorted(pair_rows)
    order = rng.permutation(len(pairs))
    n_train = int(round(SPLIT_FRACTIONS[0] * len(pairs)))
    n_dev = int(round(SPLIT_FRACTIONS[1] * len(pairs)))
    split_of = {}
    for rank, i in enumerate(order):
        split_of[pairs[i]] = "train" if rank < n_train else ("dev" if rank < n_train + n_dev else "test")

    splits: dict[str, list[LabelledTriple]] = {name: [] for name in SPLITS}
    for p in pairs:
        splits[split_of[p]].extend(pair_rows[p])

    train_heads = [(lt.source, lt.relation, lt.target) for lt in splits["train"] if lt.label == 1]
    triples = edges + train_heads
    kg = KnowledgeGraph.from_triples(triples, entities=ents)
    types_vocab = Vocab(type_names)
    kg.types = types_vocab
    kg.entity_types = [tuple(types_vocab.id(t) for t in entity_types[e]) for e in ents]

    # corrupted-target negatives for evaluation splits
    used_pairs = set(pairs)
    for name in ("dev", "test"):
        extra = []
        for lt in [x for x in splits[name] if x.label == 1]:
            s_id = kg.entities.id(lt.source)
            reach = reachable_within(kg, s_id, spec.max_len)
            t_types = set(entity_types[lt.target])
            cands = [kg.entities.name(e) for e in sorted(reach)
                     if t_types.intersection(entity_types[kg.entities.name(e)])] or \
                    [kg.entities.name(e) for e in sorted(reach)] or ents
            chosen = set()
            for _ in range(spec.negatives_per_positive):
                for _ in range(20):
                    c = cands[int(rng.integers(len(cands)))]
                    if c in (lt.target, lt.source) or c in chosen:
                        continue
                    if (lt.source, lt.relation, c) in heads or (lt.source, c) in used_pairs:
                        continue
                    # chained false pairs enter evaluation only through chain_negatives
                    if (lt.source, c) in chained[lt.relation]:
                        continue
                    chosen.add(c)
                    extra.append(LabelledTriple(lt.source, lt.relation, c, 0))
                    break
        used_pairs.update((x.source, x.target) for x in extra)
        splits[name].extend(extra)
    return SynthDataset(kg, triples, entity_types, heads, chained, splits, spec, type_names)
