"""Knowledge-graph storage, TSV ingestion and path extraction."""

from __future__ import annotations

import logging
from collections import Counter
from functools import cached_property
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

from .numcore import derive_rng

log = logging.getLogger(__name__)

INVERSE_PREFIX = "_inv:"
MAX_TYPES = 7
MAX_PATH_LEN = 7
DEFAULT_WALKS = 200
DEFAULT_EXPANSION_CAP = 10_000
ELLIPSIS = "…"


class FormatError(ValueError):
    pass


class PathExplosionError(RuntimeError):
    pass


def inverse_name(relation: str) -> str:
    if relation.startswith(INVERSE_PREFIX):
        return relation[len(INVERSE_PREFIX):]
    return INVERSE_PREFIX + relation


class Vocab:
    """Bidirectional name <-> dense id map, ids assigned in insertion order."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        i = self._ids.get(name)
        if i is None:
            i = self._ids[name] = len(self._names)
            self._names.append(name)
        return i

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise KeyError(f"unknown name {name!r}") from None

    def name(self, i: int) -> str:
        return self._names[i]

    def get(self, name: str, default=None):
        return self._ids.get(name, default)

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def __contains__(self, name) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._names == other._names

    def __repr__(self) -> str:
        return f"Vocab({len(self)} names)"


@dataclass(frozen=True)
class Path:
    """``source -r1-> e1 -r2-> ... -rk-> target`` as ids.

    ``steps`` holds ``(relation, entity reached)`` pairs; the last entity is
    the target.
    """

    source: int
    steps: tuple[tuple[int, int], ...]

    @property
    def target(self) -> int:
        return self.steps[-1][1]

    @property
    def relations(self) -> tuple[int, ...]:
        return tuple(r for r, _ in self.steps)

    @property
    def entities(self) -> tuple[int, ...]:
        return tuple(e for _, e in self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def sort_key(self):
        return (len(self.steps), self.steps)


@dataclass
class KnowledgeGraph:
    entities: Vocab
    relations: Vocab
    types: Vocab
    triples: frozenset[tuple[int, int, int]]
    adjacency: list[tuple[tuple[int, int], ...]]
    inverse: list[int]
    entity_types: list[tuple[int, ...]] = field(default_factory=list)
    n_duplicates: int = 0

    @classmethod
    def from_triples(
        cls,
        triples: Iterable[tuple[str, str, str]],
        entities: Iterable[str] = (),
    ) -> "KnowledgeGraph":
        """Build a graph from ``(source, relation, target)`` names.

        Every relation gets an ``_inv:`` twin and every edge its reverse.
        ``entities`` pre-registers names so isolated entities get ids too.
        """
        ents = Vocab(entities)
        rels = Vocab()
        inverse: list[int] = []

        def rel_id(name: str) -> int:
            if name in rels:
                return rels.id(name)
            a = rels.add(name)
            b = rels.add(inverse_name(name))
            inverse.extend([b, a])
            return a

        seen: set[tuple[int, int, int]] = set()
        ordered: list[tuple[int, int, int]] = []
        dups = 0
        for s, r, t in triples:
            si, ti = ents.add(s), ents.add(t)
            ri = rel_id(r)
            if (si, ri, ti) in seen:
                dups += 1
                continue
            for tr in ((si, ri, ti), (ti, inverse[ri], si)):
                if tr not in seen:
                    seen.add(tr)
                    ordered.append(tr)
        adj: list[list[tuple[int, int]]] = [[] for _ in range(len(ents))]
        for s, r, t in ordered:
            adj[s].append((r, t))
        return cls(
            entities=ents,
            relations=rels,
            types=Vocab(),
            triples=frozenset(ordered),
            adjacency=[tuple(a) for a in adj],
            inverse=inverse,
            entity_types=[() for _ in range(len(ents))],
            n_duplicates=dups,
        )

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def has_edge(self, s: int, r: int, t: int) -> bool:
        return (s, r, t) in self.triples

    def is_inverse(self, r: int) -> bool:
        return self.relations.name(r).startswith(INVERSE_PREFIX)

    def n_edges(self) -> int:
        return len(self.triples)

    @cached_property
    def type_incidence(self) -> np.ndarray:
        """Entity x type 0/1 matrix (float64)."""
        inc = np.zeros((self.n_entities, len(self.types)), dtype=np.float64)
        for e, ts in enumerate(self.entity_types):
            for t in ts:
                inc[e, t] = 1.0
        return inc

    def validate_path(self, path: Path, max_len: int = MAX_PATH_LEN) -> bool:
        if not 1 <= len(path) <= max_len:
            return False
        cur = path.source
        for r, e in path.steps:
            if (cur, r, e) not in self.triples:
                return False
            cur = e
        return True

    def path_to_names(self, path: Path) -> list[str]:
        out = [self.entities.name(path.source)]
        for r, e in path.steps:
            out.extend([self.relations.name(r), self.entities.name(e)])
        return out


# --------------------------------------------------------------------------
# ingestion


def _split_line(line: str, n: int, lineno: int, what: str) -> list[str] | None:
    line = line.rstrip("\n").rstrip("\r")
    if not line.strip():
        return None
    parts = line.split("\t")
    if len(parts) != n or any(not p for p in parts):
        raise FormatError(f"{what} line {lineno}: expected {n} non-empty tab-separated fields, got {line!r}")
    return parts


def read_triples(lines: Iterable[str]) -> list[tuple[str, str, str]]:
    out = []
    for i, line in enumerate(lines, 1):
        parts = _split_line(line, 3, i, "triples")
        if parts is not None:
            out.append((parts[0], parts[1], parts[2]))
    return out


def load_triples(lines: Iterable[str]) -> KnowledgeGraph:
    """Parse ``source<TAB>relation<TAB>target`` lines into a graph.

    Duplicate triples are dropped; their number is kept in ``n_duplicates``.
    """
    kg = KnowledgeGraph.from_triples(read_triples(lines))
    if kg.n_duplicates:
        log.info("dropped %d duplicate triples", kg.n_duplicates)
    return kg


def load_entity_types(lines: Iterable[str], kg: KnowledgeGraph) -> KnowledgeGraph:
    """Attach types to entities, keeping each entity's 7 globally most frequent."""
    raw: dict[int, list[str]] = {}
    freq: Counter[str] = Counter()
    for i, line in enumerate(lines, 1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) == 1:
            parts.append("")
        if len(parts) != 2 or not parts[0]:
            raise FormatError(f"types line {i}: expected entity<TAB>types, got {line!r}")
        ent, tlist = parts
        names = list(dict.fromkeys(t.strip() for t in tlist.split(",") if t.strip()))
        freq.update(names)
        if ent not in kg.entities:
            log.warning("types line %d: unknown entity %r skipped", i, ent)
            continue
        bucket = raw.setdefault(kg.entities.id(ent), [])
        bucket.extend(n for n in names if n not in bucket)

    # rank: higher corpus frequency first, then lexicographic name
    rank = {name: i for i, name in enumerate(sorted(freq, key=lambda n: (-freq[n], n)))}
    types = Vocab(sorted(freq, key=lambda n: rank[n]))
    entity_types: list[tuple[int, ...]] = [() for _ in range(kg.n_entities)]
    for e, names in raw.items():
        kept = sorted(names, key=lambda n: rank[n])[:MAX_TYPES]
        entity_types[e] = tuple(sorted(types.id(n) for n in kept))
    return replace(kg, types=types, entity_types=entity_types)


def truncate_textual_relation(phrase: Sequence[str]) -> str:
    """Relation name for the tokens between two entity mentions.

    Phrases of up to four tokens are kept; longer ones keep the first two and
    the last two tokens around an ellipsis.
    """
    tokens = [t for t in phrase]
    if not tokens:
        raise ValueError("empty phrase: no textual relation between the mentions")
    if len(tokens) <= 4:
        return " ".join(tokens)
    return " ".join(tokens[:2] + [ELLIPSIS] + tokens[-2:])


def read_pairs(lines: Iterable[str]) -> list[tuple[str, ...]]:
    """Rows of a pairs/split file: ``s<TAB>t`` or ``s<TAB>r<TAB>t[<TAB>label]``."""
    out = []
    for i, line in enumerate(lines, 1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3, 4) or any(not p for p in parts):
            raise FormatError(f"pairs line {i}: expected 2-4 tab-separated fields, got {line!r}")
        out.append(tuple(parts))
    return out


def read_paths(lines: Iterable[str], kg: KnowledgeGraph) -> dict[tuple[int, int], list[Path]]:
    """Parse ``source<TAB>target<TAB>r1,e1,...,rk`` rows into path sets."""
    out: dict[tuple[int, int], list[Path]] = {}
    for i, line in enumerate(lines, 1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"paths line {i}: expected 3 tab-separated fields")
        try:
            s = kg.entities.id(parts[0])
            t = kg.entities.id(parts[1])
            toks = parts[2].split(",")
            if len(toks) % 2 != 1:
                raise FormatError(f"paths line {i}: path must alternate relation,entity and end with a relation")
            steps = []
            for j in range(0, len(toks), 2):
                r = kg.relations.id(toks[j])
                e = t if j == len(toks) - 1 else kg.entities.id(toks[j + 1])
                steps.append((r, e))
        except KeyError as exc:
            raise FormatError(f"paths line {i}: {exc}") from None
        path = Path(s, tuple(steps))
        if not kg.validate_path(path):
            raise FormatError(f"paths line {i}: path is not a walk in the graph")
        bucket = out.setdefault((s, t), [])
        if path not in bucket:
            bucket.append(path)
    for key in out:
        out[key].sort(key=Path.sort_key)
    return out


def format_path(kg: KnowledgeGraph, path: Path) -> str:
    toks = []
    for j, (r, e) in enumerate(path.steps):
        toks.append(kg.relations.name(r))
        if j < len(path.steps) - 1:
            toks.append(kg.entities.name(e))
    return f"{kg.entities.name(path.source)}\t{kg.entities.name(path.target)}\t{','.join(toks)}"


# --------------------------------------------------------------------------
# path extraction


def direct_edges(kg: KnowledgeGraph, source: int, target: int, relations: Iterable[int]) -> frozenset:
    """Edges ``source -q-> target`` (and reverses) for the given relations.

    Passed as ``banned`` to the extractors so a training pair's own label
    never shows up as one of its paths.
    """
    out = set()
    for q in relations:
        if (source, q, target) in kg.triples:
            out.add((source, q, target))
            out.add((target, kg.inverse[q], source))
    return frozenset(out)


def sample_paths(
    kg: KnowledgeGraph,
    source: int,
    target: int,
    max_len: int,
    walks: int,
    rng: np.random.Generator,
    banned: frozenset = frozenset(),
) -> list[Path]:
    """Random-walk path extraction with rejection.

    Each of ``walks`` walks starts at ``source`` and follows uniformly chosen
    outgoing edges for at most ``max_len`` steps, stopping when it hits
    ``target`` (the path so far is kept) or a dead end (discarded). Returns the
    distinct paths sorted by length, then lexicographically.
    """
    if max_len > MAX_PATH_LEN or max_len < 0:
        raise ValueError(f"max_len must be in [0, {MAX_PATH_LEN}]")
    found: set[Path] = set()
    if max_len == 0 or not kg.adjacency[source]:
        return []
    adjacency = kg.adjacency
    if banned:
        def edges(node):
            return [(r, e) for r, e in adjacency[node] if (node, r, e) not in banned]
    else:
        def edges(node):
            return adjacency[node]
    cache: dict[int, Sequence[tuple[int, int]]] = {}
    draws = rng.random((walks, max_len))
    for w in range(walks):
        cur = source
        steps: list[tuple[int, int]] = []
        for i in range(max_len):
            out = cache.get(cur)
            if out is None:
                out = cache[cur] = edges(cur)
            if not out:
                break
            r, e = out[int(draws[w, i] * len(out))]
            steps.append((r, e))
            if e == target:
                found.add(Path(source, tuple(steps)))
                break
            cur = e
    return sorted(found, key=Path.sort_key)


def enumerate_paths(
    kg: KnowledgeGraph,
    source: int,
    target: int,
    max_len: int,
    cap: int = DEFAULT_EXPANSION_CAP,
    banned: frozenset = frozenset(),
) -> list[Path]:
    """Every walk from ``source`` that first reaches ``target`` within ``max_len`` edges.

    Exhaustive depth-first counterpart of :func:`sample_paths`. Raises
    :class:`PathExplosionError` after ``cap`` edge expansions.
    """
    found: list[Path] = []
    if max_len <= 0:
        return found
    expansions = 0
    stack: list[tuple[int, tuple[tuple[int, int], ...]]] = [(source, ())]
    while stack:
        node, steps = stack.pop()
        for r, e in kg.adjacency[node]:
            if (node, r, e) in banned:
                continue
            expansions += 1
            if expansions > cap:
                raise PathExplosionError(
                    f"more than {cap} expansions enumerating paths; use sample_paths instead"
                )
            nsteps = steps + ((r, e),)
            if e == target:
                found.append(Path(source, nsteps))
            elif len(nsteps) < max_len:
                stack.append((e, nsteps))
    return sorted(set(found), key=Path.sort_key)


def reachable_within(kg: KnowledgeGraph, source: int, max_len: int) -> set[int]:
    frontier = {source}
    seen: set[int] = set()
    for _ in range(max_len):
        nxt = set()
        for n in frontier:
            for _, e in kg.adjacency[n]:
                if e not in seen:
                    seen.add(e)
                    nxt.add(e)
        frontier = nxt
    return seen


class PathSource:
    """Per-pair path sets with memoisation.

    Looks a pair up in ``precomputed`` first and otherwise samples with a
    stream derived from ``(seed, source name, target name)``, so results do
    not depend on the order pairs are requested in. Direct edges of any
    ``query_relations`` between the two entities are banned.
    """

    def __init__(
        self,
        kg: KnowledgeGraph,
        seed: int,
        max_len: int = MAX_PATH_LEN,
        walks: int = DEFAULT_WALKS,
        query_relations: Iterable[int] = (),
        precomputed: dict[tuple[int, int], list[Path]] | None = None,
    ):
        self.kg = kg
        self.seed = seed
        self.max_len = max_len
        self.walks = walks
        self.query_relations = tuple(sorted(set(query_relations)))
        self.precomputed = precomputed or {}
        self._cache: dict[tuple[int, int], list[Path]] = {}

    def __call__(self, source: int, target: int) -> list[Path]:
        key = (source, target)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if key in self.precomputed:
            paths = self.precomputed[key]
        else:
            rng = derive_rng(self.seed, "paths", self.kg.entities.name(source), self.kg.entities.name(target))
            banned = direct_edges(self.kg, source, target, self.query_relations)
            paths = sample_paths(self.kg, source, target, self.max_len, self.walks, rng, banned)
        self._cache[key] = paths
        return paths
