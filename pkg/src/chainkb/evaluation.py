"""Ranking metrics (AP, MAP, mean quantile) and the scoring driver that
produces ranked lists from a trained model."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .kgraph import KnowledgeGraph, Path
from .pathmodel import ModelParams, score_paths
from .pooling import PoolingKind, pool

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


@dataclass
class RankedList:
    """Candidates sorted by descending score, ties by ascending candidate id."""

    query: Hashable
    items: list[tuple[Hashable, float, bool]]

    @classmethod
    def from_scores(cls, query, candidates: Iterable[tuple[Hashable, float, bool]]) -> "RankedList":
        items = sorted(candidates, key=lambda it: (-it[1], it[0]))
        return cls(query, items)

    @property
    def relevance(self) -> list[bool]:
        return [rel for _, _, rel in self.items]

    @property
    def n_relevant(self) -> int:
        return sum(self.relevance)

    def __len__(self) -> int:
        return len(self.items)


def average_precision(rl: RankedList) -> float:
    """Mean of precision@k over the ranks k holding a relevant item."""
    hits = 0
    total = 0.0
    for k, rel in enumerate(rl.relevance, 1):
        if rel:
            hits += 1
            total += hits / k
    if hits == 0:
        raise UndefinedMetricError(f"no relevant items for query {rl.query!r}")
    return total / hits


def mean_average_precision(lists: Sequence[RankedList]) -> float:
    aps = []
    for rl in lists:
        try:
            aps.append(average_precision(rl))
        except UndefinedMetricError:
            log.warning("query %r has no relevant items; excluded from MAP", rl.query)
    if not aps:
        raise UndefinedMetricError("no ranked list has a defined AP")
    return sum(aps) / len(aps)


def mean_quantile(queries: Sequence[tuple[float, Sequence[float]]]) -> float:
    """Fraction of incorrect candidates scored strictly below the correct one,
    averaged over queries. Ties do not count as "below"."""
    if not queries:
        raise UndefinedMetricError("no queries")
    total = 0.0
    for correct, incorrect in queries:
        inc = np.asarray(incorrect, dtype=np.float64)
        if inc.size == 0:
            raise UndefinedMetricError("query without incorrect candidates")
        total += np.count_nonzero(inc < correct) / inc.size
    return total / len(queries)


def pair_scores(
    params: ModelParams,
    kg: KnowledgeGraph | None,
    query_relation: int,
    pairs: Sequence[tuple[int, int]],
    pooling: PoolingKind,
    path_source: Callable[[int, int], Sequence[Path]],
) -> np.ndarray:
    """Pooled score per pair (the logit of the pooled probability).

    Pathless pairs get ``-inf``. The logit is used instead of the probability
    so saturated sigmoids do not create artificial ties.
    """
    path_sets = [list(path_source(s, t)) for s, t in pairs]
    flat = [p for ps in path_sets for p in ps]
    out = np.full(len(pairs), -math.inf)
    if not flat:
        return out
    raw, _ = score_paths(params, kg, flat, [query_relation] * len(flat))
    pos = 0
    for i, ps in enumerate(path_sets):
        if ps:
            out[i] = pool(raw[pos : pos + len(ps)], pooling).pooled
            pos += len(ps)
    return out


def rank_pairs(
    params: ModelParams,
    kg: KnowledgeGraph | None,
    query_relation: int,
    candidates: Sequence[tuple[int, int, bool]],
    pooling: PoolingKind,
    path_source: Callable[[int, int], Sequence[Path]],
) -> RankedList:
    """Score ``(source, target, relevant)`` candidates for one query relation."""
    pairs = [(s, t) for s, t, _ in candidates]
    scores = pair_scores(params, kg, query_relation, pairs, pooling, path_source)
    return RankedList.from_scores(
        params.query_relations[query_relation],
        [((s, t), float(sc), bool(rel)) for (s, t, rel), sc in zip(candidates, scores)],
    )


def evaluate(
    params: ModelParams,
    kg: KnowledgeGraph | None,
    labelled: Sequence[tuple[int, int, int, int]],
    pooling: PoolingKind,
    path_source: Callable[[int, int], Sequence[Path]],
) -> dict:
    """Per-relation AP and MAP for ``(source, query index, target, label)`` rows."""
    by_q: dict[int, list[tuple[int, int, bool]]] = {}
    for s, q, t, y in labelled:
        by_q.setdefault(q, []).append((s, t, bool(y)))
    per_rel = {}
    lists = []
    for q in sorted(by_q):
        rl = rank_pairs(params, kg, q, by_q[q], pooling, path_source)
        lists.append(rl)
        name = params.query_relations[q]
        entry = {
            "candidates": len(rl),
            "relevant": rl.n_relevant,
            "pathless": sum(1 for _, sc, _ in rl.items if sc == -math.inf),
        }
        try:
            entry["ap"] = average_precision(rl)
        except UndefinedMetricError:
            entry["ap"] = None
        per_rel[name] = entry
    defined = [rl for rl in lists if rl.n_relevant]
    return {
        "map": mean_average_precision(defined) if defined else None,
        "per_relation": per_rel,
        "n_queries": len(lists),
    }
