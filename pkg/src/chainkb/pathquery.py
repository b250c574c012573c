"""Path-query answering: given a start entity and a relation sequence,
rank candidate end entities.

Includes a ring-shaped synthetic benchmark, a logistic training loop with
sampled negative targets and mean-quantile scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .evaluation import mean_quantile
from .numcore import AdamState, adam_step, derive_rng, sigmoid
from .pathmodel import ModelParams, pathquery_backward, pathquery_scores


@dataclass(frozen=True)
class PathQuery:
    source: int
    relations: tuple[int, ...]
    target: int


@dataclass
class PathQueryData:
    entities: list[str]
    relations: list[str]
    train: list[PathQuery]
    test: list[PathQuery]
    answers: dict[tuple[int, tuple[int, ...]], set[int]]


def ring_queries(
    rng: np.random.Generator,
    n_entities: int = 50,
    offsets: Sequence[int] = (1, 3, 7),
    max_len: int = 2,
    n_multi: int = 400,
    test_fraction: float = 0.3,
) -> PathQueryData:
    """Entities on a ring; relation ``shift<o>`` maps entity i to i + o (mod n).

    Every single-edge query goes to training. Multi-hop queries (length
    2..max_len) are drawn at random and split into train/test without
    sharing a ``(source, relation sequence)``.
    """
    n = n_entities
    entities = [f"n{i}" for i in range(n)]
    relations = [f"shift{o}" for o in offsets]
    train: list[PathQuery] = []
    for s in range(n):
        for r, o in enumerate(offsets):
            train.append(PathQuery(s, (r,), (s + o) % n))
    multi: dict[tuple[int, tuple[int, ...]], PathQuery] = {}
    tries = 0
    while len(multi) < n_multi and tries < 50 * n_multi:
        tries += 1
        k = int(rng.integers(2, max_len + 1))
        seq = tuple(int(x) for x in rng.integers(len(offsets), size=k))
        s = int(rng.integers(n))
        t = (s + sum(offsets[r] for r in seq)) % n
        multi.setdefault((s, seq), PathQuery(s, seq, t))
    keys = sorted(multi)
    order = rng.permutation(len(keys))
    n_test = int(round(test_fraction * len(keys)))
    test = [multi[keys[i]] for i in order[:n_test]]
    train.extend(multi[keys[i]] for i in order[n_test:])
    answers = {(q.source, q.relations): {q.target} for q in train + test}
    return PathQueryData(entities, relations, train, test, answers)


def read_queries(lines: Iterable[str], entities: Sequence[str], relations: Sequence[str]) -> list[PathQuery]:
    e_id = {n: i for i, n in enumerate(entities)}
    r_id = {n: i for i, n in enumerate(relations)}
    out = []
    for i, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"queries line {i}: expected source<TAB>r1,r2,...<TAB>target")
        try:
            out.append(PathQuery(e_id[parts[0]], tuple(r_id[r] for r in parts[1].split(",")), e_id[parts[2]]))
        except KeyError as exc:
            raise ValueError(f"queries line {i}: unknown name {exc}") from None
    return out


def format_query(q: PathQuery, entities: Sequence[str], relations: Sequence[str]) -> str:
    return f"{entities[q.source]}\t{','.join(relations[r] for r in q.relations)}\t{entities[q.target]}"


def query_loss(
    params: ModelParams,
    queries: Sequence[PathQuery],
    negatives: Sequence[Sequence[int]],
    variant: str,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean over queries of ``softplus(-s+) + mean_j softplus(s-_j)``."""
    src, seqs, tgt, sign, weight = [], [], [], [], []
    for q, negs in zip(queries, negatives):
        src.append(q.source)
        seqs.append(q.relations)
        tgt.append(q.target)
        sign.append(1.0)
        weight.append(1.0)
        for t in negs:
            src.append(q.source)
            seqs.append(q.relations)
            tgt.append(t)
            sign.append(-1.0)
            weight.append(1.0 / len(negs))
    scores, cache = pathquery_scores(params, src, seqs, tgt, variant)
    sign = np.array(sign)
    weight = np.array(weight) / len(queries)
    x = sign * scores
    # softplus(-x) and its derivative, overflow-free
    loss = np.where(x > 0, np.log1p(np.exp(-np.abs(x))), -x + np.log1p(np.exp(-np.abs(x))))
    d = -sign * sigmoid(-x) * weight
    grads: dict[str, np.ndarray] = {}
    pathquery_backward(params, cache, d, grads)
    return float(np.sum(loss * weight)), grads


def train_pathquery(
    params: ModelParams,
    queries: Sequence[PathQuery],
    variant: str,
    seed: int,
    epochs: int = 30,
    batch_size: int = 32,
    n_negatives: int = 10,
    learning_rate: float = 1e-3,
    answers: dict | None = None,
) -> list[tuple[int, float]]:
    n_ent = params.arrays["ent_emb"].shape[0]
    adam = AdamState(learning_rate)
    trace = []
    step = 0
    for epoch in range(epochs):
        rng = derive_rng(seed, "pathquery", epoch)
        order = rng.permutation(len(queries))
        for start in range(0, len(queries), batch_size):
            batch = [queries[i] for i in order[start : start + batch_size]]
            negs = []
            for q in batch:
                bad = answers.get((q.source, q.relations), {q.target}) if answers else {q.target}
                cand = rng.integers(n_ent, size=n_negatives * 2)
                negs.append([int(c) for c in cand if c not in bad][:n_negatives] or [(q.target + 1) % n_ent])
            loss, grads = query_loss(params, batch, negs, variant)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite path-query loss at step {step}")
            adam_step(params.arrays, grads, adam)
            trace.append((step, loss))
            step += 1
    return trace


def query_mean_quantile(
    params: ModelParams,
    queries: Sequence[PathQuery],
    variant: str,
    answers: dict[tuple[int, tuple[int, ...]], set[int]],
) -> float:
    """Mean quantile of each query's correct target among all non-answers."""
    n_ent = params.arrays["ent_emb"].shape[0]
    cands = np.arange(n_ent)
    per_query = []
    for q in queries:
        scores, _ = pathquery_scores(params, [q.source] * n_ent, [q.relations] * n_ent, cands, variant)
        good = answers.get((q.source, q.relations), {q.target})
        wrong = [scores[c] for c in range(n_ent) if c not in good]
        per_query.append((scores[q.target], wrong))
    return mean_quantile(per_query)
