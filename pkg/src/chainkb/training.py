"""Training instances, the pooled negative log-likelihood, the auxiliary
type-ranking (BPR) objective and the Adam training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .kgraph import KnowledgeGraph, Path, reachable_within
from .numcore import AdamState, NonFiniteError, adam_step, derive_rng, sigmoid
from .pathmodel import (
    ModelConfig,
    ModelParams,
    _entity_rows,
    _entity_rows_backward,
    _grad_slot,
    init_params,
    pre_activations,
    score_paths,
    score_paths_backward,
)
from .pooling import LSE, PoolingKind, pool

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
DEFAULT_NEGATIVES = 4


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ModelParams, trace: list[tuple[int, float]]):
        super().__init__(message)
        self.last_good = last_good
        self.trace = trace


@dataclass(frozen=True)
class TrainInstance:
    source: int
    target: int
    query: int              # index into the model's query-relation list
    label: int              # 1 positive, 0 negative
    paths: tuple[Path, ...]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    negatives_per_positive: int = DEFAULT_NEGATIVES
    pooling: PoolingKind = LSE
    seed: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    mtl_types: bool = False
    mtl_weight: float = 0.1
    max_steps: int | None = None
    check_sparsity: bool = False

    def __post_init__(self):
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def adam(self) -> AdamState:
        return AdamState(self.learning_rate, self.beta1, self.beta2, self.epsilon)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["pooling"] = str(self.pooling)
        return d


@dataclass
class DatasetStats:
    positives: int = 0
    negatives: int = 0
    pathless_positives: int = 0
    dropped_negative_slots: int = 0
    explicit_negatives: int = 0
    per_query: dict[str, int] = field(default_factory=dict)


# --------------------------------------------------------------------------
# dataset


def _negative_pool(kg: KnowledgeGraph, s: int, t: int, reach: set[int]) -> list[int]:
    t_types = set(kg.entity_types[t]) if kg.entity_types else set()
    typed = [e for e in range(kg.n_entities) if e != t and t_types.intersection(kg.entity_types[e])]
    for cand in ([e for e in typed if e in reach], sorted(e for e in reach if e != t), typed):
        if cand:
            return cand
    return [e for e in range(kg.n_entities) if e != t]


def build_dataset(
    kg: KnowledgeGraph,
    query_relations: Sequence[str],
    config: TrainConfig,
    rng: np.random.Generator,
    path_source: Callable[[int, int], Sequence[Path]],
    max_len: int = 7,
    explicit_negatives: Iterable[tuple[int, int, int]] = (),
    max_tries: int = 20,
) -> tuple[list[TrainInstance], DatasetStats]:
    """Positive instances from observed query-relation triples plus sampled negatives.

    Each negative replaces the target with an entity sharing a type with it
    (falling back to any entity) such that the corrupted triple is not in the
    graph and the new pair has at least one path. ``explicit_negatives`` are
    ``(source, query index, target)`` triples known to be false; they are
    added as-is when they have paths.
    """
    stats = DatasetStats()
    qids = [kg.relations.id(q) for q in query_relations]
    by_rel: dict[int, list[tuple[int, int]]] = {r: [] for r in qids}
    for s, r, t in sorted(kg.triples):
        if r in by_rel:
            by_rel[r].append((s, t))
    out: list[TrainInstance] = []
    reach_cache: dict[int, set[int]] = {}
    for qi, r in enumerate(qids):
        usable = 0
        for s, t in by_rel[r]:
            paths = tuple(path_source(s, t))
            if not paths:
                stats.pathless_positives += 1
                continue
            usable += 1
            out.append(TrainInstance(s, t, qi, 1, paths))
            stats.positives += 1
            if s not in reach_cache:
                reach_cache[s] = reachable_within(kg, s, max_len)
            cands = _negative_pool(kg, s, t, reach_cache[s])
            chosen: set[int] = set()
            for _ in range(config.negatives_per_positive):
                picked = None
                for _ in range(max_tries):
                    c = cands[int(rng.integers(len(cands)))]
                    if c in (s, t) or c in chosen or (s, r, c) in kg.triples:
                        continue
                    neg_paths = tuple(path_source(s, c))
                    if neg_paths:
                        picked = (c, neg_paths)
                        break
                if picked is None:
                    stats.dropped_negative_slots += 1
                    continue
                chosen.add(picked[0])
                out.append(TrainInstance(s, picked[0], qi, 0, picked[1]))
                stats.negatives += 1
        stats.per_query[query_relations[qi]] = usable
        if usable == 0:
            log.warning("query relation %r has no usable positives", query_relations[qi])
    for s, qi, t in explicit_negatives:
        if (s, qids[qi], t) in kg.triples:
            continue
        paths = tuple(path_source(s, t))
        if paths:
            out.append(TrainInstance(s, t, qi, 0, paths))
            stats.explicit_negatives += 1
            stats.negatives += 1
    return out, stats


# --------------------------------------------------------------------------
# losses


def _softplus(x: float) -> float:
    return x + math.log1p(math.exp(-x)) if x > 0 else math.log1p(math.exp(x))


def label_nll(pooled: float, label: int) -> tuple[float, float]:
    """``-log p`` (positive) or ``-log(1-p)`` (negative) with ``p = sigmoid(pooled)``.

    The probability is clamped to ``[1e-12, 1 - 1e-12]``; inside the clamp
    region the gradient is zero. Returns ``(loss, d loss / d pooled)``.
    """
    sign = 1.0 if label else -1.0
    x = sign * pooled
    q = sigmoid(x)
    if q < PROB_EPS:
        return -math.log(PROB_EPS), 0.0
    if q > 1.0 - PROB_EPS:
        return -math.log(1.0 - PROB_EPS), 0.0
    return _softplus(-x), -sign * sigmoid(-x)


@dataclass
class BatchResult:
    loss: float
    grads: dict[str, np.ndarray]
    probabilities: np.ndarray
    sparsity_violations: int = 0
    kinks: np.ndarray | None = None


def batch_loss(
    params: ModelParams,
    kg: KnowledgeGraph | None,
    instances: Sequence[TrainInstance],
    pooling: PoolingKind,
    check_sparsity: bool = False,
    keep_kinks: bool = False,
) -> BatchResult:
    """Mean pooled NLL over ``instances`` and its gradient."""
    if not instances:
        raise ValueError("empty batch")
    paths: list[Path] = []
    queries: list[int] = []
    bounds = []
    for inst in instances:
        if not inst.paths:
            raise ValueError("instance has no paths")
        bounds.append((len(paths), len(paths) + len(inst.paths)))
        paths.extend(inst.paths)
        queries.extend([inst.query] * len(inst.paths))
    scores, cache = score_paths(params, kg, paths, queries)
    if not np.all(np.isfinite(scores)):
        raise NonFiniteError("non-finite path scores")
    d_scores = np.zeros_like(scores)
    M = len(instances)
    total = 0.0
    probs = np.empty(M)
    violations = 0
    for i, (inst, (a, b)) in enumerate(zip(instances, bounds)):
        res = pool(scores[a:b], pooling)
        loss, d_pooled = label_nll(res.pooled, inst.label)
        total += loss
        probs[i] = res.probability
        d_scores[a:b] = res.weights * (d_pooled / M)
        if check_sparsity:
            n = b - a
            expect = n if pooling.name in ("average", "logsumexp") else min(1 if pooling.name == "max" else pooling.k, n)
            if int(np.count_nonzero(res.weights)) != expect:
                violations += 1
    grads: dict[str, np.ndarray] = {}
    score_paths_backward(params, kg, cache, d_scores, grads)
    kinks = pre_activations(cache) if keep_kinks else None
    return BatchResult(total / M, grads, probs, violations, kinks)


def instance_loss(
    params: ModelParams,
    kg: KnowledgeGraph | None,
    instance: TrainInstance,
    pooling: PoolingKind = LSE,
) -> tuple[float, dict[str, np.ndarray]]:
    r = batch_loss(params, kg, [instance], pooling)
    return r.loss, r.grads


def dataset_loss(
    params: ModelParams,
    kg: KnowledgeGraph | None,
    dataset: Sequence[TrainInstance],
    pooling: PoolingKind,
    chunk: int = 256,
) -> float:
    """Mean instance loss over the whole dataset (no gradient kept)."""
    total = 0.0
    for i in range(0, len(dataset), chunk):
        part = dataset[i : i + chunk]
        total += batch_loss(params, kg, part, pooling).loss * len(part)
    return total / len(dataset)


def bpr_type_loss(
    params: ModelParams,
    kg: KnowledgeGraph,
    entity: int,
    observed_type: int,
    negative_type: int,
) -> tuple[float, dict[str, np.ndarray]]:
    """``-log sigmoid(score(e, observed) - score(e, negative))``.

    ``score(e, tau)`` is the dot product of the entity representation with
    the type embedding of ``tau``; the type table is the one the path
    encoder uses.
    """
    if "type_emb" not in params.arrays:
        raise ValueError("type ranking needs a shared model with type embeddings")
    if negative_type in kg.entity_types[entity]:
        raise ValueError("negative type is one of the entity's types")
    T = params.arrays["type_emb"]
    ev = _entity_rows(params, "", kg, np.array([entity]))[0]
    diff = float(ev @ T[observed_type] - ev @ T[negative_type])
    loss = _softplus(-diff)
    g = -sigmoid(-diff)
    grads: dict[str, np.ndarray] = {}
    gT = _grad_slot(grads, params, "type_emb")
    gT[observed_type] += g * ev
    gT[negative_type] -= g * ev
    d_ev = g * (T[observed_type] - T[negative_type])
    _entity_rows_backward(params, "", kg, np.array([entity]), d_ev[None, :], grads)
    return loss, grads


def sample_bpr_triples(kg: KnowledgeGraph, n: int, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """(entity, observed type, unobserved type) triples for the type-ranking task."""
    n_types = len(kg.types)
    eligible = [e for e, ts in enumerate(kg.entity_types) if ts and len(ts) < n_types]
    if not eligible:
        return []
    out = []
    for _ in range(n):
        e = eligible[int(rng.integers(len(eligible)))]
        ts = kg.entity_types[e]
        pos = ts[int(rng.integers(len(ts)))]
        others = [t for t in range(n_types) if t not in ts]
        out.append((e, pos, others[int(rng.integers(len(others)))]))
    return out


def _add_scaled(into: dict[str, np.ndarray], grads: dict[str, np.ndarray], w: float) -> None:
    for k, g in grads.items():
        if k in into:
            into[k] += w * g
        else:
            into[k] = w * g


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[tuple[int, float]]
    bpr_trace: list[tuple[int, float]] = field(default_factory=list)
    sparsity_violations: int = 0
    steps: int = 0


def train(
    kg: KnowledgeGraph,
    dataset: Sequence[TrainInstance],
    model_config: ModelConfig,
    config: TrainConfig,
    query_relations: Sequence[str],
    params: ModelParams | None = None,
) -> TrainResult:
    """Mini-batch Adam on the mean pooled NLL.

    Shared models take one step per batch over the whole dataset. Per-relation
    models train each query relation's block on its own slice of the data
    with its own Adam state. The trace records ``(step, mean batch loss)``.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if params is None:
        params = init_params(model_config, kg, query_relations, derive_rng(config.seed, "init"))
    if config.mtl_types and model_config.sharing != "shared":
        raise ValueError("the type-ranking task is only supported for shared models")

    result = TrainResult(params, [])
    if model_config.sharing == "shared":
        _run(kg, list(dataset), params, config, config.adam(), result)
    else:
        for q in range(len(query_relations)):
            part = [inst for inst in dataset if inst.query == q]
            if part:
                _run(kg, part, params, config, config.adam(), result)
    return result


def _run(
    kg: KnowledgeGraph,
    data: list[TrainInstance],
    params: ModelParams,
    config: TrainConfig,
    adam: AdamState,
    result: TrainResult,
) -> None:
    B = config.batch_size
    # shuffle streams are keyed by the query relations present, so a
    # one-relation per-relation run sees the same batches as a shared run
    stream = tuple(sorted({inst.query for inst in data}))
    last_good = params.copy()
    for epoch in range(config.epochs):
        order = derive_rng(config.seed, "shuffle", stream, epoch).permutation(len(data))
        for start in range(0, len(data), B):
            if config.max_steps is not None and result.steps >= config.max_steps:
                return
            batch = [data[i] for i in order[start : start + B]]
            try:
                res = batch_loss(params, kg, batch, config.pooling, check_sparsity=config.check_sparsity)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"{exc} at step {result.steps}", last_good, result.trace) from exc
            result.sparsity_violations += res.sparsity_violations
            grads = res.grads
            if not math.isfinite(res.loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss at step {result.steps}", last_good, result.trace)
            if config.mtl_types:
                rng = derive_rng(config.seed, "bpr", stream, result.steps)
                triples = sample_bpr_triples(kg, B, rng)
                if triples:
                    bpr_total = 0.0
                    bpr_grads: dict[str, np.ndarray] = {}
                    for e, pos, neg in triples:
                        l, g = bpr_type_loss(params, kg, e, pos, neg)
                        bpr_total += l
                        _add_scaled(bpr_grads, g, 1.0 / len(triples))
                    _add_scaled(grads, bpr_grads, config.mtl_weight)
                    result.bpr_trace.append((result.steps, bpr_total / len(triples)))
            last_good = params.copy()
            try:
                adam_step(params.arrays, grads, adam)
            except ValueError as exc:
                raise TrainingDiverged(str(exc), last_good, result.trace) from exc
            result.trace.append((result.steps, res.loss))
            result.steps += 1
