"""Recurrent path encoder, path scoring and compositional path-query scorers.

Parameter layout (row-vector convention, ``y @ W``)::

    rel_emb   (n_relations, d)     relation embeddings
    W_ih      (d, h)               input projection
    W_hh      (h, h)               recurrence, applied as W_hh @ h
    W_eh      (m, h)               entity projection (entity modes only)
    type_emb  (n_types, m)         type embeddings (type modes only)
    ent_emb   (n_entities, m)      entity embeddings (learned-entity modes)
    query     (n_query, h)         query-relation vectors

With ``sharing="per_relation"`` every array lives in a private block per
query relation, named ``b<q>/<array>``, and the block's ``query`` table has
a single row.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .kgraph import KnowledgeGraph, Path
from .numcore import DTYPE, glorot_uniform, sigmoid

ACTIVATIONS = ("sigmoid", "relu")
SHARING_MODES = ("per_relation", "shared")
ENTITY_MODES = ("none", "learned_entity", "type_sum", "entity_plus_type_sum")
PATHQUERY_VARIANTS = ("rnn_diag", "comp_transe", "comp_bilinear_diag")

MODEL_PRESETS = {
    "pathrnn": dict(sharing="per_relation", activation="sigmoid", entity_mode="none"),
    "single": dict(sharing="shared", activation="relu", entity_mode="none"),
    "single+ent": dict(sharing="shared", activation="relu", entity_mode="learned_entity"),
    "single+types": dict(sharing="shared", activation="relu", entity_mode="type_sum"),
    "single+ent+types": dict(sharing="shared", activation="relu", entity_mode="entity_plus_type_sum"),
}


class UnknownIdError(KeyError):
    pass


@dataclass
class ModelConfig:
    d: int = 250
    h: int = 250
    m: int = 50
    activation: str = "relu"
    sharing: str = "shared"
    entity_mode: str = "none"

    def __post_init__(self):
        if min(self.d, self.h, self.m) <= 0:
            raise ValueError("d, h and m must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"sharing must be one of {SHARING_MODES}")
        if self.entity_mode not in ENTITY_MODES:
            raise ValueError(f"entity_mode must be one of {ENTITY_MODES}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            base = dict(MODEL_PRESETS[name])
        except KeyError:
            raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_PRESETS)}") from None
        base.update(overrides)
        return cls(**base)

    @property
    def uses_entity_input(self) -> bool:
        return self.entity_mode != "none"

    @property
    def uses_types(self) -> bool:
        return self.entity_mode in ("type_sum", "entity_plus_type_sum")

    @property
    def uses_learned_entities(self) -> bool:
        return self.entity_mode in ("learned_entity", "entity_plus_type_sum")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    relations: list[str]
    query_relations: list[str]
    types: list[str] = field(default_factory=list)
    entities: list[str] = field(default_factory=list)
    # path-query models feed no entities into the recurrence even though they
    # carry an entity table
    pathquery: bool = False

    def prefix(self, q: int) -> str:
        return f"b{q}/" if self.config.sharing == "per_relation" else ""

    def query_vector(self, q: int) -> np.ndarray:
        if self.config.sharing == "per_relation":
            return self.arrays[f"b{q}/query"][0]
        return self.arrays["query"][q]

    def query_slot(self, q: int) -> tuple[str, int]:
        if self.config.sharing == "per_relation":
            return f"b{q}/query", 0
        return "query", q

    def block_names(self, q: int) -> list[str]:
        p = self.prefix(q)
        return sorted(n for n in self.arrays if n.startswith(p)) if p else sorted(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(
            ModelConfig(**self.config.to_dict()),
            {k: v.copy() for k, v in self.arrays.items()},
            list(self.relations),
            list(self.query_relations),
            list(self.types),
            list(self.entities),
            self.pathquery,
        )

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def _block_shapes(config: ModelConfig, n_rel: int, n_types: int, n_ent: int, n_query_rows: int) -> dict:
    d, h, m = config.d, config.h, config.m
    shapes = {"rel_emb": (n_rel, d), "W_ih": (d, h), "W_hh": (h, h), "query": (n_query_rows, h)}
    if config.uses_entity_input:
        shapes["W_eh"] = (m, h)
    if config.uses_types:
        shapes["type_emb"] = (n_types, m)
    if config.uses_learned_entities:
        shapes["ent_emb"] = (n_ent, m)
    return shapes


def init_params(
    config: ModelConfig,
    kg: KnowledgeGraph,
    query_relations: Sequence[str],
    rng: np.random.Generator,
) -> ModelParams:
    """Glorot-uniform initialisation of every array."""
    for q in query_relations:
        if q not in kg.relations:
            raise UnknownIdError(f"query relation {q!r} is not in the relation vocabulary")
    nq = len(query_relations)
    n_rel, n_types, n_ent = len(kg.relations), len(kg.types), kg.n_entities
    arrays: dict[str, np.ndarray] = {}
    if config.sharing == "shared":
        for name, shape in _block_shapes(config, n_rel, n_types, n_ent, nq).items():
            arrays[name] = glorot_uniform(rng, shape)
    else:
        for q in range(nq):
            for name, shape in _block_shapes(config, n_rel, n_types, n_ent, 1).items():
                arrays[f"b{q}/{name}"] = glorot_uniform(rng, shape)
    return ModelParams(
        config,
        arrays,
        kg.relations.names,
        list(query_relations),
        kg.types.names,
        kg.entities.names,
    )


# --------------------------------------------------------------------------
# entity representations


def _entity_rows(params: ModelParams, prefix: str, kg: KnowledgeGraph | None, ents: np.ndarray) -> np.ndarray:
    """Entity vectors for an integer array of entity ids (any shape)."""
    cfg = params.config
    out = np.zeros(ents.shape + (cfg.m,), dtype=DTYPE)
    if cfg.uses_types:
        if kg is None:
            raise ValueError("type-based entity modes need the knowledge graph")
        out += kg.type_incidence[ents] @ params.arrays[prefix + "type_emb"]
    if cfg.uses_learned_entities:
        out += params.arrays[prefix + "ent_emb"][ents]
    return out


def _entity_rows_backward(
    params: ModelParams,
    prefix: str,
    kg: KnowledgeGraph | None,
    ents: np.ndarray,
    d_rows: np.ndarray,
    grads: dict[str, np.ndarray],
) -> None:
    cfg = params.config
    ents = ents.ravel()
    d_rows = d_rows.reshape(-1, cfg.m)
    if cfg.uses_types:
        g = _grad_slot(grads, params, prefix + "type_emb")
        g += kg.type_incidence[ents].T @ d_rows
    if cfg.uses_learned_entities:
        g = _grad_slot(grads, params, prefix + "ent_emb")
        np.add.at(g, ents, d_rows)


def entity_vector(kg: KnowledgeGraph, params: ModelParams, entity: int, query_relation: int = 0) -> np.ndarray:
    """Representation of one entity.

    Sum of its type embeddings (zero vector when it has none), its own
    embedding, or both, depending on ``entity_mode``. ``query_relation`` picks
    the block in per-relation models.
    """
    if not params.config.uses_entity_input:
        raise ValueError("entity_vector needs an entity mode other than 'none'")
    if not 0 <= entity < kg.n_entities:
        raise UnknownIdError(f"entity id {entity} out of range")
    return _entity_rows(params, params.prefix(query_relation), kg, np.array([entity]))[0]


def _grad_slot(grads: dict[str, np.ndarray], params: ModelParams, name: str) -> np.ndarray:
    g = grads.get(name)
    if g is None:
        g = grads[name] = np.zeros_like(params.arrays[name])
    return g


# --------------------------------------------------------------------------
# recurrence


@dataclass
class _Trace:
    prefix: str
    rel_ids: np.ndarray          # (P, k)
    ent_ids: np.ndarray | None   # (P, k)
    ent_rows: list[np.ndarray]   # per step (P, m), empty without entity input
    pre: list[np.ndarray]        # per step pre-activation (P, h)
    hidden: list[np.ndarray]     # h_0 .. h_k, each (P, h)


def _activate(cfg: ModelConfig, z: np.ndarray) -> np.ndarray:
    if cfg.activation == "relu":
        return np.maximum(z, 0.0)
    return sigmoid(z)


def _activation_grad(cfg: ModelConfig, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if cfg.activation == "relu":
        return (z > 0.0).astype(DTYPE)
    return h * (1.0 - h)


def _forward(
    params: ModelParams,
    prefix: str,
    kg: KnowledgeGraph | None,
    rel_ids: np.ndarray,
    ent_ids: np.ndarray | None,
) -> _Trace:
    cfg = params.config
    A = params.arrays
    W_hh, W_ih, rel_emb = A[prefix + "W_hh"], A[prefix + "W_ih"], A[prefix + "rel_emb"]
    use_ent = cfg.uses_entity_input and not params.pathquery
    P, k = rel_ids.shape
    if rel_ids.size and (rel_ids.min() < 0 or rel_ids.max() >= rel_emb.shape[0]):
        raise UnknownIdError("relation id out of range")
    if use_ent:
        ent_rows_all = _entity_rows(params, prefix, kg, ent_ids)
        W_eh = A[prefix + "W_eh"]
    h = np.zeros((P, cfg.h), dtype=DTYPE)
    trace = _Trace(prefix, rel_ids, ent_ids, [], [], [h])
    for t in range(k):
        z = h @ W_hh.T + rel_emb[rel_ids[:, t]] @ W_ih
        if use_ent:
            e = ent_rows_all[:, t]
            z += e @ W_eh
            trace.ent_rows.append(e)
        h = _activate(cfg, z)
        trace.pre.append(z)
        trace.hidden.append(h)
    return trace


def _backward(
    params: ModelParams,
    kg: KnowledgeGraph | None,
    trace: _Trace,
    d_final: np.ndarray | None,
    grads: dict[str, np.ndarray],
    d_every: np.ndarray | None = None,
) -> None:
    """Back-propagate into ``grads``.

    ``d_final`` is the gradient on ``h_k``; ``d_every`` (if given) is added to
    the gradient of every ``h_t``, t >= 1, which is what a sum of hidden
    states needs.
    """
    cfg = params.config
    A = params.arrays
    pf = trace.prefix
    W_hh, W_ih, rel_emb = A[pf + "W_hh"], A[pf + "W_ih"], A[pf + "rel_emb"]
    use_ent = bool(trace.ent_rows)
    g_hh = _grad_slot(grads, params, pf + "W_hh")
    g_ih = _grad_slot(grads, params, pf + "W_ih")
    g_rel = _grad_slot(grads, params, pf + "rel_emb")
    if use_ent:
        W_eh = A[pf + "W_eh"]
        g_eh = _grad_slot(grads, params, pf + "W_eh")
        d_ent = np.zeros((trace.rel_ids.shape[0], trace.rel_ids.shape[1], cfg.m), dtype=DTYPE)
    k = trace.rel_ids.shape[1]
    dh = np.zeros_like(trace.hidden[-1]) if d_final is None else d_final.copy()
    for t in range(k - 1, -1, -1):
        if d_every is not None:
            dh = dh + d_every
        dz = dh * _activation_grad(cfg, trace.pre[t], trace.hidden[t + 1])
        g_hh += dz.T @ trace.hidden[t]
        rel_rows = trace.rel_ids[:, t]
        g_ih += rel_emb[rel_rows].T @ dz
        np.add.at(g_rel, rel_rows, dz @ W_ih.T)
        if use_ent:
            g_eh += trace.ent_rows[t].T @ dz
            d_ent[:, t] = dz @ W_eh.T
        dh = dz @ W_hh
    if use_ent:
        _entity_rows_backward(params, pf, kg, trace.ent_ids, d_ent, grads)


# --------------------------------------------------------------------------
# single-path API


@dataclass
class PathEncoding:
    path: Path
    query_relation: int
    trace: _Trace

    @property
    def y(self) -> np.ndarray:
        return self.trace.hidden[-1][0]

    @property
    def hidden_states(self) -> list[np.ndarray]:
        return [h[0] for h in self.trace.hidden[1:]]

    @property
    def pre_activations(self) -> list[np.ndarray]:
        return [z[0] for z in self.trace.pre]

    @property
    def entity_vectors(self) -> list[np.ndarray]:
        return [e[0] for e in self.trace.ent_rows]

    def __len__(self) -> int:
        return len(self.trace.pre)


def encode_path(
    params: ModelParams,
    path: Path,
    query_relation: int,
    kg: KnowledgeGraph | None = None,
) -> PathEncoding:
    """Run the recurrence over one path; ``y`` is the last hidden state."""
    if not 0 <= query_relation < len(params.query_relations):
        raise UnknownIdError(f"query relation id {query_relation} out of range")
    rel = np.array([path.relations], dtype=np.int64)
    ent = np.array([path.entities], dtype=np.int64)
    if params.config.uses_entity_input and kg is not None:
        if ent.max() >= kg.n_entities or ent.min() < 0:
            raise UnknownIdError("entity id out of range")
    trace = _forward(params, params.prefix(query_relation), kg, rel, ent)
    return PathEncoding(path, query_relation, trace)


def encode_path_backward(
    params: ModelParams,
    encoding: PathEncoding,
    d_y: np.ndarray,
    grads: dict[str, np.ndarray],
    kg: KnowledgeGraph | None = None,
) -> dict[str, np.ndarray]:
    _backward(params, kg, encoding.trace, np.asarray(d_y, dtype=DTYPE)[None, :], grads)
    return grads


def score_path(params: ModelParams, encoding: PathEncoding, query_relation: int | None = None) -> float:
    q = encoding.query_relation if query_relation is None else query_relation
    return float(np.dot(encoding.y, params.query_vector(q)))


# --------------------------------------------------------------------------
# batched scoring (training / evaluation hot path)


@dataclass
class ScoreCache:
    groups: list[tuple[np.ndarray, np.ndarray, _Trace]] = field(default_factory=list)


def score_paths(
    params: ModelParams,
    kg: KnowledgeGraph | None,
    paths: Sequence[Path],
    queries: Sequence[int],
) -> tuple[np.ndarray, ScoreCache]:
    """Scores of many (path, query relation) items.

    Items are grouped by (parameter block, path length) and each group runs
    as one matrix recurrence; no padding is involved.
    """
    groups: dict[tuple[str, int], list[int]] = {}
    for i, (p, q) in enumerate(zip(paths, queries)):
        groups.setdefault((params.prefix(q), len(p)), []).append(i)
    scores = np.empty(len(paths), dtype=DTYPE)
    cache = ScoreCache()
    for key in sorted(groups):
        idx = np.array(groups[key], dtype=np.int64)
        rel = np.array([paths[i].relations for i in idx], dtype=np.int64)
        ent = np.array([paths[i].entities for i in idx], dtype=np.int64)
        trace = _forward(params, key[0], kg, rel, ent)
        qs = np.array([queries[i] for i in idx], dtype=np.int64)
        qvec = np.stack([params.query_vector(q) for q in qs])
        scores[idx] = np.sum(trace.hidden[-1] * qvec, axis=1)
        cache.groups.append((idx, qs, trace))
    return scores, cache


def score_paths_backward(
    params: ModelParams,
    kg: KnowledgeGraph | None,
    cache: ScoreCache,
    d_scores: np.ndarray,
    grads: dict[str, np.ndarray],
) -> dict[str, np.ndarray]:
    for idx, qs, trace in cache.groups:
        ds = d_scores[idx]
        if not np.any(ds):
            continue
        y = trace.hidden[-1]
        qvec = np.stack([params.query_vector(q) for q in qs])
        for j, q in enumerate(qs):
            name, row = params.query_slot(int(q))
            _grad_slot(grads, params, name)[row] += ds[j] * y[j]
        _backward(params, kg, trace, ds[:, None] * qvec, grads)
    return grads


def pre_activations(cache: ScoreCache) -> np.ndarray:
    """All cached pre-activations, flattened (for ReLU-kink detection)."""
    parts = [z.ravel() for _, _, tr in cache.groups for z in tr.pre]
    return np.concatenate(parts) if parts else np.zeros(0)


# --------------------------------------------------------------------------
# path queries


def init_pathquery_params(
    entities: Sequence[str],
    relations: Sequence[str],
    dim: int,
    rng: np.random.Generator,
) -> ModelParams:
    """Parameters for answering path queries: d = h = m = ``dim``."""
    cfg = ModelConfig(d=dim, h=dim, m=dim, activation="relu", sharing="shared", entity_mode="learned_entity")
    arrays = {
        "rel_emb": glorot_uniform(rng, (len(relations), dim)),
        "W_ih": glorot_uniform(rng, (dim, dim)),
        "W_hh": glorot_uniform(rng, (dim, dim)),
        "ent_emb": glorot_uniform(rng, (len(entities), dim)),
    }
    return ModelParams(cfg, arrays, list(relations), [], [], list(entities), pathquery=True)


@dataclass
class PathQueryCache:
    variant: str
    groups: list = field(default_factory=list)


def pathquery_scores(
    params: ModelParams,
    sources: Sequence[int],
    relation_seqs: Sequence[Sequence[int]],
    targets: Sequence[int],
    variant: str,
) -> tuple[np.ndarray, PathQueryCache]:
    """Batched path-query scores.

    ``rnn_diag``: ``sum_i x_s[i] * H[i] * x_t[i]`` with ``H`` the sum of all
    hidden states; ``comp_transe``: ``-||x_s + sum_t w_t - x_t||^2``;
    ``comp_bilinear_diag``: ``sum_i x_s[i] * prod_t w_t[i] * x_t[i]``.
    """
    if variant not in PATHQUERY_VARIANTS:
        raise ValueError(f"variant must be one of {PATHQUERY_VARIANTS}")
    A = params.arrays
    E, R = A["ent_emb"], A["rel_emb"]
    if variant == "rnn_diag" and not (E.shape[1] == params.config.h):
        raise ValueError(f"entity dim {E.shape[1]} != hidden dim {params.config.h}")
    if variant != "rnn_diag" and E.shape[1] != R.shape[1]:
        raise ValueError(f"entity dim {E.shape[1]} != relation dim {R.shape[1]}")
    groups: dict[int, list[int]] = {}
    for i, seq in enumerate(relation_seqs):
        if len(seq) == 0:
            raise ValueError("empty relation sequence")
        groups.setdefault(len(seq), []).append(i)
    out = np.empty(len(relation_seqs), dtype=DTYPE)
    cache = PathQueryCache(variant)
    for k in sorted(groups):
        idx = np.array(groups[k], dtype=np.int64)
        rel = np.array([list(relation_seqs[i]) for i in idx], dtype=np.int64)
        s = np.asarray(sources, dtype=np.int64)[idx]
        t = np.asarray(targets, dtype=np.int64)[idx]
        xs, xt = E[s], E[t]
        if variant == "rnn_diag":
            trace = _forward(params, "", None, rel, None)
            H = np.sum(trace.hidden[1:], axis=0)
            # (xs * xt) first so swapping source and target is bit-exact
            out[idx] = np.sum((xs * xt) * H, axis=1)
            cache.groups.append((idx, s, t, rel, trace, H))
        elif variant == "comp_transe":
            v = xs + R[rel].sum(axis=1) - xt
            out[idx] = -np.sum(v * v, axis=1)
            cache.groups.append((idx, s, t, rel, v))
        else:
            prod = np.prod(R[rel], axis=1)
            out[idx] = np.sum((xs * xt) * prod, axis=1)
            cache.groups.append((idx, s, t, rel, prod))
    return out, cache


def pathquery_backward(
    params: ModelParams,
    cache: PathQueryCache,
    d_scores: np.ndarray,
    grads: dict[str, np.ndarray],
) -> dict[str, np.ndarray]:
    A = params.arrays
    E, R = A["ent_emb"], A["rel_emb"]
    g_ent = _grad_slot(grads, params, "ent_emb")
    for grp in cache.groups:
        idx, s, t, rel = grp[:4]
        g = d_scores[idx][:, None]
        xs, xt = E[s], E[t]
        if cache.variant == "rnn_diag":
            trace, H = grp[4], grp[5]
            np.add.at(g_ent, s, g * H * xt)
            np.add.at(g_ent, t, g * H * xs)
            _backward(params, None, trace, None, grads, d_every=g * xs * xt)
        elif cache.variant == "comp_transe":
            dv = -2.0 * g * grp[4]
            np.add.at(g_ent, s, dv)
            np.add.at(g_ent, t, -dv)
            g_rel = _grad_slot(grads, params, "rel_emb")
            for j in range(rel.shape[1]):
                np.add.at(g_rel, rel[:, j], dv)
        else:
            prod = grp[4]
            np.add.at(g_ent, s, g * prod * xt)
            np.add.at(g_ent, t, g * prod * xs)
            dprod = g * xs * xt
            W = R[rel]                                  # (P, k, dim)
            k = W.shape[1]
            g_rel = _grad_slot(grads, params, "rel_emb")
            for j in range(k):
                others = np.prod(np.delete(W, j, axis=1), axis=1) if k > 1 else np.ones_like(prod)
                np.add.at(g_rel, rel[:, j], dprod * others)
    return grads


def pathquery_score(
    params: ModelParams,
    source: int,
    relations: Sequence[int],
    target: int,
    variant: str,
) -> float:
    scores, _ = pathquery_scores(params, [source], [list(relations)], [target], variant)
    return float(scores[0])
