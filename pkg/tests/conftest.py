import numpy as np
import pytest

from chainkb.kgraph import KnowledgeGraph, Path, Vocab
from chainkb.pathmodel import ModelConfig, init_params
from chainkb.pooling import MAX, PoolingKind
from chainkb.training import TrainInstance, batch_loss
from chainkb.pathmodel import pre_activations, score_paths


def toy_graph(n_entities=8, n_types=4, seed=0):
    """Small graph with relations a, b, c, two query relations and random types."""
    rng = np.random.default_rng(seed)
    ents = [f"e{i}" for i in range(n_entities)]
    triples = []
    for r in ("a", "b", "c"):
        for _ in range(n_entities):
            s, t = rng.integers(n_entities, size=2)
            if s != t:
                triples.append((ents[s], r, ents[t]))
    triples += [(ents[0], "q0", ents[1]), (ents[2], "q1", ents[3])]
    kg = KnowledgeGraph.from_triples(triples, entities=ents)
    kg.types = Vocab(f"T{i}" for i in range(n_types))
    kg.entity_types = []
    for e in range(n_entities):
        k = 0 if e == n_entities - 1 else int(rng.integers(1, 3))
        kg.entity_types.append(tuple(sorted(rng.choice(n_types, size=k, replace=False).tolist())))
    return kg


def random_path(rng, kg, source, target, length):
    n_rel = len(kg.relations)
    steps = []
    for i in range(length):
        e = target if i == length - 1 else int(rng.integers(kg.n_entities))
        steps.append((int(rng.integers(n_rel)), e))
    return Path(source, tuple(steps))


def random_instance(rng, kg, query=0, label=1, n_paths=3, lengths=(1, 4)):
    s, t = (int(x) for x in rng.choice(kg.n_entities, size=2, replace=False))
    paths = tuple(random_path(rng, kg, s, t, int(rng.integers(lengths[0], lengths[1] + 1))) for _ in range(n_paths))
    return TrainInstance(s, t, query, label, paths)


def model_for(kg, rng, **cfg):
    config = ModelConfig(**{"d": 8, "h": 8, "m": 4, **cfg})
    return init_params(config, kg, ["q0", "q1"], rng)


def kink_fn_for(params, kg, instances, pooling: PoolingKind):
    """Sign pattern marking ReLU kinks and top-k membership changes."""

    def fn(_arrays):
        parts = []
        r = batch_loss(params, kg, instances, pooling, keep_kinks=True)
        if params.config.activation == "relu":
            parts.append(r.kinks)
        if pooling.name in ("max", "top_k"):
            paths = [p for inst in instances for p in inst.paths]
            qs = [inst.query for inst in instances for _ in inst.paths]
            scores, _ = score_paths(params, kg, paths, qs)
            pos = 0
            for inst in instances:
                s = scores[pos : pos + len(inst.paths)]
                k = 1 if pooling.name == "max" else min(pooling.k, len(s))
                mask = np.zeros(len(s))
                mask[np.argsort(-s, kind="stable")[:k]] = 1.0
                parts.append(mask - 0.5)
                pos += len(s)
        return np.concatenate(parts) if parts else np.zeros(1)

    return fn


@pytest.fixture
def kg():
    return toy_graph()
