"""Small end-to-end experiment drivers on synthetic planted-rule graphs.

Used by the acceptance suite and handy from a REPL::

    prep = prepare(SynthSpec.default(), seed=0)
    out = fit_and_evaluate(prep, ModelConfig.preset("single", d=16, h=16, m=8), TrainConfig(epochs=50))
    out["report"]["map"]
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .evaluation import evaluate
from .kgraph import KnowledgeGraph, PathSource
from .numcore import derive_rng
from .pathmodel import ModelConfig
from .synthkg import SynthDataset, SynthSpec, generate
from .training import TrainConfig, TrainInstance, build_dataset, dataset_loss, train

DEFAULT_MAX_LEN = 4
DEFAULT_WALKS = 2000


@dataclass
class Prepared:
    seed: int
    synth: SynthDataset
    kg: KnowledgeGraph
    queries: list[str]
    source: PathSource
    train_rows: list[tuple[int, int, int, int]]
    dev_rows: list[tuple[int, int, int, int]]
    test_rows: list[tuple[int, int, int, int]]


def _rows(prep_kg: KnowledgeGraph, queries: list[str], split) -> list[tuple[int, int, int, int]]:
    return [
        (prep_kg.entities.id(lt.source), queries.index(lt.relation), prep_kg.entities.id(lt.target), lt.label)
        for lt in split
    ]


def prepare(spec: SynthSpec, seed: int, max_len: int = DEFAULT_MAX_LEN, walks: int = DEFAULT_WALKS) -> Prepared:
    synth = generate(spec, derive_rng(seed, "synth"))
    kg = synth.kg
    queries = synth.head_relations
    qids = [kg.relations.id(q) for q in queries if q in kg.relations]
    source = PathSource(kg, seed, max_len, walks, qids)
    return Prepared(
        seed,
        synth,
        kg,
        queries,
        source,
        _rows(kg, queries, synth.splits["train"]),
        _rows(kg, queries, synth.splits["dev"]),
        _rows(kg, queries, synth.splits["test"]),
    )


def training_set(
    prep: Prepared,
    config: TrainConfig,
    fraction: float = 1.0,
) -> list[TrainInstance]:
    explicit = [(s, q, t) for s, q, t, y in prep.train_rows if y == 0]
    data, _ = build_dataset(
        prep.kg,
        prep.queries,
        config,
        derive_rng(prep.seed, "dataset"),
        prep.source,
        prep.source.max_len,
        explicit,
    )
    if fraction < 1.0:
        rng = derive_rng(prep.seed, "subsample")
        keep = rng.random(len(data)) < fraction
        # keep at least one positive per query relation
        for q in range(len(prep.queries)):
            if not any(k and d.query == q and d.label == 1 for k, d in zip(keep, data)):
                first = next((i for i, d in enumerate(data) if d.query == q and d.label == 1), None)
                if first is not None:
                    keep[first] = True
        data = [d for d, k in zip(data, keep) if k]
    return data


def fit_and_evaluate(
    prep: Prepared,
    model_config: ModelConfig,
    config: TrainConfig,
    fraction: float = 1.0,
    split: str = "test",
    data: list[TrainInstance] | None = None,
) -> dict:
    if data is None:
        data = training_set(prep, config, fraction)
    result = train(prep.kg, data, model_config, config, prep.queries)
    rows = {"test": prep.test_rows, "dev": prep.dev_rows, "train": prep.train_rows}[split]
    report = evaluate(result.params, prep.kg, rows, config.pooling, prep.source)
    return {
        "report": report,
        "result": result,
        "data": data,
        "train_loss": dataset_loss(result.params, prep.kg, data, config.pooling),
    }


def low_data_spec(noise: float = 0.0) -> SynthSpec:
    """Two head relations whose rule bodies share relations."""
    return SynthSpec(
        rules=[
            _rule("h_a", ("rel0", "rel1"), noise),
            _rule("h_b", ("rel0", "rel1", "rel2"), noise),
        ]
    )


def conditional_spec(noise: float = 0.0) -> SynthSpec:
    """One type-conditional rule; evaluation includes chained false pairs."""
    return replace(
        SynthSpec(rules=[_rule("h_conditional", ("_inv:rel2", "rel3"), noise, "T0")]),
        chain_negatives=True,
    )


def _rule(head, body, noise, required_type=None):
    from .synthkg import PlantedRule

    return PlantedRule(head, tuple(body), required_type, noise)


def mean(xs) -> float:
    return float(np.mean(list(xs)))
