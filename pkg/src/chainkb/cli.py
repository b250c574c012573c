"""``chainkb`` command line: synth, paths, train, eval, pathquery.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path as FsPath

from . import checkpoint
from .evaluation import evaluate
from .kgraph import (
    DEFAULT_WALKS,
    MAX_PATH_LEN,
    KnowledgeGraph,
    PathSource,
    format_path,
    load_entity_types,
    load_triples,
    read_pairs,
    read_paths,
)
from .numcore import derive_rng
from .pathmodel import MODEL_PRESETS, PATHQUERY_VARIANTS, ModelConfig, init_pathquery_params
from .pathquery import format_query, query_mean_quantile, read_queries, ring_queries, train_pathquery
from .pooling import PoolingKind
from .synthkg import SynthSpec, generate
from .training import TrainConfig, TrainingDiverged, build_dataset, train

log = logging.getLogger("chainkb")


def _write_echo(target: FsPath, args: argparse.Namespace) -> None:
    echo = {k: (str(v) if isinstance(v, FsPath) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    echo["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    target.write_text(json.dumps(echo, indent=2, sort_keys=True, default=str) + "\n")


def _echo_path(out: FsPath) -> FsPath:
    return out / "config.json" if out.is_dir() else out.with_name(out.name + ".config.json")


def _config_without_time(args: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, FsPath) else v) for k, v in sorted(vars(args).items()) if k != "func"}


def _load_kg(kg_path, types_path=None) -> KnowledgeGraph:
    with open(kg_path, encoding="utf-8") as f:
        kg = load_triples(f)
    if types_path:
        with open(types_path, encoding="utf-8") as f:
            kg = load_entity_types(f, kg)
    return kg


def _resolve_rows(kg: KnowledgeGraph, files) -> list[tuple[str, ...]]:
    rows = []
    for p in files or []:
        with open(p, encoding="utf-8") as f:
            rows.extend(read_pairs(f))
    return rows


# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = FsPath(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.pathquery:
        data = ring_queries(derive_rng(args.seed, "synth-pathquery"), n_entities=args.entities)
        for name, qs in (("queries_train.tsv", data.train), ("queries_test.tsv", data.test)):
            with open(out / name, "w", encoding="utf-8") as f:
                for q in qs:
                    f.write(format_query(q, data.entities, data.relations) + "\n")
    else:
        if args.spec:
            spec = SynthSpec.from_dict(json.loads(FsPath(args.spec).read_text()))
        else:
            spec = SynthSpec.default(noise=args.noise)
        generate(spec, derive_rng(args.seed, "synth")).write(out)
    _write_echo(out / "config.json", args)
    return 0


def cmd_paths(args) -> int:
    kg = _load_kg(args.kg)
    rows = _resolve_rows(kg, args.pairs)
    qrels = set(args.query_relations.split(",")) if args.query_relations else {r[1] for r in rows if len(r) >= 3}
    qids = [kg.relations.id(q) for q in sorted(qrels) if q in kg.relations]
    source = PathSource(kg, args.seed, args.max_len, args.walks, qids)
    pairs = []
    for r in rows:
        s, t = r[0], (r[1] if len(r) == 2 else r[2])
        if s not in kg.entities or t not in kg.entities:
            log.warning("pair (%s, %s) has an unknown entity; skipped", s, t)
            continue
        pairs.append((kg.entities.id(s), kg.entities.id(t)))
    out = FsPath(args.out)
    with open(out, "w", encoding="utf-8") as f:
        for s, t in sorted(set(pairs)):
            for p in source(s, t):
                f.write(format_path(kg, p) + "\n")
    _write_echo(_echo_path(out), args)
    return 0


def _path_source(args, kg, qids) -> PathSource:
    pre = None
    if getattr(args, "paths", None):
        with open(args.paths, encoding="utf-8") as f:
            pre = read_paths(f, kg)
    return PathSource(kg, args.seed, args.max_len, args.walks, qids, pre)


def cmd_train(args) -> int:
    kg = _load_kg(args.kg, args.types)
    rows = _resolve_rows(kg, [args.train] if args.train else [])
    if args.query_relations:
        queries = args.query_relations.split(",")
    else:
        queries = list(dict.fromkeys(r[1] for r in rows if len(r) >= 3))
    if not queries:
        raise ValueError("no query relations: pass --train with a relation column or --query-relations")
    missing = [q for q in queries if q not in kg.relations]
    if missing:
        raise ValueError(f"query relations not in the graph: {missing}")
    qids = [kg.relations.id(q) for q in queries]
    dims = dict(zip("dhm", (int(x) for x in args.dims.split(","))))
    model_cfg = ModelConfig.preset(args.model, **dims)
    pooling = PoolingKind.parse(args.pool)
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        negatives_per_positive=args.negatives,
        pooling=pooling,
        seed=args.seed,
        learning_rate=args.lr,
        mtl_types=args.mtl_types,
        mtl_weight=args.mtl_weight,
    )
    source = _path_source(args, kg, qids)
    explicit = []
    for r in rows:
        if len(r) == 4 and r[3] == "0" and r[0] in kg.entities and r[2] in kg.entities and r[1] in queries:
            explicit.append((kg.entities.id(r[0]), queries.index(r[1]), kg.entities.id(r[2])))
    data, stats = build_dataset(
        kg, queries, tcfg, derive_rng(args.seed, "dataset"), source, args.max_len, explicit
    )
    log.info("dataset: %s", stats)
    if not data:
        raise ValueError("training set is empty (no query triple has a path)")
    out = FsPath(args.out)
    extra = {
        "train": tcfg.to_dict(),
        "paths": {"max_len": args.max_len, "walks": args.walks, "seed": args.seed},
        "model": args.model,
    }
    try:
        result = train(kg, data, model_cfg, tcfg, queries)
    except TrainingDiverged as exc:
        checkpoint.save(exc.last_good, out, extra)
        raise RuntimeError(f"{exc}; last good parameters written to {out}") from exc
    checkpoint.save(result.params, out, extra)
    loss_csv = FsPath(args.loss_csv) if args.loss_csv else out.with_name(out.name + ".loss.csv")
    with open(loss_csv, "w", encoding="utf-8") as f:
        f.write("step,mean_loss\n")
        for step, loss in result.trace:
            f.write(f"{step},{loss!r}\n")
    _write_echo(_echo_path(out), args)
    return 0


def cmd_eval(args) -> int:
    params, extra = checkpoint.load(args.ckpt)
    kg = _load_kg(args.kg, args.types)
    if params.relations != kg.relations.names:
        raise ValueError("checkpoint relation vocabulary does not match the graph")
    if params.config.uses_types and params.types != kg.types.names:
        raise ValueError("checkpoint type vocabulary does not match --types")
    pooling = PoolingKind.parse(args.pool or extra.get("train", {}).get("pooling", "lse"))
    qids = [kg.relations.id(q) for q in params.query_relations]
    source = _path_source(args, kg, qids)
    rows = []
    skipped = 0
    for r in _resolve_rows(kg, [args.test]):
        if len(r) < 3:
            raise ValueError("test file needs source<TAB>relation<TAB>target[<TAB>label] rows")
        label = int(r[3]) if len(r) == 4 else 1
        if r[1] not in params.query_relations or r[0] not in kg.entities or r[2] not in kg.entities:
            skipped += 1
            continue
        rows.append((kg.entities.id(r[0]), params.query_relations.index(r[1]), kg.entities.id(r[2]), label))
    report = evaluate(params, kg, rows, pooling, source)
    report["skipped_rows"] = skipped
    report["config"] = _config_without_time(args)
    report["model"] = {"config": params.config.to_dict(), "checkpoint_extra": extra}
    out = FsPath(args.report)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_echo(_echo_path(out), args)
    print(f"MAP {report['map']}")
    return 0


def cmd_pathquery(args) -> int:
    names_e: dict[str, None] = {}
    names_r: dict[str, None] = {}
    for p in (args.train, args.test):
        with open(p, encoding="utf-8") as f:
            for line in f:
                parts = line.rstrip("\n").split("\t")
                if len(parts) == 3:
                    names_e.setdefault(parts[0])
                    names_e.setdefault(parts[2])
                    for r in parts[1].split(","):
                        names_r.setdefault(r)
    entities, relations = sorted(names_e), sorted(names_r)
    with open(args.train, encoding="utf-8") as f:
        train_q = read_queries(f, entities, relations)
    with open(args.test, encoding="utf-8") as f:
        test_q = read_queries(f, entities, relations)
    answers: dict = {}
    for q in train_q + test_q:
        answers.setdefault((q.source, q.relations), set()).add(q.target)
    params = init_pathquery_params(entities, relations, args.dim, derive_rng(args.seed, "pathquery-init"))
    control = query_mean_quantile(params, test_q, args.variant, answers)
    trace = train_pathquery(
        params, train_q, args.variant, args.seed, epochs=args.epochs, learning_rate=args.lr, answers=answers
    )
    mq = query_mean_quantile(params, test_q, args.variant, answers)
    report = {
        "variant": args.variant,
        "mean_quantile": mq,
        "untrained_mean_quantile": control,
        "n_train": len(train_q),
        "n_test": len(test_q),
        "final_loss": trace[-1][1] if trace else None,
        "config": _config_without_time(args),
    }
    out = FsPath(args.report)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.out:
        checkpoint.save(params, args.out, {"variant": args.variant})
    _write_echo(_echo_path(out), args)
    print(f"MQ {mq}")
    return 0


# --------------------------------------------------------------------------


def _path_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-len", type=int, default=MAX_PATH_LEN)
    p.add_argument("--walks", type=int, default=DEFAULT_WALKS)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chainkb", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-rule knowledge graph")
    p.add_argument("--spec", help="JSON generator spec (default: built-in 2-rule spec)")
    p.add_argument("--noise", type=float, default=0.05, help="label noise for the built-in spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pathquery", action="store_true", help="emit a ring path-query benchmark instead")
    p.add_argument("--entities", type=int, default=50, help="ring size for --pathquery")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("paths", help="extract paths between entity pairs by random walks")
    p.add_argument("--kg", required=True)
    p.add_argument("--pairs", required=True, action="append", help="pairs/split file (repeatable)")
    p.add_argument("--query-relations", help="comma-separated; default: relation column of --pairs")
    p.add_argument("--out", required=True)
    _path_flags(p)
    p.set_defaults(func=cmd_paths)

    p = sub.add_parser("train", help="train a path model")
    p.add_argument("--kg", required=True)
    p.add_argument("--types")
    p.add_argument("--paths", help="precomputed paths.tsv; missing pairs are sampled")
    p.add_argument("--train", help="split file naming query relations (label-0 rows become negatives)")
    p.add_argument("--query-relations", help="comma-separated query relations")
    p.add_argument("--model", choices=sorted(MODEL_PRESETS), default="single")
    p.add_argument("--pool", default="lse", help="max | topk:K | avg | lse")
    p.add_argument("--dims", default="250,250,50", help="d,h,m")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--negatives", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--mtl-types", action="store_true")
    p.add_argument("--mtl-weight", type=float, default=0.1)
    p.add_argument("--loss-csv")
    p.add_argument("--out", required=True)
    _path_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank test pairs and report AP / MAP")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--types")
    p.add_argument("--paths")
    p.add_argument("--test", required=True)
    p.add_argument("--pool", help="default: the pooling used in training")
    p.add_argument("--report", required=True)
    _path_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pathquery", help="train and score a path-query model")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--variant", choices=PATHQUERY_VARIANTS, default="rnn_diag")
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--out", help="optional checkpoint")
    p.set_defaults(func=cmd_pathquery)
    return ap


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every module error maps to exit 1
        print(f"chainkb {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
