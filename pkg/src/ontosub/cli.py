"""Command-line entry point: ``ontosub {extract,train,eval,synth,inspect}``.

Exit codes: 0 ok, 2 input error, 3 numeric failure. Logs go to stderr;
data goes to stdout or files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .autodiff import CheckpointError, NonFiniteError, load_checkpoint, save_checkpoint
from .config import RunConfig, config_keys, load_config
from .evaluation import MetricReport, evaluate, split_edges, test_metrics
from .graph import LINK_PREDICTION, DatasetError, degree_stats, load_dataset, write_dataset
from .ontology import SchemaError, extract_all, load_schema
from .synth import SynthSpec, synth_hin
from .training import NonFiniteLossError, Run, train

log = logging.getLogger("ontosub")

EXIT_INPUT = 2
EXIT_NUMERIC = 3
HASH_TENSOR = "meta.config_hash"


class InputError(Exception):
    pass


def _dataset(cfg: RunConfig):
    if cfg.data:
        g, schema, split = load_dataset(cfg.data)
    else:
        g, schema, split = synth_hin(cfg.synth_spec())
    if cfg.schema_path:
        schema = load_schema(cfg.schema_path, g.node_types, g.edge_types)
    if cfg.task == LINK_PREDICTION and (split is None or split.task != LINK_PREDICTION):
        name = cfg.lp_edge_type or g.edge_types.names[next(t for a, b, t in schema.edges if schema.target in (a, b))]
        split = split_edges(g, g.edge_types.id(name), cfg.lp_split, cfg.seed)
    if split is None:
        raise InputError("dataset has no split.json for node classification")
    if split.task != cfg.task:
        raise InputError(f"split.json is for {split.task}, config asks for {cfg.task}")
    return g, schema, split


def _hash_tensor(h: str) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(h), dtype=np.uint8).astype(np.float64)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags below override its keys")
    group = p.add_argument_group("config keys")
    for key, f in config_keys():
        kw: dict = {"dest": f"cfg_{key}", "default": None, "help": f"{f.description} (default: {f.default})"}
        ann = f.annotation
        if ann is bool:
            kw["type"] = lambda s: s.lower() in ("1", "true", "yes", "on")
            kw["metavar"] = "BOOL"
        elif ann in (int, float):
            kw["type"] = ann
        elif key in ("clamp", "lp_split"):
            kw["type"] = float
            kw["nargs"] = 2 if key == "clamp" else 3
        elif key == "synth":
            kw["type"] = json.loads
            kw["metavar"] = "JSON"
        group.add_argument(f"--{key.replace('_', '-')}", **kw)


def _resolve(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    return load_config(args.config, overrides)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    spec_kw = {f.name: getattr(args, f.name) for f in fields(SynthSpec) if getattr(args, f.name, None) is not None}
    g, schema, split = synth_hin(SynthSpec(**spec_kw))
    write_dataset(args.out, g, schema, split)
    log.info("wrote %d nodes, %d edges to %s", g.num_nodes, g.num_edges, args.out)
    return 0


def cmd_inspect(args) -> int:
    g, schema, split = load_dataset(args.data)
    stats = degree_stats(g)
    stats["total"] = {"nodes": g.num_nodes, "edges": g.num_edges}
    stats["feature_dim"] = g.feature_dim
    stats["featureless_nodes"] = int((~g.has_features).sum())
    if split is not None:
        stats["split"] = {"task": split.task, "train": len(split.train), "val": len(split.val), "test": len(split.test)}
    print(json.dumps(stats, indent=2))
    return 0


def cmd_extract(args) -> int:
    root = Path(args.data)
    g, schema, _ = load_dataset(root)
    if args.schema:
        if not Path(args.schema).is_file():
            raise InputError(f"schema file not found: {args.schema}")
        schema = load_schema(args.schema, g.node_types, g.edge_types)
    ext = extract_all(g, schema, cap=args.cap, seed=args.seed, threads=args.threads)
    out = sys.stdout
    oid = g.original_ids
    total = 0
    for a in sorted(ext.instances):
        for o in ext.instances[a]:
            out.write(f"{oid[a]}\t{','.join(oid[v] for v in o.assignment)}\n")
            total += 1
    out.flush()
    print(f"anchors={len(ext.instances)} instances={total} capped={ext.capped}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    g, schema, split = _dataset(cfg)
    tcfg = cfg.train_config()
    run = Run(g, schema, split, tcfg)
    n_params = sum(t.data.size for _, t in run.model.parameters())
    if args.dry_run:
        print(f"parameters={n_params}")
        return 0
    log.info("training %d parameters on %d nodes", n_params, g.num_nodes)
    run, report = train(g, schema, split, tcfg, run=run)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    state = run.model.state()
    state[HASH_TENSOR] = _hash_tensor(cfg.hash())
    save_checkpoint(out / "checkpoint.bin", state)
    (out / "report.csv").write_text(report.to_csv(cfg.record_time))
    (out / "config.json").write_text(cfg.to_json())
    log.info("best epoch %d of %d; wrote %s", report.best_epoch, len(report.rows), out)
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args) if (args.config or any(v is not None for k, v in vars(args).items() if k.startswith("cfg_"))) \
        else None
    out_default = Path(cfg.out if cfg else "run")
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out_default / "checkpoint.bin"
    if cfg is None:
        cfg_file = ckpt_path.parent / "config.json"
        if not cfg_file.is_file():
            raise InputError(f"no --config given and {cfg_file} is missing")
        cfg = load_config(cfg_file, {})
    state = load_checkpoint(ckpt_path)
    stored = state.pop(HASH_TENSOR, None)
    if stored is None or not np.array_equal(stored, _hash_tensor(cfg.hash())):
        raise InputError(f"checkpoint {ckpt_path} was trained with a different config")
    g, schema, split = _dataset(cfg)
    tcfg = cfg.train_config()
    run = Run(g, schema, split, tcfg)
    try:
        run.model.load_state(state)
    except KeyError as exc:
        raise InputError(str(exc)) from None
    seeds = [cfg.seed + r for r in range(cfg.runs)]
    report = evaluate(g, schema, split, tcfg, seeds, first_run=run, scorer=cfg.lp_scorer)
    extra = {"seeds": seeds}
    if cfg.task == LINK_PREDICTION:
        extra["edge_split"] = list(cfg.lp_split)
        extra["scorer"] = cfg.lp_scorer
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(cfg.hash(), extra), indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in report.to_json()["metrics"].items()}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ontosub", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write a planted-partition dataset directory")
    sp.add_argument("--out", required=True, help="dataset directory to create")
    for f in fields(SynthSpec):
        sp.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=type(f.default), default=None,
                        help=f"(default: {f.default})")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("inspect", help="print per-type node and edge counts")
    sp.add_argument("data", help="dataset directory")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("extract", help="stream ontology subgraphs as 'anchor<TAB>slot0,slot1,...'")
    sp.add_argument("data", help="dataset directory")
    sp.add_argument("--schema", help="schema.json overriding the dataset's own")
    sp.add_argument("--cap", type=int, default=64, help="instances kept per anchor (default: 64)")
    sp.add_argument("--seed", type=int, default=0, help="sampling seed for capped anchors (default: 0)")
    sp.add_argument("--threads", type=int, default=1, help="worker threads (default: 1)")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train", help="train and write checkpoint.bin, report.csv, config.json")
    _add_config_flags(sp)
    sp.add_argument("--dry-run", action="store_true", help="validate config, print parameter count, exit")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint (plus runs-1 retrained seeds) into report.json")
    _add_config_flags(sp)
    sp.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.bin)")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NonFiniteLossError, NonFiniteError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except ValidationError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_INPUT
    except (InputError, DatasetError, SchemaError, CheckpointError, FileNotFoundError, json.JSONDecodeError,
            ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
