"""Command-line entry point: ``factorrec <command> [--config FILE] [--key value ...]``.

Every command writes into a fresh timestamped run directory (under ``--out``,
the config's ``output_dir``, ``$FACTORREC_OUT`` or ``./runs``, in that order)
together with ``manifest.json`` and the fully resolved ``config.cfg``.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_to_text, field_types, parse_config
from .encoder import affiliations
from .explain import explain, faithfulness_shift
from .graph import GraphError, NodeKind, ParseError, load_graph, load_graph_from_files, save_graph, split_holdout
from .kernels import backend_name
from .metrics import EvalError, evaluate, top_k_batch
from .trainer import CheckpointError, TrainingDiverged, load_checkpoint, save_checkpoint, train

log = logging.getLogger("factorrec")

COMMANDS = ("build", "train", "eval", "explain", "faithfulness", "export-embeddings", "sweep")
OUT_ENV = "FACTORREC_OUT"
PRESETS = ("lastfm", "movielens", "yelp")


def preset_path(name):
    return resources.files("factorrec") / "presets" / f"{name}.cfg"


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="factorrec", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"factorrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"config file, or a preset name ({', '.join(PRESETS)})")
    common.add_argument("--out", help="root directory for run outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("config keys (override file values)")
    for key in field_types():
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        keys.add_argument(*flags, dest=f"cfg_{key}", metavar="VALUE", default=None)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--graph", required=True, help="graph.npz written by build or train")
    model.add_argument("--checkpoint", required=True)

    p = sub.add_parser("build", parents=[common], allow_abbrev=False, help="ingest TSVs, split users, write graph.npz + idmap.tsv")

    p = sub.add_parser("train", parents=[common], allow_abbrev=False, help="train and write checkpoint.bin + loss_log.tsv")
    p.add_argument("--graph", help="graph.npz with a split; built from the config data paths if omitted")

    p = sub.add_parser("eval", parents=[common, model], allow_abbrev=False, help="Recall@K / NDCG@K report")
    p.add_argument("--group", choices=("val", "test"), default="test")

    p = sub.add_parser("explain", parents=[common, model], allow_abbrev=False, help="explain (user, item) predictions")
    p.add_argument("--user", help="user string id")
    p.add_argument("--item", help="target item string id; defaults to the user's top recommendation")
    p.add_argument("--top", type=int, default=5, help="contributions kept per node kind")
    p.add_argument("--pairs", type=int, default=5, help="test users explained when --user is absent")
    p.add_argument("--format", choices=("json", "dot"), default="json")

    p = sub.add_parser("faithfulness", parents=[common, model], allow_abbrev=False, help="explanation shift under input removal")
    p.add_argument("--strategy", default="model,random")
    p.add_argument("--removal", choices=("items", "entities", "combined"), default="items")
    p.add_argument("--budgets", type=_int_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--runs", type=int, default=5)

    sub.add_parser("export-embeddings", parents=[common, model], allow_abbrev=False, help="item base embeddings with factor labels")

    p = sub.add_parser("sweep", parents=[common], allow_abbrev=False, help="NDCG@100 across factor counts")
    p.add_argument("--graph", help="graph.npz with a split; built from the config data paths if omitted")
    p.add_argument("--C", dest="c_list", type=_int_list, required=True)
    p.add_argument("--mode", choices=("fixed-D", "fixed-total"), default="fixed-D")
    return parser


def resolve_config(args) -> RunConfig:
    path = args.config
    if path and not os.path.exists(path) and path in PRESETS:
        path = preset_path(path)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return parse_config(path, overrides)


def make_run_dir(cfg, args):
    root = Path(args.out or cfg.output_dir or os.environ.get(OUT_ENV) or "runs")
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{args.command}-{stamp}"
    run_dir, n = base, 1
    while run_dir.exists():
        n += 1
        run_dir = Path(f"{base}-{n}")
    run_dir.mkdir(parents=True)
    return run_dir


class Run:
    """Run directory bookkeeping: logging, resolved config and the manifest."""

    def __init__(self, cfg, args, argv):
        self.cfg = cfg
        self.dir = make_run_dir(cfg, args)
        self.files = []
        self.started = datetime.datetime.now().isoformat(timespec="seconds")
        handler = logging.FileHandler(self.dir / "run.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
        self._handler = handler
        self.argv = list(argv)
        self.command = args.command
        (self.dir / "config.cfg").write_text(config_to_text(cfg), encoding="utf-8")
        log.info("command %s, seed %d, backend %s", args.command, cfg.seed, backend_name())
        log.info("resolved config:\n%s", config_to_text(cfg))

    def path(self, name):
        self.files.append(name)
        return self.dir / name

    def write_text(self, name, text):
        self.path(name).write_text(text, encoding="utf-8")

    def close(self, status):
        manifest = {
            "command": self.command, "argv": self.argv, "status": status, "version": __version__,
            "seed": self.cfg.seed, "backend": backend_name(), "started": self.started,
            "finished": datetime.datetime.now().isoformat(timespec="seconds"),
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self.cfg).items()},
            "files": ["config.cfg", "run.log"] + self.files,
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        logging.getLogger().removeHandler(self._handler)
        self._handler.close()


def _graph_and_split(cfg, graph_path=None):
    if graph_path:
        graph, split = load_graph(graph_path)
        if split is None:
            raise GraphError(f"{graph_path} holds no user split; rebuild it with 'factorrec build'")
        return graph, split
    cfg.require_data()
    graph = load_graph_from_files(cfg.interactions, cfg.item_entity, cfg.entity_entity or None)
    split = split_holdout(graph, cfg.seed, cfg.n_val, cfg.n_test, cfg.train_frac)
    return graph, split


def _load_model(args):
    graph, split = _graph_and_split(None, args.graph)
    ckpt = load_checkpoint(args.checkpoint, expected_digest=split.train_graph.ids.digest())
    return graph, split, ckpt


def _write_graph(run, graph, split):
    save_graph(run.path("graph.npz"), graph, split)
    run.write_text("idmap.tsv", graph.ids.to_tsv())


def cmd_build(run, args):
    graph, split = _graph_and_split(run.cfg)
    _write_graph(run, graph, split)
    log.info("graph: %d users, %d items, %d entities; %d val / %d test users",
             graph.n_users, graph.n_items, graph.n_entities, len(split.val_users), len(split.test_users))


def _train(cfg, split, run=None, tag=""):
    def progress(entry):
        log.info("%sepoch %d loss %.5f", tag, entry["epoch"], entry["loss"])

    return train(split, cfg.train_config(), progress=progress)


def _loss_log_tsv(history):
    keys = list(history[0])
    lines = ["\t".join(keys)]
    for e in history:
        lines.append("\t".join(str(e[k]) if k == "epoch" else f"{e[k]:.6f}" for k in keys))
    return "\n".join(lines) + "\n"


def cmd_train(run, args):
    graph, split = _graph_and_split(run.cfg, args.graph)
    if not args.graph:
        _write_graph(run, graph, split)
    result = _train(run.cfg, split)
    save_checkpoint(result.checkpoint, run.path("checkpoint.bin"))
    run.write_text("loss_log.tsv", _loss_log_tsv(result.log))
    log.info("kept epoch %d", result.checkpoint.epoch)


def cmd_eval(run, args):
    _, split, ckpt = _load_model(args)
    report = evaluate(ckpt.params, ckpt.config, split, args.group, run.cfg.k_list)
    run.write_text("metrics.txt", report.to_text())
    run.write_text("metrics.tsv", report.to_tsv())
    sys.stdout.write(report.to_text())


def _node(ids, kind, name):
    return ids.lookup(kind, name).index


def cmd_explain(run, args):
    _, split, ckpt = _load_model(args)
    graph = split.train_graph
    ids = graph.ids
    if args.user:
        users = [_node(ids, NodeKind.User, args.user)]
    else:
        users = [int(u) for u in split.test_users if graph.user_degree()[u] > 0][: args.pairs]
    if args.item and not args.user:
        raise EvalError("--item requires --user")
    for u in users:
        if len(graph.items_of(u)) == 0:
            raise EvalError(f"user {ids.users[u]!r} has no training interactions to explain")
        if args.item:
            t = _node(ids, NodeKind.Item, args.item)
        else:
            t = int(top_k_batch(ckpt.params, ckpt.config, graph, np.array([u]), 1)[0][0])
        exp = explain(u, t, ckpt.params, ckpt.config, graph, top_m=args.top)
        name = f"explain_{ids.users[u]}_{ids.items[t]}.{args.format}".replace("/", "_")
        run.write_text(name, exp.to_dot(ids) if args.format == "dot" else exp.to_json(ids) + "\n")
        log.info("wrote %s", name)


def cmd_faithfulness(run, args):
    _, split, ckpt = _load_model(args)
    strategies = [s.strip() for s in args.strategy.split(",") if s.strip()]
    parts = []
    for i, strategy in enumerate(strategies):
        rep = faithfulness_shift(ckpt.params, ckpt.config, split, tuple(args.budgets), strategy, args.runs,
                                 seed=run.cfg.seed, removal=args.removal)
        parts.append(rep.to_tsv(header=i == 0))
        for n in args.budgets:
            log.info("%s n=%d mean shift %.4f", strategy, n, rep.mean_shift(n))
    run.write_text("shift.tsv", "".join(parts))


def cmd_export(run, args):
    _, split, ckpt = _load_model(args)
    params = ckpt.params
    ids = split.train_graph.ids
    aff = affiliations(params["item_base"], params["item_prototypes"], ckpt.config.gamma)
    labels = aff.p.argmax(axis=1) + 1
    d = params["item_base"].shape[1]
    lines = ["item\tfactor\t" + "\t".join(f"z{j}" for j in range(d))]
    for t, name in enumerate(ids.items):
        lines.append(f"{name}\t{labels[t]}\t" + "\t".join(f"{x:.6g}" for x in params["item_base"][t]))
    run.write_text("item_embeddings.tsv", "\n".join(lines) + "\n")


def sweep_settings(cfg, c_list, mode):
    """(C, D) pairs; fixed-total keeps C*D equal to the configured C2*D."""
    total = cfg.C2 * cfg.D
    out = []
    for c in c_list:
        if c < 1:
            raise ConfigError(f"factor count must be >= 1, got {c}")
        d = cfg.D if mode == "fixed-D" else max(1, int(round(total / c)))
        out.append((c, d))
    return out


def cmd_sweep(run, args):
    import dataclasses

    graph, split = _graph_and_split(run.cfg, args.graph)
    lines = ["C\tD\ttotal_dim\tndcg@100\trecall@100"]
    for c, d in sweep_settings(run.cfg, args.c_list, args.mode):
        cfg = dataclasses.replace(run.cfg, C1=c, C2=c, D=d)
        result = _train(cfg, split, tag=f"C={c} D={d} ")
        report = evaluate(result.checkpoint.params, result.checkpoint.config, split, "test", (100,))
        lines.append(f"{c}\t{d}\t{c * d}\t{report.mean_ndcg[100]:.6f}\t{report.mean_recall[100]:.6f}")
        log.info("C=%d D=%d ndcg@100 %.4f", c, d, report.mean_ndcg[100])
    run.write_text("sweep.tsv", "\n".join(lines) + "\n")
    sys.stdout.write("\n".join(lines) + "\n")


HANDLERS = {
    "build": cmd_build, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain,
    "faithfulness": cmd_faithfulness, "export-embeddings": cmd_export, "sweep": cmd_sweep,
}

ERRORS = (ConfigError, ParseError, GraphError, EvalError, CheckpointError, TrainingDiverged, KeyError,
          OSError, ValueError)


def run_command(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"factorrec: config error: {exc}", file=sys.stderr)
        return 2
    run = Run(cfg, args, argv)
    status = 1
    try:
        HANDLERS[args.command](run, args)
        status = 0
    except ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        log.error("%s failed: %s", args.command, msg)
        print(f"factorrec {args.command}: {msg}", file=sys.stderr)
    finally:
        run.close(status)
    print(run.dir)
    return status


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
