"""Command-line entry point.

    lift-index [--seed N] [--config FILE] <subcommand> [options]

Subcommands: gen-workload, gen-demos, pretrain, train, evaluate, baseline, serve.
Values come from flags, then the ``--config`` JSON file (top-level keys named
like the long flags, with dashes or underscores), then built-in defaults.
Every run prints its effective configuration as JSON on stderr.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import controller
from .controller import ExperimentConfig, load_environment, read_json
from .demos import QUERY_ORDERS, build_demonstrations, rule_index_set, save_demos
from .planner import SimulatedDatabase, default_reward_config
from .querylang import build_vocabulary
from .workload import QueryGenConfig, WorkloadError, gen_workload, load_queries

logger = logging.getLogger("lift_index")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "seed": 0,
    "count": 1000,
    "min_attrs": 1,
    "max_attrs": 3,
    "rule": "full",
    "episode_size": 20,
    "query_order": "desc",
    "updates": 2000,
    "eval_every": 100,
    "target_accuracy": 0.75,
    "episodes": 100,
    "repetitions": 5,
    "strategy": "full",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    # shared flags accepted before or after the subcommand; SUPPRESS keeps
    # absent flags out of the namespace so the config file can fill them
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with option values")
    common.add_argument("--env", default=argparse.SUPPRESS,
                        help="environment JSON (doc_count, noise_sigma, omega1/2, unit_costs, schema)")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    p = _Parser(prog="lift-index", description="Compound-index advisor (DQfD).", parents=[common])
    sub = p.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    sub.required = True
    S = argparse.SUPPRESS

    g = sub.add_parser("gen-workload", parents=[common], help="generate a seeded query workload")
    g.add_argument("--count", type=int, default=S, help="number of queries (default 1000)")
    g.add_argument("--min-attrs", type=int, default=S)
    g.add_argument("--max-attrs", type=int, default=S)
    g.add_argument("--out", default=S, help="output JSONL path (required)")

    d = sub.add_parser("gen-demos", parents=[common], help="run an indexing rule and record demonstrations")
    d.add_argument("--queries", default=S, help="workload JSONL (required)")
    d.add_argument("--rule", choices=("full", "partial"), default=S)
    d.add_argument("--episode-size", type=int, default=S, help="queries per demo episode (default 20)")
    d.add_argument("--query-order", choices=QUERY_ORDERS, default=S)
    d.add_argument("--out", default=S, help="output JSONL path (required)")

    t = sub.add_parser("pretrain", parents=[common], help="pretrain an agent on demonstrations")
    t.add_argument("--demos", default=S, help="demonstration JSONL (required)")
    t.add_argument("--agent-config", default=S, help="declarative agent config JSON")
    t.add_argument("--updates", type=int, default=S, help="max updates (default 2000)")
    t.add_argument("--eval-every", type=int, default=S)
    t.add_argument("--target-accuracy", type=float, default=S,
                   help="early-stop accuracy (default 0.75; negative disables)")
    t.add_argument("--out", default=S, help="model file (required)")
    t.add_argument("--curve", default=S, help="accuracy curve CSV")

    o = sub.add_parser("train", parents=[common], help="online training over a workload")
    o.add_argument("--queries", default=S, help="workload JSONL (required)")
    o.add_argument("--model", default=S, help="pretrained model to refine")
    o.add_argument("--demos", default=S, help="demonstrations to keep mixing into online batches")
    o.add_argument("--agent-config", default=S, help="agent config JSON (fresh agents only)")
    o.add_argument("--episodes", type=int, default=S, help="episodes (default 100)")
    o.add_argument("--query-order", choices=QUERY_ORDERS, default=S)
    o.add_argument("--out", default=S, help="refined model file")
    o.add_argument("--curve", default=S, help="reward curve CSV")
    o.add_argument("--best", default=S, help="best index set JSON")

    e = sub.add_parser("evaluate", parents=[common], help="evaluate an index set or a model")
    e.add_argument("--queries", default=S, help="workload JSONL (required)")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--indexes", default=S, help="index set JSON (as written by train --best)")
    src.add_argument("--model", default=S, help="model; its greedy index set is evaluated")
    e.add_argument("--repetitions", type=int, default=S, help="runs per query (default 5)")
    e.add_argument("--query-order", choices=QUERY_ORDERS, default=S)
    e.add_argument("--out", default=S, help="report JSON")

    b = sub.add_parser("baseline", parents=[common], help="evaluate a rule baseline")
    b.add_argument("--queries", default=S, help="workload JSONL (required)")
    b.add_argument("--strategy", choices=("default", "full", "partial"), default=S)
    b.add_argument("--repetitions", type=int, default=S)
    b.add_argument("--query-order", choices=QUERY_ORDERS, default=S)
    b.add_argument("--out", default=S, help="report JSON")

    s = sub.add_parser("serve", parents=[common], help="answer query JSON lines with index decisions")
    s.add_argument("--model", default=S, help="model file (required)")
    s.add_argument("--input", default=S, help="input JSONL (default stdin)")
    s.add_argument("--output", default=S, help="output JSONL (default stdout)")
    s.add_argument("--learn", action="store_true", default=S,
                   help="apply updates when lines carry rewards")
    return p


REQUIRED = {
    "gen-workload": ("out",),
    "gen-demos": ("queries", "out"),
    "pretrain": ("demos", "out"),
    "train": ("queries",),
    "evaluate": ("queries",),
    "baseline": ("queries",),
    "serve": ("model",),
}


def resolve(argv) -> dict:
    """Merged options: flags over config file over defaults."""
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    file_opts = {}
    if "config" in ns:
        try:
            raw = read_json(ns["config"], "config")
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        file_opts = {k.replace("-", "_"): v for k, v in raw.items()}
    sub_dests = {a.dest for a in _subparser(parser, command)._actions}
    unknown = set(file_opts) - sub_dests
    if unknown:
        raise UsageError(f"config keys not understood by {command}: {sorted(unknown)}")
    merged = {k: v for k, v in DEFAULTS.items() if k in sub_dests}
    merged.update(file_opts)
    merged.update(ns)
    merged.pop("config", None)
    merged.pop("help", None)
    missing = [k for k in REQUIRED[command] if not merged.get(k)]
    if command == "evaluate" and not (merged.get("indexes") or merged.get("model")):
        missing.append("indexes or model")
    if command == "evaluate" and merged.get("indexes") and merged.get("model"):
        raise UsageError("evaluate: --indexes and --model are mutually exclusive")
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    merged["command"] = command
    return merged


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _experiment(opts: dict, mode: str, **outputs) -> ExperimentConfig:
    return ExperimentConfig(
        mode=mode,
        agent_config=opts.get("agent_config"),
        env_config=opts.get("env"),
        workload=opts.get("queries"),
        demos=opts.get("demos"),
        model=opts.get("model"),
        episodes=opts.get("episodes", 100),
        eval_repetitions=opts.get("repetitions", 5),
        seed=opts["seed"],
        query_order=opts.get("query_order", "desc"),
        outputs={k: v for k, v in outputs.items() if v},
        indexes=opts.get("indexes"),
        pretrain_updates=opts.get("updates", 2000),
        eval_every=opts.get("eval_every", 100),
        target_accuracy=(None if opts.get("target_accuracy", 0.75) < 0
                         else opts.get("target_accuracy", 0.75)),
        learn=bool(opts.get("learn", False)),
    )


def _summary(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_workload(opts):
    schema, _, _ = load_environment(opts.get("env"))
    cfg = QueryGenConfig(attrs_per_query=(opts["min_attrs"], opts["max_attrs"]), seed=opts["seed"])
    queries = gen_workload(schema, cfg, opts["count"], opts["out"])
    _summary({"queries": len(queries), "out": opts["out"]})


def cmd_gen_demos(opts):
    schema, coll, rcfg_override = load_environment(opts.get("env"))
    queries = load_queries(opts["queries"], schema)
    if not queries:
        raise ValueError(f"workload {opts['queries']} is empty")
    vocab = build_vocabulary(schema)
    full = rule_index_set(queries, "full", 3, opts["query_order"])
    rcfg = rcfg_override or default_reward_config(queries, coll, full)
    db = SimulatedDatabase(coll, seed=opts["seed"])
    res = build_demonstrations(queries, opts["rule"], db, rcfg, vocab,
                               episode_size=opts["episode_size"], order=opts["query_order"])
    save_demos(res.records, opts["out"])
    _summary({"records": len(res.records), "skipped": len(res.skipped), "out": opts["out"]})


def cmd_pretrain(opts):
    cfg = _experiment(opts, "pretrain", model=opts["out"], curve=opts.get("curve"))
    res = controller.run_pretrain(cfg)
    _summary({k: res[k] for k in ("demonstrations", "updates", "final_accuracy")})


def cmd_train(opts):
    cfg = _experiment(opts, "online", model=opts.get("out"), curve=opts.get("curve"),
                      best=opts.get("best"))
    res = controller.run_online(cfg)
    _summary({"best_reward": res["best_reward"], "indexes": len(res["best_indexes"]),
              "episodes": len(res["episode_rewards"])})


def _report_summary(report):
    _summary({k: v for k, v in report.to_json().items()
              if k in ("mean_latency", "p90_latency", "p99_latency", "normalized_size",
                       "total_reward")})


def cmd_evaluate(opts):
    cfg = _experiment(opts, "evaluate", report=opts.get("out"))
    _report_summary(controller.run_evaluate(cfg))


def cmd_baseline(opts):
    cfg = _experiment(opts, "evaluate", report=opts.get("out"))
    _report_summary(controller.run_baseline(cfg, opts["strategy"]))


def cmd_serve(opts):
    cfg = _experiment(opts, "serve")
    fin = open(opts["input"], encoding="utf-8") if opts.get("input") else sys.stdin
    fout = open(opts["output"], "w", encoding="utf-8") if opts.get("output") else sys.stdout
    try:
        controller.run_serve(cfg, fin, fout)
    finally:
        if fin is not sys.stdin:
            fin.close()
        if fout is not sys.stdout:
            fout.close()


COMMANDS = {
    "gen-workload": cmd_gen_workload,
    "gen-demos": cmd_gen_demos,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    try:
        opts = resolve(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logging.basicConfig(
        level=logging.WARNING - 10 * min(opts.pop("verbose", 0) or 0, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    print("effective config: " + json.dumps(opts, sort_keys=True), file=sys.stderr)
    try:
        COMMANDS[opts["command"]](opts)
    except (ValueError, OSError, WorkloadError, KeyError) as exc:
        print(f"lift-index {opts['command']}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
