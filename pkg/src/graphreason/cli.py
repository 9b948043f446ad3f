"""Command-line entry point: ingest, ask, eval, collect, train, inspect-trace.

Settings come from built-in defaults, then an optional JSON ``--config`` file,
then explicit flags (highest precedence). Exit codes: 0 ok, 1 bad input or
usage, 2 remote endpoint failure, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .endpoint import ChatEndpoint, EndpointError
from .environment import EnvConfig, Environment, render_steps
from .eval_harness import (
    AgentBundle,
    DatasetError,
    SuiteParams,
    generate_synthetic_suite,
    load_dataset,
    run_benchmark,
)
from .graph_store import GraphError, RetrievalIndex, build_index, load_graph
from .grpo import DivergenceError, GrpoConfig, collect_group, export_group, train
from .mcts import HeuristicEvaluator, LLMEvaluator, MctsConfig, read_trace, search, write_trace
from .policy import ActionParseError, LLMPolicy, PolicyParams, ScriptedPolicy, SoftmaxPolicy

log = logging.getLogger("graphreason")

DEFAULTS = {
    "graph": None,
    "index": None,
    "dataset": None,
    "synthetic_seed": None,
    "out_dir": "out",
    "seed": 0,
    "jobs": None,
    "policy": "uniform",
    "params": None,
    "script": None,
    "endpoint": None,
    "model": "default",
    "evaluator": "heuristic",
    "agent": "mcts",
    "trace": None,
    "verbose": False,
    # environment
    "max_depth": 10,
    "neighbor_cap": 50,
    "retrieval_k": 1,
    "keyword_cap": 4,
    # search
    "c_explore": 2 ** 0.5,
    "width": 3,
    "simulations": 50,
    "rollout_temperature": 1.0,
    # grpo
    "group_size": 8,
    "clip_eps": 0.2,
    "kl_beta": 0.01,
    "learning_rate": 0.05,
    "iterations": 200,
    "mode": "rollout",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="JSON file with default settings")
    p.add_argument("--out-dir", dest="out_dir", default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--jobs", type=int, default=S)
    p.add_argument("-v", "--verbose", action="store_true", default=S)


def _graph_opts(p):
    S = argparse.SUPPRESS
    p.add_argument("--graph", default=S, help="graph JSON-lines file")
    p.add_argument("--index", default=S, help="prebuilt index file")
    p.add_argument("--synthetic-seed", dest="synthetic_seed", type=int, default=S,
                   help="use the generated academic suite instead of --graph/--dataset")
    p.add_argument("--max-depth", dest="max_depth", type=int, default=S)
    p.add_argument("--neighbor-cap", dest="neighbor_cap", type=int, default=S)
    p.add_argument("--keyword-cap", dest="keyword_cap", type=int, default=S)


def _policy_opts(p):
    S = argparse.SUPPRESS
    p.add_argument("--policy", choices=["uniform", "softmax", "scripted", "llm"], default=S)
    p.add_argument("--params", default=S, help="softmax policy params JSON")
    p.add_argument("--script", default=S, help="JSON-lines of {thought, action}")
    p.add_argument("--endpoint", default=S, help="chat-completions URL")
    p.add_argument("--model", default=S)
    p.add_argument("--evaluator", choices=["heuristic", "llm"], default=S)
    p.add_argument("--width", type=int, default=S)
    p.add_argument("--simulations", type=int, default=S)
    p.add_argument("--c-explore", dest="c_explore", type=float, default=S)
    p.add_argument("--rollout-temperature", dest="rollout_temperature", type=float, default=S)


def _grpo_opts(p):
    S = argparse.SUPPRESS
    p.add_argument("--dataset", default=S)
    p.add_argument("--group-size", dest="group_size", type=int, default=S)
    p.add_argument("--clip-eps", dest="clip_eps", type=float, default=S)
    p.add_argument("--kl-beta", dest="kl_beta", type=float, default=S)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=S)
    p.add_argument("--iterations", type=int, default=S)
    p.add_argument("--mode", choices=["rollout", "mcts"], default=S)
    p.add_argument("--params", default=S, help="initial softmax params JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphreason", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a graph and build its retrieval index")
    _common(p)
    p.add_argument("graph_file")
    p.add_argument("--index-out", dest="index_out", default=argparse.SUPPRESS)

    p = sub.add_parser("ask", help="answer one question with tree search")
    _common(p)
    _graph_opts(p)
    _policy_opts(p)
    p.add_argument("question")
    p.add_argument("--trace", default=argparse.SUPPRESS, help="write a search trace here")

    p = sub.add_parser("eval", help="run a benchmark and write a report")
    _common(p)
    _graph_opts(p)
    _policy_opts(p)
    p.add_argument("--dataset", default=argparse.SUPPRESS)
    p.add_argument("--agent", choices=["mcts", "greedy", "scripted"], default=argparse.SUPPRESS)

    p = sub.add_parser("collect", help="sample trajectory groups and export them")
    _common(p)
    _graph_opts(p)
    _grpo_opts(p)

    p = sub.add_parser("train", help="GRPO on the softmax-linear policy")
    _common(p)
    _graph_opts(p)
    _grpo_opts(p)

    p = sub.add_parser("inspect-trace", help="summarise a search trace file")
    _common(p)
    p.add_argument("trace_file")
    return parser


def resolve_settings(ns: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    given = vars(ns)
    if "config" in given:
        try:
            with open(given["config"], encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {given['config']}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    cfg.update({k: v for k, v in given.items() if k != "config"})
    if cfg["jobs"] is None:
        cfg["jobs"] = os.cpu_count() or 1
    return cfg


# ---------------------------------------------------------------------------
# shared builders


def _env_cfg(cfg) -> EnvConfig:
    return EnvConfig(max_depth=cfg["max_depth"], neighbor_cap=cfg["neighbor_cap"],
                     retrieval_k=cfg["retrieval_k"], keyword_cap=cfg["keyword_cap"])


def _mcts_cfg(cfg) -> MctsConfig:
    return MctsConfig(c_explore=cfg["c_explore"], width=cfg["width"], max_depth=cfg["max_depth"],
                      simulations_per_move=cfg["simulations"],
                      rollout_temperature=cfg["rollout_temperature"], seed=cfg["seed"])


def _check_path(cfg, key):
    path = cfg.get(key)
    if path is not None and not Path(path).is_file():
        raise UsageError(f"--{key.replace('_', '-')}: no such file {path}")


def _load_world(cfg, need_dataset: bool):
    """Graph, environment and (optionally) dataset, validated before any work."""
    if cfg["synthetic_seed"] is not None:
        g, data = generate_synthetic_suite(SuiteParams(), seed=cfg["synthetic_seed"])
        if cfg.get("dataset"):
            _check_path(cfg, "dataset")
            data = load_dataset(cfg["dataset"])
        return g, Environment(g, _env_cfg(cfg)), data
    if cfg["graph"] is None:
        raise UsageError("--graph (or --synthetic-seed) is required")
    for key in ("graph", "index", "dataset"):
        _check_path(cfg, key)
    if need_dataset and cfg["dataset"] is None:
        raise UsageError("--dataset is required")
    g = load_graph(cfg["graph"])
    index = RetrievalIndex.load(cfg["index"], g) if cfg["index"] else None
    data = load_dataset(cfg["dataset"]) if cfg["dataset"] else []
    return g, Environment(g, _env_cfg(cfg), index), data


def _load_params(cfg) -> PolicyParams:
    if cfg["params"] is None:
        return PolicyParams()
    _check_path(cfg, "params")
    with open(cfg["params"], encoding="utf-8") as fh:
        return PolicyParams.from_dict(json.load(fh))


def _endpoint(cfg) -> ChatEndpoint:
    if not cfg["endpoint"]:
        raise UsageError("--endpoint is required for the llm policy/evaluator")
    return ChatEndpoint(cfg["endpoint"], cfg["model"])


def _policy(cfg):
    kind = cfg["policy"]
    if kind == "uniform":
        return SoftmaxPolicy(PolicyParams())
    if kind == "softmax":
        return SoftmaxPolicy(_load_params(cfg))
    if kind == "scripted":
        if cfg["script"] is None:
            raise UsageError("--script is required for the scripted policy")
        _check_path(cfg, "script")
        with open(cfg["script"], encoding="utf-8") as fh:
            recs = [json.loads(x) for x in fh if x.strip()]
        return ScriptedPolicy.from_records(recs)
    return LLMPolicy(_endpoint(cfg))


def _evaluator(cfg, g):
    if cfg["evaluator"] == "llm":
        return LLMEvaluator(_endpoint(cfg))
    return HeuristicEvaluator(g)


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg) -> int:
    g = load_graph(cfg["graph_file"])
    index = build_index(g)
    out = cfg.get("index_out") or str(_out_dir(cfg) / "graph.idx")
    index.save(out)
    print(f"nodes={len(g.nodes)} edges={g.num_edges}")
    print(f"node_types={len(g.schema.node_types)} edge_types={len(g.schema.edge_types)}")
    print(f"index={out}")
    return 0


def cmd_ask(cfg) -> int:
    g, env, _ = _load_world(cfg, need_dataset=False)
    policy = _policy(cfg)
    result = search(cfg["question"], env, policy, _evaluator(cfg, g), _mcts_cfg(cfg))
    print(f"Question: {cfg['question']}")
    print(render_steps(result.trajectory.steps))
    print(f"Answer: {result.answer}")
    if cfg["trace"]:
        write_trace(cfg["trace"], result.moves)
    return 0


def cmd_eval(cfg) -> int:
    g, env, data = _load_world(cfg, need_dataset=cfg["synthetic_seed"] is None)
    bundle = AgentBundle(agent=cfg["agent"], policy=_policy(cfg) if cfg["agent"] != "scripted"
                         else SoftmaxPolicy(), evaluator=_evaluator(cfg, g),
                         mcts=_mcts_cfg(cfg), seed=cfg["seed"])
    report = run_benchmark(data, env, bundle, jobs=cfg["jobs"])
    failures = [r for r in report.records if r.error and r.error.startswith("EndpointError")]
    path = _out_dir(cfg) / "report.json"
    _write(path, report.to_json() + "\n")
    print(report.summary_table())
    print(f"report={path}")
    if failures:
        print(f"{len(failures)} question(s) failed on the remote endpoint", file=sys.stderr)
        return 2
    return 0


def _grpo_cfg(cfg) -> GrpoConfig:
    return GrpoConfig(group_size=cfg["group_size"], clip_eps=cfg["clip_eps"],
                      kl_beta=cfg["kl_beta"], learning_rate=cfg["learning_rate"],
                      iterations=cfg["iterations"], seed=cfg["seed"], mode=cfg["mode"])


def cmd_collect(cfg) -> int:
    g, env, data = _load_world(cfg, need_dataset=cfg["synthetic_seed"] is None)
    gcfg = _grpo_cfg(cfg)
    params = _load_params(cfg)
    out = _out_dir(cfg) / "groups"
    out.mkdir(exist_ok=True)
    for i, rec in enumerate(data):
        rng = np.random.default_rng([cfg["seed"], i])
        group = collect_group(rec.question, rec.answers, env, params, gcfg.group_size,
                              rng=rng, query_id=rec.id, mode=gcfg.mode)
        export_group(group, out / f"{rec.id}.jsonl")
    print(f"groups={len(data)} size={gcfg.group_size} dir={out}")
    return 0


def cmd_train(cfg) -> int:
    g, env, data = _load_world(cfg, need_dataset=cfg["synthetic_seed"] is None)
    gcfg = _grpo_cfg(cfg)
    out = _out_dir(cfg)
    init = _load_params(cfg)
    code = 0
    try:
        params, metrics = train(data, env, gcfg, init=init)
    except DivergenceError as exc:
        params, metrics, code = exc.last_good, exc.metrics, 3
        print(f"diverged at iteration {exc.iteration}; keeping last good params", file=sys.stderr)
    _write(out / "params.json", json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n")
    _write(out / "metrics.jsonl", "".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics))
    if metrics:
        k = min(20, len(metrics))
        first = sum(m["mean_reward"] for m in metrics[:k]) / k
        last = sum(m["mean_reward"] for m in metrics[-k:]) / k
        print(f"first{k}_mean_reward={first:.4f} last{k}_mean_reward={last:.4f}")
    print(f"params={out / 'params.json'}")
    return code


def cmd_inspect_trace(cfg) -> int:
    moves = read_trace(cfg["trace_file"])
    for m in moves:
        print(f"move {m.move_index}: committed {m.committed_action}")
        for st in sorted(m.root_action_stats, key=lambda d: -d["N"]):
            print(f"  N={st['N']:>4}  Q={st['Q']:.4f}  {st['action']}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "ask": cmd_ask,
    "eval": cmd_eval,
    "collect": cmd_collect,
    "train": cmd_train,
    "inspect-trace": cmd_inspect_trace,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    command = ns.command
    del ns.command
    try:
        cfg = resolve_settings(ns)
        logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[command](cfg)
    except EndpointError as exc:
        print(f"error: endpoint failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, GraphError, DatasetError, ActionParseError, OSError,
            ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
