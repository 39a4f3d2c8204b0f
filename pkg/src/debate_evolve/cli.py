"""Command line entry point: ``dte <group> <command> [options]``.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime or transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import datasets, metrics, traces
from .agents import render_policy_output
from .debate import DebateConfig, run_debates
from .domain import (
    AgentConfig,
    DebateFailure,
    DebateRecord,
    GrpoParams,
    Query,
    RewardParams,
)
from .dte import EvolutionConfig, make_toy_world, run_evolution
from .errors import ConfigurationError, DteError, TrainingError, TransportError
from .grpo import TableEnvironment, ToyPolicy, grpo_train, shaped_reward, write_train_log

log = logging.getLogger("debate_evolve")


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# --- config helpers ------------------------------------------------------------


def _read_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc


def _apply_overrides(cfg: dict, args) -> dict:
    for key in ("output_dir", "seed", "parallelism"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg.setdefault("output_dir", "dte_out")
    cfg.setdefault("seed", 0)
    cfg.setdefault("parallelism", 4)
    return cfg


def _load_queries(spec: Any, base: Path) -> list[Query]:
    if spec is None:
        raise ConfigurationError("config lacks a dataset")
    if isinstance(spec, list):
        return [Query.from_dict(q) for q in spec]
    if "queries" in spec:
        return [Query.from_dict(q) for q in spec["queries"]]
    path = base / spec["path"]
    if "manifest" in spec:
        manifest = datasets.DatasetManifest.from_dict(spec["manifest"])
    elif "manifest_path" in spec:
        manifest = datasets.DatasetManifest.from_file(base / spec["manifest_path"])
    else:
        manifest = _sidecar_manifest(path)
    return datasets.load(path, manifest)


def _sidecar_manifest(path: Path) -> datasets.DatasetManifest:
    sidecar = path.with_name(path.name + ".manifest.json")
    if not sidecar.exists():
        raise ConfigurationError(f"no manifest given for {path} and no sidecar {sidecar.name}")
    return datasets.DatasetManifest.from_file(sidecar)


def _agents(cfg: dict, seed: int) -> list[AgentConfig]:
    specs = cfg.get("agents")
    if not specs:
        raise ConfigurationError("config lacks an agent pool")
    pool = []
    for spec in specs:
        spec = dict(spec)
        params = dict(spec.get("backend_params", {}))
        params.setdefault("seed", seed)
        spec["backend_params"] = params
        pool.append(AgentConfig.from_dict(spec))
    return pool


def _out(cfg_or_args) -> Path:
    out = Path(cfg_or_args["output_dir"] if isinstance(cfg_or_args, dict) else cfg_or_args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ------------------------------------------------------------------


def cmd_debate_run(args) -> int:
    cfg = _apply_overrides(_read_config(args.config), args)
    base = Path(args.config).parent
    queries = _load_queries(cfg.get("dataset"), base)
    pool = _agents(cfg, cfg["seed"])
    debate_cfg = DebateConfig.from_dict({"seed": cfg["seed"], **cfg.get("debate", {})})
    out = _out(cfg)
    outcomes = run_debates(queries, pool, debate_cfg, int(cfg["parallelism"]))
    records = [o for o in outcomes if isinstance(o, DebateRecord)]
    failures = [o for o in outcomes if isinstance(o, DebateFailure)]
    traces.write_jsonl(records, out / "records.jsonl")
    traces.write_jsonl(failures, out / "failures.jsonl")
    if records and all(r.query.gold_answer for r in records):
        metrics.write_report_json(metrics.report_for_records(records, cfg.get("baseline_accuracy", 0.0)), out / "report.json")
    traces.write_manifest(
        out / "manifest.json",
        dataset=queries[0].dataset if queries else "",
        agent_pool=pool,
        config=cfg,
        counts={"queries": len(queries), "records": len(records), "failures": len(failures)},
    )
    print(f"{len(records)} records, {len(failures)} failures -> {out}")
    if failures:
        print(f"transport failures, first: {failures[0].error}", file=sys.stderr)
        return 2
    return 0


def cmd_traces_extract(args) -> int:
    records = traces.read_jsonl(args.records, DebateRecord.from_dict)
    reward_params = RewardParams()
    examples = [e for e in (traces.extract_training_example(r, reward_params) for r in records) if e is not None]
    try:
        strategy = traces.SelectionStrategy.parse(args.strategy, args.k, args.seed)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    selected = traces.select(examples, strategy)
    out = _out(args)
    traces.persist(selected, out / "traces.jsonl")
    traces.write_manifest(
        out / "traces.manifest.json",
        dataset=records[0].query.dataset if records else "",
        agent_pool=[],
        config={"strategy": strategy.kind, "k": strategy.k, "seed": strategy.seed, "records": str(args.records)},
        counts={"records": len(records), "examples": len(examples), "selected": len(selected)},
    )
    print(f"{len(selected)} of {len(examples)} traces kept ({strategy.kind}) -> {out / 'traces.jsonl'}")
    return 0


def cmd_train_toy(args) -> int:
    examples = traces.load(args.traces)
    if not examples:
        raise ConfigurationError(f"{args.traces} holds no traces")
    labels = sorted({e.y_star for e in examples})
    if len(labels) < 2:
        labels.append("<other>")
    qids = sorted({e.query_id for e in examples})
    index = {q: i for i, q in enumerate(qids)}
    table = np.zeros((len(qids), len(labels)))
    counts = np.zeros(len(qids))
    for e in examples:
        c = index[e.query_id]
        counts[c] += 1
        for a, label in enumerate(labels):
            table[c, a] += shaped_reward(render_policy_output(label), e.y_star, "math", RewardParams(), 0.0)
    table /= np.maximum(counts, 1)[:, None]
    params = GrpoParams(
        beta=args.beta, learning_rate=args.lr, steps=args.steps, group_size=args.group_size, seed=args.seed or 0
    )
    start = ToyPolicy.uniform(len(qids), labels)
    trained, rows = grpo_train(start, start, TableEnvironment(table, counts), params)
    out = _out(args)
    trained.save(out / "policy.json")
    (out / "contexts.json").write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
    write_train_log(rows, out / "train_log.csv")
    final = rows[-1].mean_reward if rows else float("nan")
    print(f"trained {len(qids)} contexts x {len(labels)} actions for {params.steps} steps; last mean reward {final:.4f}")
    return 0


def cmd_evolve_run(args) -> int:
    cfg = _apply_overrides(_read_config(args.config), args)
    base = Path(args.config).parent
    seed = int(cfg["seed"])
    evo = EvolutionConfig.from_dict({"seed": seed, "parallelism": cfg["parallelism"], **cfg.get("evolution", {})})
    world = None
    if "toy_world" in cfg:
        world, train, validation = make_toy_world(**cfg["toy_world"])
    else:
        train = _load_queries(cfg.get("dataset"), base)
        validation = _load_queries(cfg.get("validation"), base)
    pool = []
    for agent in _agents(cfg, seed):
        if agent.backend == "policy" and "policy" not in agent.backend_params:
            if world is None:
                raise ConfigurationError("a policy agent without parameters needs a toy_world")
            agent = world.policy_agent(agent.agent_id, world.initial_policy(), agent.temperature, seed)
        pool.append(agent)
    result = run_evolution(
        train,
        validation,
        pool,
        DebateConfig.from_dict({"seed": seed, **cfg.get("debate", {})}),
        evo,
        RewardParams.from_dict(cfg.get("reward", {})),
        GrpoParams.from_dict({"seed": seed, **cfg.get("grpo", {})}),
        output_dir=_out(cfg),
        world=world,
    )
    summary = {
        "baseline_validation_reward": result.baseline_reward,
        "state": result.state.to_dict(),
        "halted": result.halted,
        "kl_evo": result.kl_evo,
    }
    (_out(cfg) / "evolution.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    history = ", ".join(f"{r:.4f}" for r in result.state.validation_reward_history)
    print(f"{result.state.iteration} iteration(s); baseline {result.baseline_reward:.4f}; rewards [{history}]")
    if result.halted:
        print(f"halted: {result.halted}", file=sys.stderr)
        return 2
    return 0


def cmd_metrics_report(args) -> int:
    records = traces.read_jsonl(args.records, DebateRecord.from_dict)
    gold_path = Path(args.gold)
    manifest = (
        datasets.DatasetManifest.from_file(args.manifest) if args.manifest else _sidecar_manifest(gold_path)
    )
    gold = {q.id: q.gold_answer for q in datasets.load(gold_path, manifest)}
    missing = [r.query.id for r in records if r.query.id not in gold]
    if missing:
        raise ConfigurationError(f"{len(missing)} record(s) have no gold answer, e.g. {missing[0]}")
    scored = [metrics.score_record(r, gold[r.query.id]) for r in records]
    report = metrics.aggregate(scored, max(len(records), 1), args.baseline)
    out = _out(args)
    metrics.write_report_json(report, out / "report.json")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_export_csv(args) -> int:
    reports = metrics.read_reports(args.report)
    out = _out(args)
    target = out / (args.name or Path(args.report).with_suffix(".csv").name)
    metrics.write_reports_csv(reports, target)
    print(f"{len(reports)} row(s) -> {target}")
    return 0


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dte", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    def common(p, config: bool = False):
        if config:
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--output-dir", dest="output_dir", default=None if config else "dte_out")
        if config:
            p.add_argument("--seed", type=int)
            p.add_argument("--parallelism", type=int)

    debate = groups.add_parser("debate").add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = debate.add_parser("run", help="debate every query of a dataset")
    common(p, config=True)
    p.set_defaults(func=cmd_debate_run)

    tr = groups.add_parser("traces").add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = tr.add_parser("extract", help="build training traces from debate records")
    p.add_argument("--records", required=True)
    p.add_argument("--strategy", default="all-traces", choices=["all-traces", "debate-only", "random-k"])
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_traces_extract)

    train = groups.add_parser("train").add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = train.add_parser("toy", help="train the toy policy on a trace file")
    p.add_argument("--traces", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.02)
    p.add_argument("--group-size", dest="group_size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_train_toy)

    evolve = groups.add_parser("evolve").add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = evolve.add_parser("run", help="run the debate-train-evolve loop")
    common(p, config=True)
    p.set_defaults(func=cmd_evolve_run)

    met = groups.add_parser("metrics").add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = met.add_parser("report", help="score debate records against gold answers")
    p.add_argument("--records", required=True)
    p.add_argument("--gold", required=True, help="dataset JSON Lines file holding the gold answers")
    p.add_argument("--manifest", help="dataset manifest (default: <gold>.manifest.json)")
    p.add_argument("--baseline", type=float, default=0.0, help="single-model accuracy for the delta column")
    common(p)
    p.set_defaults(func=cmd_metrics_report)

    exp = groups.add_parser("export").add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = exp.add_parser("csv", help="flatten report JSON into CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--name", help="output file name inside the output directory")
    common(p)
    p.set_defaults(func=cmd_export_csv)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TransportError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, ValueError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (DteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
