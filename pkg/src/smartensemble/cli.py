"""Command-line entry point: ``smartensemble <subcommand> --config PATH [...]``.

Artifacts land in the output directory::

    config.json          normalised config, written before anything else
    agents/agent_XX.json one checkpoint per ensemble member
    selector_k{K}.json   trained selection net for sub-ensemble size K
    report.json          agent profile, evaluations, sweep results
    sweep.csv            k,e2e_mel,ua,mv,rs,seed,wallclock_s

Exit status: 0 on success, 1 on usage/config/format errors, 2 when training
aborts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, validate_config
from .data import OracleAgent
from .ensemble import AgentModel
from .errors import ConfigError, ContractError, DimensionError, FormatError, TrainingAbort
from .nn import checkpoint_dict, params_from_checkpoint
from . import training

logger = logging.getLogger("smartensemble")

COMMANDS = ("gen-synthetic", "train-agents", "train-selector", "evaluate", "sweep-k", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser():
    parser = _Parser(prog="smartensemble", description="End-to-end sub-ensemble selection experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--k", type=int, help="sub-ensemble size (overrides knapsack.k)")
        p.add_argument("--method", choices=training.METHODS, help="aggregation rule for evaluate")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


# -- artifact I/O ------------------------------------------------------------


def _dump(path: Path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, default=_jsonable)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _update_report(out: Path, **sections):
    path = out / "report.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc.update(sections)
    _dump(path, doc)
    return doc


def _clean_stats(stats):
    return {k: v for k, v in stats.items() if k != "loss_history"}


def save_agents(out: Path, agents, seed):
    folder = out / "agents"
    folder.mkdir(parents=True, exist_ok=True)
    for a in agents:
        if isinstance(a, OracleAgent):
            doc = dict(a.to_dict(), version=1)
        else:
            doc = checkpoint_dict(a.spec, a.params, seed, id=a.id, specialty=list(a.specialty), train_stats=a.train_stats)
        _dump(folder / f"agent_{a.id:02d}.json", doc)


def load_agents(out: Path):
    files = sorted((out / "agents").glob("agent_*.json"))
    if not files:
        raise FileNotFoundError(f"no agent checkpoints under {out / 'agents'}; run train-agents first")
    agents = []
    for path in files:
        doc = json.loads(path.read_text())
        if doc.get("kind") == "oracle":
            agents.append(OracleAgent.from_dict(doc))
        else:
            spec, params, doc = params_from_checkpoint(doc)
            agents.append(AgentModel(doc["id"], spec, params, tuple(doc["specialty"]), doc.get("train_stats", {})))
    return agents


def save_selector(path: Path, selector: training.SelectorModel, seed):
    doc = checkpoint_dict(
        selector.spec, selector.params, seed, k=selector.k, best_epoch=selector.best_epoch, history=selector.history
    )
    _dump(path, doc)


def load_selector(path: Path) -> training.SelectorModel:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run train-selector first")
    spec, params, doc = params_from_checkpoint(json.loads(path.read_text()))
    return training.SelectorModel(spec, params, doc["k"], doc.get("history", []), doc.get("best_epoch", -1))


# -- commands ----------------------------------------------------------------


def _agents_or_train(config, out, splits, oracles):
    if (out / "agents").exists() and any((out / "agents").glob("agent_*.json")):
        return load_agents(out)
    agents = training.build_agents(config, splits, oracles)
    save_agents(out, agents, config.seed)
    return agents


def cmd_gen_synthetic(config, out, args):
    if config.dataset.source != "synthetic":
        raise ContractError("gen-synthetic needs dataset.source = 'synthetic'")
    (train, valid, test), agents = training.load_master_splits(config)
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    for ds in (train, valid, test):
        np.savez_compressed(data_dir / f"{ds.split}.npz", features=ds.features, labels=ds.labels)
    save_agents(out, agents, config.seed)
    _update_report(out, agents=[dict(_clean_stats(a.train_stats), id=a.id, specialty=list(a.specialty)) for a in agents])
    print(f"wrote {len(train)}/{len(valid)}/{len(test)} samples and {len(agents)} oracle agents to {out}")


def cmd_train_agents(config, out, args):
    splits, oracles = training.load_master_splits(config)
    agents = training.build_agents(config, splits, oracles)
    save_agents(out, agents, config.seed)
    rows = [dict(_clean_stats(a.train_stats), id=a.id, specialty=list(a.specialty)) for a in agents]
    _update_report(out, agents=rows, agent_profile=training.agent_profile(agents))
    print(format_agent_table(rows))


def cmd_train_selector(config, out, args):
    splits, oracles = training.load_master_splits(config)
    agents = _agents_or_train(config, out, splits, oracles)
    train, valid, test = splits
    selector = training.train_selector(config, agents, train, valid, config.k)
    save_selector(out / f"selector_k{config.k}.json", selector, config.seed)
    acc = training.evaluate("e2e-mel", agents, selector, test)
    report = json.loads((out / "report.json").read_text()) if (out / "report.json").exists() else {}
    selectors = report.get("selectors", {})
    selectors[str(config.k)] = {"test_accuracy": acc, "best_epoch": selector.best_epoch, "history": selector.history}
    _update_report(out, selectors=selectors)
    print(f"k={config.k} e2e-mel test accuracy {acc:.2f}%")


def cmd_evaluate(config, out, args):
    method = args.method or "e2e-mel"
    _, _, test = training.load_master_splits(config)[0]
    agents = load_agents(out)
    selector = load_selector(out / f"selector_k{config.k}.json") if method == "e2e-mel" else None
    acc = training.evaluate(method, agents, selector, test, k=config.k, seed=config.seed)
    report = json.loads((out / "report.json").read_text()) if (out / "report.json").exists() else {}
    evaluations = report.get("evaluations", {})
    key = method if method in ("ua", "mv") else f"{method}@k={config.k}"
    evaluations[key] = acc
    _update_report(out, evaluations=evaluations)
    print(f"{method} accuracy {acc!r}")


def cmd_sweep_k(config, out, args):
    splits, oracles = training.load_master_splits(config)
    agents = _agents_or_train(config, out, splits, oracles)
    k_values = [config.k] if args.k is not None else config.k_values
    reports = training.sweep_k(config, agents, splits, k_values, csv_path=out / "sweep.csv")
    best = training.best_k(reports)
    _update_report(out, sweep=[r.to_dict() | {"config": None} for r in reports], best_k=best)
    sys.stdout.write(training.sweep_csv(reports))
    if any(r.error for r in reports):
        raise TrainingAbort("; ".join(f"k={r.k}: {r.error}" for r in reports if r.error))


def cmd_report(config, out, args):
    agents = load_agents(out)
    rows = [dict(_clean_stats(a.train_stats), id=a.id, specialty=list(a.specialty)) for a in agents]
    print(format_agent_table(rows))
    path = out / "report.json"
    if path.exists():
        doc = json.loads(path.read_text())
        if doc.get("sweep"):
            print()
            print("k      e2e-MEL      UA      MV      RS")
            for r in doc["sweep"]:
                a = r["accuracy"]
                print(f"{r['k']:<4} {a['e2e-mel']:8.2f} {a['ua']:7.2f} {a['mv']:7.2f} {a['rs']:7.2f}")
            print(f"best k: {doc.get('best_k')}")


def format_agent_table(rows) -> str:
    lines = ["agent  specialty   specialized  complementary  overall"]
    for r in rows:
        spec = ",".join(str(s) for s in r["specialty"])
        lines.append(
            f"{r['id']:<6} {spec:<11} {r.get('specialized', math.nan):11.2f} "
            f"{r.get('complementary', math.nan):14.2f} {r.get('overall', math.nan):8.2f}"
        )
    if rows:
        mean = {k: np.mean([r.get(k, math.nan) for r in rows]) for k in ("specialized", "complementary", "overall")}
        lines.append(
            f"{'mean':<6} {'':<11} {mean['specialized']:11.2f} {mean['complementary']:14.2f} {mean['overall']:8.2f}"
        )
    return "\n".join(lines)


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-agents": cmd_train_agents,
    "train-selector": cmd_train_selector,
    "evaluate": cmd_evaluate,
    "sweep-k": cmd_sweep_k,
    "report": cmd_report,
}


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.out is not None:
        config = dataclasses.replace(config, output_dir=args.out)
    if args.k is not None:
        if not 1 <= args.k <= config.n:
            raise ConfigError(f"k={args.k} violates 1 <= k <= n (n={config.n})", "--k")
        config = dataclasses.replace(config, k=args.k)
    return config


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        config = _apply_overrides(validate_config(args.config), args)
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "config.json", config.to_dict())
        HANDLERS[args.command](config, out, args)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ContractError, DimensionError, FormatError, FileNotFoundError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
