"""Command line: generate, classify, evaluate, compare, sweep, cost.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from apcascade import __version__
from apcascade.cascade import CascadeConfig, InstructionStore, load_seeds, run_cascade
from apcascade.catalog import load_catalog, target_pairs, validate_catalog
from apcascade.classifier import Classifier, PredictionSet, gold_label
from apcascade.errors import (
    ApcError,
    ArgumentError,
    BackendError,
    ConfigError,
    CoverageError,
    IntegrityError,
    ParseError,
)
from apcascade.gateway import (
    Gateway,
    HttpBackend,
    MockBackend,
    ReplayCache,
    estimate_cost,
    load_price_table,
    read_ledger,
)
from apcascade.metrics import BootstrapConfig, compare_predictions, evaluate
from apcascade.sweep import run_sweep
from apcascade.templates import CotRuleSet, RuleBook

log = logging.getLogger("apcascade")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
CONFIG_ERRORS = (ConfigError, IntegrityError, ArgumentError, CoverageError, ParseError, FileNotFoundError)


@dataclass
class RunConfig:
    run_dir: Path = Path("run")
    catalog: Path | None = None
    seeds: Path | None = None
    prices: Path | None = None
    rules: Path | None = None
    backend: str = "mock"
    base_url: str = ""
    api_key_env: str = "APC_API_KEY"
    mock_script: Path | None = None
    max_in_flight: int = 8
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    classify_model: str = "classifier"
    classify_temperature: float = 0.0
    mode: str = "apc"
    task: str = "correctness"
    hard_fail: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (str(v) if isinstance(v, Path) else v) for k, v in d.items()}


def _path(value: str | None) -> Path | None:
    return Path(value) if value else None


def load_config(path: str | Path | None) -> RunConfig:
    """Read an INI file with [run], [backend], [cascade] and [classify] sections."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    base = path.parent

    def rel(section: str, key: str) -> Path | None:
        value = parser.get(section, key, fallback="")
        return (base / value) if value else None

    try:
        cfg.run_dir = rel("run", "dir") or cfg.run_dir
        cfg.catalog = rel("run", "catalog")
        cfg.seeds = rel("run", "seeds")
        cfg.prices = rel("run", "prices")
        cfg.rules = rel("run", "rules")
        cfg.backend = parser.get("backend", "kind", fallback=cfg.backend)
        cfg.base_url = parser.get("backend", "base_url", fallback="")
        cfg.api_key_env = parser.get("backend", "api_key_env", fallback=cfg.api_key_env)
        cfg.mock_script = rel("backend", "mock_script")
        cfg.max_in_flight = parser.getint("backend", "max_in_flight", fallback=cfg.max_in_flight)
        cfg.cascade = CascadeConfig(
            T=parser.getint("cascade", "T", fallback=2),
            M=parser.getint("cascade", "M", fallback=6),
            rng_seed=parser.getint("cascade", "seed", fallback=0),
            model_id=parser.get("cascade", "model_id", fallback="generator"),
            temperature=parser.getfloat("cascade", "temperature", fallback=0.3),
            max_tokens=parser.getint("cascade", "max_tokens", fallback=1024),
        )
        cfg.classify_model = parser.get("classify", "model_id", fallback=cfg.classify_model)
        cfg.classify_temperature = parser.getfloat("classify", "temperature", fallback=0.0)
        cfg.mode = parser.get("classify", "mode", fallback=cfg.mode)
        cfg.task = parser.get("classify", "task", fallback=cfg.task)
        cfg.hard_fail = parser.getboolean("classify", "hard_fail", fallback=False)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for name in ("run_dir", "catalog", "seeds", "prices", "rules", "mock_script"):
        value = getattr(args, name, None)
        if value:
            setattr(cfg, name, Path(value))
    for name in ("backend", "base_url", "mode", "task"):
        value = getattr(args, name, None)
        if value:
            setattr(cfg, name, value)
    overrides = {}
    for flag, key in (("T", "T"), ("M", "M"), ("seed", "rng_seed")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        cfg.cascade = replace(cfg.cascade, **overrides)
    return cfg


class Run:
    """Run directory layout plus the gateway bound to it."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = cfg.run_dir
        for sub in ("instructions", "predictions", "reports", "cache"):
            (self.dir / sub).mkdir(parents=True, exist_ok=True)
        self.gateway = self._gateway()

    def _gateway(self) -> Gateway:
        cfg = self.cfg
        cache = ReplayCache(self.dir / "cache")
        if cfg.backend == "mock":
            backend = MockBackend.from_file(cfg.mock_script) if cfg.mock_script else MockBackend()
            return Gateway(backend, cache, max_in_flight=cfg.max_in_flight)
        if cfg.backend in ("http", "replay"):
            if not cfg.base_url and cfg.backend == "http":
                raise ConfigError("http backend needs base_url")
            http = HttpBackend(cfg.base_url or "http://offline.invalid", os.environ.get(cfg.api_key_env))
            if cfg.backend == "http":
                return Gateway(http, cache, max_in_flight=cfg.max_in_flight, read_cache=False)
            return Gateway(http, cache, max_in_flight=cfg.max_in_flight, offline=not cfg.base_url)
        raise ConfigError(f"unknown backend {cfg.backend!r}")

    def finish(self, command: str, summary: dict) -> None:
        self.gateway.dump_ledger(self.dir / "ledger.jsonl")
        manifest_path = self.dir / "manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"runs": []}
        manifest["version"] = __version__
        manifest["config"] = self.cfg.to_dict()
        manifest["runs"].append(
            {"command": command, "at": datetime.now(timezone.utc).isoformat(timespec="seconds"), **summary}
        )
        manifest_path.write_text(json.dumps(manifest, indent=1, default=str) + "\n", encoding="utf-8")


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"missing {what}")
    return value


def _rulebook(cfg: RunConfig) -> RuleBook:
    if not cfg.rules:
        return RuleBook()
    try:
        data = json.loads(Path(cfg.rules).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read rules file {cfg.rules}: {exc}") from exc
    return RuleBook({group: CotRuleSet(group, tuple(rules)) for group, rules in data.items()})


def _catalog(cfg: RunConfig):
    catalog = load_catalog(_require(cfg.catalog, "catalog path"))
    report = validate_catalog(catalog)
    for v in report.violations:
        log.warning("catalog: %s %s", v.kind, v.message)
    return catalog


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, default=str))


def cmd_generate(cfg: RunConfig) -> dict:
    seeds_path = _require(cfg.seeds, "seed file")
    seeds = load_seeds(seeds_path, cfg.cascade.M)
    catalog = _catalog(cfg)
    run = Run(cfg)
    targets = target_pairs(catalog)
    store = InstructionStore(run.dir / "instructions")
    iset = run_cascade(catalog, seeds, cfg.cascade, targets, run.gateway, store=store)
    summary = {
        "generation_calls": run.gateway.calls("instruction_gen"),
        "network_calls": run.gateway.network_calls,
        "targets": len(targets),
        "instructions": len(iset),
        "coverage": len(iset) / len(targets) if targets else 1.0,
        "failures": [asdict(f) for f in iset.failures],
    }
    if cfg.prices:
        summary["cost"] = asdict(estimate_cost(run.gateway.ledger, load_price_table(cfg.prices)))
    run.finish("generate", summary)
    return summary


def cmd_classify(cfg: RunConfig, out: Path | None = None) -> dict:
    catalog = _catalog(cfg)
    run = Run(cfg)
    cases = [c for c in catalog.cases if c.task == cfg.task]
    if not cases:
        raise ArgumentError(f"catalog has no {cfg.task} cases")
    iset = InstructionStore(run.dir / "instructions").load_final() if cfg.mode == "apc" else None
    classifier = Classifier(
        run.gateway,
        catalog,
        model_id=cfg.classify_model,
        temperature=cfg.classify_temperature,
        rulebook=_rulebook(cfg),
        hard_fail=cfg.hard_fail,
    )
    preds = classifier.run_task(cases, cfg.mode, iset, instruction_set_id=str(run.dir / "instructions"))
    out = out or run.dir / "predictions" / f"{cfg.mode}-{cfg.task}.jsonl"
    preds.write(out)
    summary = {
        "predictions": str(out),
        "cases": len(preds),
        "classification_calls": run.gateway.calls("classification"),
        "network_calls": run.gateway.network_calls,
        "defaulted": preds.defaulted,
    }
    run.finish("classify", summary)
    return summary


def _attach_gold(preds: PredictionSet, catalog, task: str) -> PredictionSet:
    cases = {c.id: c for c in catalog.cases if c.task == task}
    if not preds.results:
        raise ArgumentError("prediction file is empty")
    unknown = [r.case_id for r in preds.results if r.case_id not in cases]
    missing = sorted(set(cases) - {r.case_id for r in preds.results})
    if unknown or missing:
        raise CoverageError(f"predictions do not match labeled {task} cases: {len(unknown)} unknown, {len(missing)} missing")
    results = [replace(r, gold=gold_label(cases[r.case_id])) for r in preds.results]
    return PredictionSet(results, preds.metadata)


def cmd_evaluate(predictions: Path, catalog_path: Path, task: str, out_dir: Path, effort: float | None = None) -> dict:
    catalog = load_catalog(catalog_path)
    preds = _attach_gold(PredictionSet.read(predictions), catalog, task)
    report = evaluate(preds, task, effort_minutes=effort)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(predictions).stem
    (out_dir / f"{stem}.eval.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
    (out_dir / f"{stem}.eval.txt").write_text(report.table(), encoding="utf-8")
    print(report.table(), end="")
    return report.to_dict()


def cmd_compare(a: Path, b: Path, catalog_path: Path, task: str, config: BootstrapConfig, out_dir: Path) -> dict:
    catalog = load_catalog(catalog_path)
    pa = _attach_gold(PredictionSet.read(a), catalog, task)
    pb = _attach_gold(PredictionSet.read(b), catalog, task)
    result = asdict(compare_predictions(pa, pb, config))
    result.update({"a": str(a), "b": str(b)})
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"compare-{Path(a).stem}-vs-{Path(b).stem}.json").write_text(
        json.dumps(result, indent=1) + "\n", encoding="utf-8"
    )
    return result


def cmd_sweep(cfg: RunConfig, T_range: Sequence[int], M_range: Sequence[int], tuning: Path | None) -> dict:
    seeds = load_seeds(_require(cfg.seeds, "seed file"))
    catalog = load_catalog(tuning) if tuning else _catalog(cfg)
    run = Run(cfg)
    classifier = Classifier(
        run.gateway, catalog, model_id=cfg.classify_model, temperature=cfg.classify_temperature, rulebook=_rulebook(cfg)
    )
    report = run_sweep(catalog, seeds, cfg.cascade, T_range, M_range, run.gateway, classifier, task=cfg.task)
    out = report.to_dict()
    (run.dir / "reports" / "sweep.json").write_text(json.dumps(out, indent=1) + "\n", encoding="utf-8")
    run.finish("sweep", {"chosen": out["chosen"]})
    return out


def cmd_cost(ledger: Path, prices: Path, purpose: str | None) -> dict:
    entries = [e for e in read_ledger(ledger) if purpose is None or e.purpose == purpose]
    report = estimate_cost(entries, load_price_table(prices))
    return asdict(report)


def parse_range(text: str) -> list[int]:
    """``"0-6"`` or ``"2,4,6"``."""
    values: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                values.extend(range(int(lo), int(hi) + 1))
            else:
                values.append(int(part))
    except ValueError as exc:
        raise ArgumentError(f"bad range {text!r}") from exc
    if not values:
        raise ArgumentError(f"empty range {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apcascade", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("-c", "--config", help="INI config file")
        p.add_argument("--run-dir", dest="run_dir")
        p.add_argument("--catalog")
        p.add_argument("--seeds")
        p.add_argument("--prices")
        p.add_argument("--rules", help="JSON: {sa group: [rule, ...]}")
        p.add_argument("--backend", choices=("mock", "http", "replay"))
        p.add_argument("--base-url", dest="base_url")
        p.add_argument("--mock-script", dest="mock_script")
        p.add_argument("-T", type=int)
        p.add_argument("-M", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--task", choices=("correctness", "applicability"))

    p = sub.add_parser("generate", help="run the instruction cascade")
    run_args(p)

    p = sub.add_parser("classify", help="classify labeled cases")
    run_args(p)
    p.add_argument("--mode", choices=("baseline", "cot", "apc"))
    p.add_argument("--out")

    p = sub.add_parser("evaluate", help="per-class metrics for a prediction file")
    p.add_argument("predictions")
    p.add_argument("--catalog", required=True)
    p.add_argument("--task", default="correctness", choices=("correctness", "applicability"))
    p.add_argument("--out-dir", default="reports")
    p.add_argument("--effort", type=float, help="manual effort in minutes per PC-SA (echoed)")

    p = sub.add_parser("compare", help="paired bootstrap test of A against B")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--catalog", required=True)
    p.add_argument("--task", default="correctness", choices=("correctness", "applicability"))
    p.add_argument("-B", type=int, default=5000)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", default="negative_f1", choices=("negative_f1", "positive_f1", "macro_f1"))
    p.add_argument("--out-dir", default="reports")

    p = sub.add_parser("sweep", help="tune T, then M")
    run_args(p)
    p.add_argument("--T-range", dest="T_range", default="0-6")
    p.add_argument("--M-range", dest="M_range", default="6")
    p.add_argument("--tuning", help="tuning catalog (defaults to --catalog)")

    p = sub.add_parser("cost", help="cost of a usage ledger")
    p.add_argument("ledger")
    p.add_argument("--prices", required=True)
    p.add_argument("--purpose", choices=("instruction_gen", "classification"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command in ("generate", "classify", "sweep"):
            cfg = apply_flags(load_config(args.config), args)
            if args.command == "generate":
                _print(cmd_generate(cfg))
            elif args.command == "classify":
                _print(cmd_classify(cfg, Path(args.out) if args.out else None))
            else:
                _print(cmd_sweep(cfg, parse_range(args.T_range), parse_range(args.M_range), _path(args.tuning)))
        elif args.command == "evaluate":
            cmd_evaluate(Path(args.predictions), Path(args.catalog), args.task, Path(args.out_dir), args.effort)
        elif args.command == "compare":
            config = BootstrapConfig(B=args.B, fraction=args.fraction, seed=args.seed, metric=args.metric)
            _print(cmd_compare(Path(args.a), Path(args.b), Path(args.catalog), args.task, config, Path(args.out_dir)))
        elif args.command == "cost":
            _print(cmd_cost(Path(args.ledger), Path(args.prices), args.purpose))
    except CONFIG_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendError, ApcError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
