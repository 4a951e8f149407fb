"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 provider error, 4 offline cache
miss, 5 invariant violation. Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from bitmcts.baselines import ABLATION_KINDS, StrategyKind, StrategySpec
from bitmcts.config import RunConfig, load_config, make_backend, setup_logging
from bitmcts.errors import BitMCTSError, ConfigError, InvariantViolation
from bitmcts.narrative import Theme
from bitmcts.pipeline import STAGES, StageFailed, default_run_dir, read_json, run_pipeline

log = logging.getLogger("bitmcts.cli")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=default, help="seed for search and synthetic provider")
    parser.add_argument("--provider", choices=("synthetic", "llm"), default=default)
    parser.add_argument(
        "--offline", action="store_true", default=argparse.SUPPRESS if suppress else False,
        help="answer only from the response cache; a miss exits with code 4",
    )
    parser.add_argument("--verbosity", choices=("debug", "info", "warning", "error"), default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitmcts", description="Theme-to-fiction generation with outline search.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        return p

    kinds = [k.value for k in StrategyKind]
    for name, help in (("generate", "run the full pipeline"), ("search", "stop after the rough outline")):
        p = command(name, help)
        p.add_argument("--theme", action="append", help="theme text (repeatable; overrides config)")
        p.add_argument("--strategy", choices=kinds, help="outline strategy")
        p.add_argument("--out", help="run directory (single theme) or parent directory")

    p = command("ablate", "run strategy variants over the themes")
    p.add_argument("--theme", action="append")
    p.add_argument("--strategies", nargs="+", choices=kinds,
                   default=[StrategyKind.BIT_MCTS.value] + [k.value for k in ABLATION_KINDS])
    p.add_argument("--out", required=True, help="parent directory; one subdirectory per strategy")

    p = command("evaluate", "compare fictions written by several systems")
    p.add_argument("root", help="directory laid out as <system>/<run>/fiction.md")
    p.add_argument("--mode", choices=("comparative", "pairwise", "lengths"), default="comparative")
    p.add_argument("--rounds", type=int, default=4)
    p.add_argument("--systems", nargs=2, metavar=("A", "B"), help="pairwise: the two systems")
    p.add_argument("--length-mode", choices=("chars", "whitespace", "provider"), default="chars")
    p.add_argument("--thematic", action="store_true", help="add the thematic-expression dimension")
    p.add_argument("--out", help="directory for tables and round transcripts")

    p = command("dump-tree", "print a search tree as JSON")
    p.add_argument("run_dir")
    p.add_argument("--direction", choices=("forward", "backward"), default="forward")

    p = command("resume", "continue a run from a persisted stage")
    p.add_argument("run_dir")
    p.add_argument("--from", dest="from_stage", choices=STAGES,
                   help="first stage to recompute (default: the first unfinished one)")
    return parser


def _config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    config = base or load_config(args.config)
    if args.provider:
        config = replace(config, provider=args.provider)
    if args.offline:
        config = replace(config, offline=True)
    if args.verbosity:
        config = replace(config, verbosity=args.verbosity)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if getattr(args, "theme", None):
        config = replace(config, themes=tuple(args.theme))
    if getattr(args, "strategy", None):
        config = replace(config, strategy=replace(config.strategy, kind=StrategyKind(args.strategy)))
    return config


def _themes(config: RunConfig) -> list[Theme]:
    if not config.themes:
        raise ConfigError("no theme given (use --theme or the config's themes list)")
    return [Theme(t) for t in config.themes]


def _run_dirs(themes: list[Theme], out: str | None, config: RunConfig) -> list[Path]:
    if out and len(themes) == 1:
        return [Path(out)]
    if out:
        return [Path(out) / t.id for t in themes]
    return [default_run_dir(config.output_dir, t) for t in themes]


def _emit(data: Any) -> None:
    sys.stdout.write(json.dumps(data, indent=2, ensure_ascii=False) + "\n")


def cmd_generate(args: argparse.Namespace, stop_after: str | None = None) -> int:
    config = _config(args)
    setup_logging(config.verbosity)
    themes = _themes(config)
    backend = make_backend(config)
    summary = []
    for theme, run_dir in zip(themes, _run_dirs(themes, args.out, config)):
        log.info("theme %s -> %s", theme.id, run_dir)
        artifact = run_pipeline(theme, config, backend, run_dir=run_dir, stop_after=stop_after)
        entry = {"theme_id": theme.id, "run_dir": str(run_dir), "complete": artifact.complete}
        if stop_after == "search":
            entry["rough_outline"] = artifact.rough_outline.texts
        summary.append(entry)
    _emit(summary)
    return 0 if all(s["complete"] or stop_after for s in summary) else 3


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _config(args)
    setup_logging(config.verbosity)
    themes = _themes(config)
    backend = make_backend(config)
    summary = []
    for kind in args.strategies:
        variant = replace(config, strategy=StrategySpec(kind=kind, width=config.strategy.width,
                                                        n=config.strategy.n, depth=config.strategy.depth))
        for theme in themes:
            run_dir = Path(args.out) / kind / theme.id
            artifact = run_pipeline(theme, variant, backend, run_dir=run_dir)
            summary.append({"strategy": kind, "theme_id": theme.id, "run_dir": str(run_dir),
                            "complete": artifact.complete,
                            "provider_calls": artifact.metadata["provider_calls"]})
    _emit(summary)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    from bitmcts import evaluation as ev

    config = _config(args)
    setup_logging(config.verbosity)
    fictions, tokens = ev.load_fictions(args.root)
    if not fictions:
        raise ConfigError(f"no fiction.md files under {args.root}")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    dims = ev.dimensions_for(args.thematic)

    if args.mode == "lengths":
        by_system: dict[str, list[Any]] = {}
        if args.length_mode == "provider":
            by_system = {k: list(v) for k, v in tokens.items()}
        else:
            for per_theme in fictions.values():
                for system, text in per_theme.items():
                    by_system.setdefault(system, []).append(text)
        stats = ev.length_stats(by_system, args.length_mode)
        _emit({"mode": args.length_mode, "mean_length": stats})
        return 0

    judge = make_backend(config)
    if args.mode == "pairwise":
        if not args.systems:
            raise ConfigError("pairwise mode needs --systems A B")
        a_name, b_name = args.systems
        a = {t: s[a_name] for t, s in fictions.items() if a_name in s}
        b = {t: s[b_name] for t, s in fictions.items() if b_name in s}
        result = ev.run_pairwise(a, b, judge, repetitions=args.rounds, seed=config.seed,
                                 names=(a_name, b_name), dimensions=dims)
        if out:
            ev.write_rounds_jsonl(result.rounds, out / "pairwise_rounds.jsonl")
        _emit({
            "systems": list(result.systems),
            "win_rate": {d: float(v) for d, v in result.win_rate.items()},
            "average": float(result.average),
            "order_counts": result.order_counts,
        })
        return 0

    rounds = ev.run_comparative(fictions, judge, rounds=args.rounds, seed=config.seed, dimensions=dims)
    table = ev.aggregate_win_rates(rounds, dims)
    if out:
        ev.write_rounds_jsonl(rounds, out / "rounds.jsonl")
        (out / "win_rates.csv").write_text(ev.table_csv(table), encoding="utf-8")
        (out / "win_rates.md").write_text(ev.table_markdown(table), encoding="utf-8")
        if table.loss is not None:
            (out / "loss_rates.csv").write_text(ev.table_csv(table, "loss"), encoding="utf-8")
            (out / "loss_rates.md").write_text(ev.table_markdown(table, "loss"), encoding="utf-8")
    sys.stdout.write(ev.table_markdown(table))
    if table.invalid_rounds:
        log.warning("%d invalid rounds excluded", table.invalid_rounds)
    return 0


def cmd_dump_tree(args: argparse.Namespace) -> int:
    path = Path(args.run_dir) / f"tree_{args.direction}.json"
    if not path.exists():
        raise ConfigError(f"{path} does not exist (strategy without a {args.direction} tree?)")
    _emit(read_json(path))
    return 0


def cmd_resume(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    try:
        record = read_json(run_dir / "run.json")
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {run_dir / 'run.json'}: {exc}") from exc
    config = _config(args, RunConfig.from_dict(record["config"]))
    setup_logging(config.verbosity)
    from_stage = args.from_stage
    if from_stage is None:
        last = record.get("last_completed_stage")
        if last == STAGES[-1] and record.get("complete"):
            _emit({"run_dir": str(run_dir), "complete": True, "note": "nothing to resume"})
            return 0
        from_stage = STAGES[STAGES.index(last) + 1] if last else STAGES[0]
    theme = Theme(record["theme"]["text"], id=record["theme"]["id"])
    artifact = run_pipeline(theme, config, make_backend(config), run_dir=run_dir,
                            resume_from=from_stage if from_stage != STAGES[0] else None)
    _emit({"run_dir": str(run_dir), "resumed_from": from_stage, "complete": artifact.complete})
    return 0 if artifact.complete else 3


def _fail(exc: Exception, code: int, extra: dict[str, Any] | None = None) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    payload.update(extra or {})
    sys.stderr.write(json.dumps(payload, ensure_ascii=False) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "generate": cmd_generate,
        "search": lambda a: cmd_generate(a, stop_after="search"),
        "ablate": cmd_ablate,
        "evaluate": cmd_evaluate,
        "dump-tree": cmd_dump_tree,
        "resume": cmd_resume,
    }
    try:
        return handlers[args.command](args)
    except StageFailed as exc:
        cause = exc.cause
        return _fail(cause, exc.exit_code, {"stage": exc.stage, "last_completed_stage": exc.last_completed})
    except BitMCTSError as exc:
        return _fail(exc, exc.exit_code)
    except ValueError as exc:
        # Domain invariants (outline construction, edit scripts) raise ValueError.
        return _fail(exc, InvariantViolation.exit_code)


if __name__ == "__main__":
    sys.exit(main())
