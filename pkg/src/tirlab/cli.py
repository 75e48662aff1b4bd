"""Command-line entry point: gen-sandbox, train, eval, synth, report."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import (
    SECTIONS, ConfigError, RunConfig, build_config, config_keys, flag_name, load_config_file,
)
from .sandbox import corpus_stats, generate_corpus, read_corpus, write_corpus
from .synth.clients import ChatCompletionClient, ClientError
from .synth.mock import mock_client
from .synth.pipeline import run_pipeline, write_outputs
from .trainer import (
    HEADS, PolicyTable, ScriptedPolicy, evaluate, optimal_rule, read_metrics, train, write_metrics,
)

REPORT_SERIES = ("valid_tool_reward", "accuracy", "mean_tool_calls", "mean_reward", "format_quality")
SCRIPTED_POLICIES = ("optimal", "zero")


class CommandError(RuntimeError):
    pass


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as err:
        raise CommandError(f"cannot write {path}: {err.strerror}") from None


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CommandError(f"cannot create output directory {path}: {err.strerror}") from None


def _load_corpus(cfg: RunConfig):
    path = cfg.corpus_path
    if not path.is_file():
        raise CommandError(f"corpus not found: {path} (run gen-sandbox first or pass --corpus)")
    try:
        return read_corpus(path)
    except (ValueError, KeyError, TypeError) as err:
        raise CommandError(f"malformed corpus {path}: {err}") from None


# -- commands --------------------------------------------------------------------


def cmd_gen_sandbox(cfg: RunConfig, args: argparse.Namespace) -> int:
    items = generate_corpus(cfg.run.count, cfg.run.seed, cfg.sandbox)
    path = cfg.corpus_path
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_corpus(path, items)
    except OSError as err:
        raise CommandError(f"cannot write {path}: {err.strerror}") from None
    stats = corpus_stats(items)
    _write_text(path.with_name(path.stem + "_stats.json"), _dump(stats) + "\n")
    print(f"wrote {len(items)} items to {path}")
    print(_dump(stats))
    return 0


def _run_name(cfg: RunConfig) -> str:
    return f"{cfg.run.algo}_s{cfg.run.seed}"


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    corpus = _load_corpus(cfg)
    _ensure_dir(cfg.out)
    result = train(corpus, cfg.trainer, cfg.run.algo, cfg.run.seed, cfg.reward, cfg.budget)
    metrics = cfg.out / f"metrics_{_run_name(cfg)}.csv"
    policy = cfg.out / f"policy_{_run_name(cfg)}.tsv"
    write_metrics(metrics, result.metrics)
    result.policy.save(policy)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {cfg.run.algo} for {len(result.metrics)} steps")
    for key in ("valid_tool_reward", "accuracy", "mean_tool_calls"):
        if key in last:
            print(f"final {key}: {last[key]:.4f}")
    print(f"metrics: {metrics}")
    print(f"policy: {policy}")
    return 0


def _load_policy(cfg: RunConfig):
    source = cfg.run.policy
    if not source:
        raise CommandError("eval needs --policy (a policy file, 'optimal' or 'zero')")
    if source == "optimal":
        return ScriptedPolicy(optimal_rule, cfg.trainer.max_turns), source
    if source == "zero":
        return PolicyTable(cfg.trainer.max_turns), source
    path = Path(source)
    if not path.is_file():
        raise CommandError(f"policy file not found: {path}")
    try:
        policy = PolicyTable.load(path)
    except (ValueError, OSError) as err:
        raise CommandError(f"malformed policy file: {err}") from None
    if policy.max_turns != cfg.trainer.max_turns:
        raise CommandError(
            f"policy was trained with max_turns={policy.max_turns}, config has {cfg.trainer.max_turns}"
        )
    return policy, path.stem


def routing_table(report: dict[str, Any]) -> str:
    width = max(len(h) for h in HEADS) + 2
    lines = ["cue     " + "".join(h.rjust(width) for h in HEADS)]
    for cue, row in report["routing"].items():
        lines.append(cue.ljust(8) + "".join(f"{row[h]:.3f}".rjust(width) for h in HEADS))
    return "\n".join(lines)


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    policy, name = _load_policy(cfg)
    corpus = _load_corpus(cfg)
    report = evaluate(policy, corpus, cfg.trainer, cfg.run.seed, cfg.reward, cfg.budget)
    out = cfg.out / f"eval_{name}.json"
    _write_text(out, _dump(report) + "\n")
    for key in ("accuracy", "format_quality", "valid_tool_reward", "mean_tool_calls"):
        print(f"{key}: {report[key]:.4f}")
    print("first-action routing by intent cue:")
    print(routing_table(report))
    print(f"report: {out}")
    return 0


def _synth_client(cfg: RunConfig):
    s = cfg.synth
    if s.client == "mock":
        try:
            return mock_client(s.mock_script, cfg.run.seed)
        except ValueError as err:
            raise ConfigError(str(err)) from None
    return ChatCompletionClient(
        s.endpoint, s.model, s.temperature, s.token_env, s.timeout, s.retries
    )


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    corpus = _load_corpus(cfg)
    client = _synth_client(cfg)
    _ensure_dir(cfg.out)
    report = run_pipeline(corpus, client, cfg.synth, budget=cfg.budget, max_turns=cfg.trainer.max_turns)
    exemplars = cfg.out / "exemplars.jsonl"
    provenance = cfg.out / "provenance.jsonl"
    write_outputs(report, exemplars, provenance)
    print(f"items: {len(report.items)}")
    for stage, counts in report.stage_counts().items():
        print(f"{stage:<11}" + "  ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"exemplars: {exemplars} ({len(report.exemplars)})")
    print(f"provenance: {provenance}")
    return 0


def crossing_step(rows: list[dict[str, float]], threshold: float, key: str = "valid_tool_reward") -> int | None:
    """First step whose ``key`` reaches ``threshold``; None if it never does."""
    for row in rows:
        if row[key] >= threshold:
            return int(row["step"])
    return None


def _cell(v: float) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return repr(float(v))


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    files = [Path(p) for p in args.metrics]
    runs = []
    header0 = None
    for path in files:
        if not path.is_file():
            raise CommandError(f"metrics file not found: {path}")
        try:
            header, rows = read_metrics(path)
        except (ValueError, StopIteration) as err:
            raise CommandError(f"malformed metrics file {path}: {err}") from None
        if header0 is None:
            header0 = header
        elif header != header0:
            raise CommandError(f"schema mismatch: {path} has different columns than {files[0]}")
        if "step" not in header or "valid_tool_reward" not in header:
            raise CommandError(f"{path} is not a training metrics table")
        runs.append((path.stem, rows))
    names = [n for n, _ in runs]
    if len(set(names)) != len(names):
        raise CommandError("metrics files must have distinct names")
    _ensure_dir(cfg.out)
    thr = cfg.run.threshold
    summary = ["run\tcrossing_step\tfinal_valid_tool_reward\tfinal_mean_tool_calls\tfinal_accuracy\tsteps"]
    for name, rows in runs:
        cross = crossing_step(rows, thr)
        last = rows[-1] if rows else None
        finals = [_cell(last[k]) if last else "nan" for k in ("valid_tool_reward", "mean_tool_calls", "accuracy")]
        summary.append("\t".join([name, "none" if cross is None else str(cross), *finals, str(len(rows))]))
    text = "\n".join(summary) + "\n"
    _write_text(cfg.out / "report_summary.tsv", text)
    steps = sorted({int(r["step"]) for _, rows in runs for r in rows})
    by_step = [{int(r["step"]): r for r in rows} for _, rows in runs]
    for key in REPORT_SERIES:
        lines = ["step\t" + "\t".join(names)]
        for s in steps:
            lines.append(str(s) + "\t" + "\t".join(_cell(m[s][key]) if s in m else "" for m in by_step))
        _write_text(cfg.out / f"series_{key}.tsv", "\n".join(lines) + "\n")
    print(f"threshold: valid_tool_reward >= {thr}")
    print(text, end="")
    print(f"plot data: {cfg.out}/series_*.tsv")
    return 0


COMMANDS = {
    "gen-sandbox": (cmd_gen_sandbox, "generate a synthetic video/question corpus"),
    "train": (cmd_train, "train the tabular policy on a corpus"),
    "eval": (cmd_eval, "evaluate a policy file (or 'optimal' / 'zero') on a corpus"),
    "synth": (cmd_synth, "run the trajectory synthesis pipeline"),
    "report": (cmd_report, "compare training runs from metrics files"),
}


# -- parsing ---------------------------------------------------------------------


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", metavar="FILE", default=None, help="JSON config file (flags override it)")
    groups = {s: parent.add_argument_group(f"{s} settings") for s in SECTIONS}
    for section, key, typ, default in config_keys():
        g = groups[section]
        dest = f"cfg__{section}__{key}"
        shown = json.dumps(default)
        if typ is bool:
            g.add_argument(
                flag_name(key), dest=dest, action=argparse.BooleanOptionalAction,
                default=argparse.SUPPRESS, help=f"{section}.{key} (default: {shown})",
            )
        else:
            g.add_argument(
                flag_name(key), dest=dest, type=typ, default=argparse.SUPPRESS,
                metavar=typ.__name__.upper(), help=f"{section}.{key} (default: {shown})",
            )
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tirlab",
        description="Synthetic tool-integrated reasoning lab.",
        epilog="Configuration precedence: flags > --config file > defaults.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    parent = _config_parent()
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[parent], help=help_text, description=help_text)
        if name == "report":
            p.add_argument("metrics", nargs="+", help="metrics CSV files written by train")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    layers = []
    if args.config:
        layers.append(load_config_file(args.config))
    flags = {}
    for dest, value in vars(args).items():
        if dest.startswith("cfg__"):
            _, section, key = dest.split("__")
            flags[(section, key)] = value
    layers.append(flags)
    return build_config(*layers)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        handler = COMMANDS[args.command][0]
        return handler(cfg, args)
    except ConfigError as err:
        print(f"tirlab {args.command}: invalid config: {err}", file=sys.stderr)
        return 2
    except (CommandError, ClientError, ValueError) as err:
        print(f"tirlab {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
