"""Build structured-reasoning datasets, run inference and score the results.

    dicekit --config run.json [--seed N] [--mock-script script.json] <command>

Commands: construct, infer, evaluate, consistency, signals, latency.
Logs go to stderr as JSON lines, results to the files named in the config,
and stdout carries only the summary table.

Exit codes: 0 success, 1 config error, 2 backend failure, 3 data error,
4 inference finished but some samples failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from .data import DataError
from .gateway import AuthError, GatewayError, ScriptedMock
from .metrics import EmptyEvaluation, format_table
from . import pipeline

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_BACKEND = 2
EXIT_DATA = 3
EXIT_PARTIAL = 4

COMMANDS = ("construct", "infer", "evaluate", "consistency", "signals", "latency")

_RECORD_FIELDS = set(vars(logging.LogRecord("", 0, "", 0, "", None, None)))


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {
            "time": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname.lower(),
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RECORD_FIELDS and key not in entry:
                entry[key] = value
        return json.dumps(entry, default=str, ensure_ascii=False)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("dicekit")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _error(kind: str, message: str, code: int, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, ensure_ascii=False) + "\n")
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dicekit", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", required=True, help="run configuration (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--mock-script", default=None, help="serve all model calls from this scripted mock")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("command", choices=COMMANDS)
    return parser


def _dispatch(args: argparse.Namespace) -> int:
    cfg = pipeline.load_config(args.config, seed=args.seed)
    mock = ScriptedMock.load(args.mock_script) if args.mock_script else None
    cmd = args.command
    if cmd == "construct":
        stats = pipeline.run_construct(cfg, mock)
        print(stats.summary())
        return EXIT_OK
    if cmd == "infer":
        preds = pipeline.run_infer(cfg, mock)
        n_failed = sum(not p.ok for p in preds)
        print(format_table([("samples", str(len(preds))), ("failed", str(n_failed))]))
        if preds and all(p.llm_output is None for p in preds):
            return EXIT_BACKEND
        return EXIT_PARTIAL if n_failed else EXIT_OK
    if cmd == "evaluate":
        print(pipeline.run_evaluate(cfg).table())
        return EXIT_OK
    if cmd == "consistency":
        print(pipeline.run_consistency(cfg).table())
        return EXIT_OK
    if cmd == "signals":
        rows = pipeline.run_signals(cfg)
        print(format_table([("rows", str(len(rows)))]))
        return EXIT_OK
    report = pipeline.run_latency(cfg, mock)
    print(
        format_table(
            [
                ("samples", str(report.n_samples)),
                ("runs", f"{len(report.per_run_means)}/{report.runs}"),
                ("s/sample", f"{report.mean_seconds_per_sample:.4f}"),
            ]
        )
    )
    return EXIT_OK if report.per_run_means else EXIT_BACKEND


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return _dispatch(args)
    except pipeline.ConfigError as exc:
        return _error("config-error", str(exc), EXIT_CONFIG, key=exc.key)
    except AuthError as exc:
        return _error("auth-error", str(exc), EXIT_BACKEND)
    except GatewayError as exc:
        return _error("backend-error", str(exc), EXIT_BACKEND, type=type(exc).__name__)
    except (DataError, EmptyEvaluation) as exc:
        return _error("data-error", str(exc), EXIT_DATA, type=type(exc).__name__)
    except OSError as exc:
        return _error("data-error", str(exc), EXIT_DATA, type=type(exc).__name__)
    except ValueError as exc:
        # remaining invariant violations from malformed inputs
        return _error("data-error", str(exc), EXIT_DATA, type=type(exc).__name__)


if __name__ == "__main__":
    sys.exit(main())
