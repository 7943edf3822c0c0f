"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 validation failure, 3 safety-property
violation during trials, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .audit import analytics_csv, analyze, export_cqi, import_cqi
from .drug_library import parse_library
from .errors import AuditError, InvalidScenario, InvariantViolation, LibraryError
from .simulator import load_scenario, run_monte_carlo, trial_logs

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_VIOLATION, EXIT_IO = 0, 1, 2, 3, 4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="infusion-concurrence",
                description="Concurrence protocol simulator for smart infusion pumps.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate-lib", help="parse and validate a drug library file")
    v.add_argument("library")

    r = sub.add_parser("run", help="run a Monte Carlo scenario")
    r.add_argument("scenario")
    r.add_argument("--out", help="report path (stdout when omitted)")
    r.add_argument("--format", choices=("json", "csv"), default="json",
                   help="json report, or csv of per-trial outcomes")
    r.add_argument("--seed", type=int)
    r.add_argument("--trials", type=int)
    r.add_argument("--export-cqi", metavar="PATH",
                   help="write CQI logs of the first trials as json-lines")

    a = sub.add_parser("report", help="analyze a CQI export")
    a.add_argument("cqi")
    a.add_argument("--out")
    a.add_argument("--format", choices=("json", "csv"), default="json")
    return p


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _validate_lib(args) -> int:
    try:
        text = Path(args.library).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        lib = parse_library(text)
    except LibraryError as exc:
        print(f"INVALID {type(exc).__name__}: {exc}")
        return EXIT_INVALID
    print(f"OK version={lib.version} entries={len(lib.entries)} digest={lib.digest}")
    return EXIT_OK


def _run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        if args.seed is not None or args.trials is not None:
            scenario = scenario.with_overrides(seed=args.seed, trials=args.trials)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidScenario, LibraryError) as exc:
        print(f"INVALID {type(exc).__name__}: {exc}")
        return EXIT_INVALID
    print(f"seed={scenario.seed} trials={scenario.trials}", file=sys.stderr)
    try:
        report = run_monte_carlo(scenario, collect_outcomes=args.format == "csv")
        logs = trial_logs(scenario) if args.export_cqi else []
    except InvariantViolation as exc:
        print(f"PROPERTY VIOLATION: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    text = report.outcomes_csv() if args.format == "csv" else report.to_json()
    try:
        _emit(text, args.out)
        if args.export_cqi:
            events = [e for log in logs for e in log.events]
            Path(args.export_cqi).write_text(export_cqi(events, "json-lines"), encoding="utf-8")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _report(args) -> int:
    try:
        text = Path(args.cqi).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        events = import_cqi(text)
    except AuditError as exc:
        print(f"INVALID {type(exc).__name__}: {exc}")
        return EXIT_INVALID
    result = analyze(events)
    out = analytics_csv(result) if args.format == "csv" else json.dumps(result, sort_keys=True, indent=2) + "\n"
    try:
        _emit(out, args.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    handler = {"validate-lib": _validate_lib, "run": _run, "report": _report}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
