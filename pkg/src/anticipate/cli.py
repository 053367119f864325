"""Command line: ``run``, ``batch`` and ``replay``.

Exit status is 0 iff every run completed and passed validation (or the replay
matched), 1 otherwise, and 2 for unusable arguments or invalid scenarios.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiment import BatchResult, batch, paired_deltas, replay, run, summarize, write_reports
from .scenario import ScenarioError, load_scenario


def parse_seeds(text: str) -> list:
    """``a..b`` (inclusive), a comma list, or a single integer."""
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(v) for v in text.split(",")]


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _conditions(text: str) -> tuple:
    return {"on": (True,), "off": (False,), "both": (True, False)}[text]


def scenario_paths(spec: str) -> list:
    p = Path(spec)
    if p.is_dir():
        paths = sorted(p.glob("*.yaml")) + sorted(p.glob("*.yml"))
        if not paths:
            raise FileNotFoundError(f"no scenario files in {spec}")
        return [str(x) for x in paths]
    return [spec]


def _fmt(stat) -> str:
    if stat["mean"] is None:
        return "-"
    return f"{stat['mean']:.3f}±{stat['std']:.3f}"


def _print_summary(res: BatchResult) -> None:
    print("scenario              cond  runs done  min_safety      avg_safety      trans_err       ang_err_deg     "
          "duration")
    for s in res.summary:
        print(f"{s['scenario_id']:<21} {'on' if s['anticipation'] else 'off':<5} {s['runs']:>4} {s['completed']:>4}  "
              f"{_fmt(s['min_safety']):<15} {_fmt(s['avg_safety']):<15} {_fmt(s['mean_translation_error']):<15} "
              f"{_fmt(s['mean_angular_error_deg']):<15} {_fmt(s['duration'])}")
    for r in res.reports:
        for p in r.problems:
            print(f"{r.scenario_id} seed {r.seed} {'on' if r.anticipation else 'off'}: {p}", file=sys.stderr)
        if r.incomplete:
            print(f"{r.scenario_id} seed {r.seed} {'on' if r.anticipation else 'off'}: incomplete", file=sys.stderr)


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    report = run(scenario, args.seed, args.anticipation, args.out)
    res = BatchResult([report], summarize([report]), paired_deltas([report]))
    if args.out:
        write_reports(res, args.out)
    _print_summary(res)
    print(f"digest {report.digest}")
    return 0 if res.ok else 1


def cmd_batch(args) -> int:
    paths = scenario_paths(args.scenarios)
    res = batch(paths, args.seeds, args.reps, _conditions(args.anticipation), args.out)
    _print_summary(res)
    return 0 if res.ok else 1


def cmd_replay(args) -> int:
    r = replay(args.trace)
    if r.ok:
        print(f"replay ok: {r.ticks} ticks, digest {r.actual_digest}")
        return 0
    where = "" if r.first_mismatch is None else f" (first mismatch at tick {r.first_mismatch})"
    print(f"replay mismatch{where}: expected {r.expected_digest}, got {r.actual_digest}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anticipate", description="Anticipatory navigation experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one seeded episode")
    p.add_argument("--scenario", required=True, help="scenario file or built-in scenario name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--anticipation", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--out", help="output directory for report.csv, report.jsonl and traces/")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("batch", help="run scenarios x seeds x repetitions in both conditions")
    p.add_argument("--scenarios", required=True, help="directory of scenario files, a file, or a built-in name")
    p.add_argument("--seeds", type=parse_seeds, default=[0], help="a..b inclusive, or a comma list")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--anticipation", choices=("on", "off", "both"), default="both")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("replay", help="re-run a recorded trace and compare digests")
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as e:
        print("error: invalid scenario", file=sys.stderr)
        for p in e.problems:
            print(f"  - {p}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
