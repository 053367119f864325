"""Seeded experiment harness: single runs, batches, reports and trace replay.

A run report carries the safety and placement metrics of one closed-loop
episode. Batches aggregate reports per (scenario, condition) into mean and
sample standard deviation and pair on/off runs of the same seed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .scenario import ScenarioConfig, load_scenario
from .sim import RunResult, simulate

METRICS = ("min_safety", "avg_safety", "mean_translation_error", "mean_angular_error_deg", "duration", "ticks")
CSV_FIELDS = ("scenario_id", "seed", "repetition", "anticipation", "completed", "incomplete", "min_safety",
              "avg_safety", "mean_translation_error", "mean_angular_error_deg", "translation_errors",
              "angular_errors_deg", "duration", "ticks", "deviation_time", "first_seen_time", "person_reads",
              "failure", "digest", "trace")


@dataclass
class RunReport:
    scenario_id: str
    seed: int
    anticipation: bool
    completed: bool
    min_safety: Optional[float]
    avg_safety: Optional[float]
    translation_errors: list
    angular_errors_deg: list
    duration: float
    ticks: int
    digest: str
    repetition: int = 0
    deviation_time: Optional[float] = None
    first_seen_time: Optional[float] = None
    person_reads: int = 0
    failure: Optional[str] = None
    trace: Optional[str] = None
    problems: list = field(default_factory=list)

    @property
    def incomplete(self) -> bool:
        return not self.completed

    @property
    def mean_translation_error(self) -> Optional[float]:
        return float(np.mean(self.translation_errors)) if self.translation_errors else None

    @property
    def mean_angular_error_deg(self) -> Optional[float]:
        return float(np.mean(self.angular_errors_deg)) if self.angular_errors_deg else None

    @property
    def ok(self) -> bool:
        return self.completed and not self.problems

    @classmethod
    def from_result(cls, res: RunResult, repetition: int = 0, trace: Optional[str] = None) -> "RunReport":
        return cls(res.scenario_id, res.seed, res.anticipation, res.completed, res.min_safety, res.avg_safety,
                   [p["translation_error"] for p in res.placements],
                   [p["angular_error_deg"] for p in res.placements],
                   res.duration, res.ticks, res.digest, repetition, res.deviation_time, res.first_seen_time,
                   res.person_reads, res.failure, trace)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(incomplete=self.incomplete, mean_translation_error=self.mean_translation_error,
                 mean_angular_error_deg=self.mean_angular_error_deg)
        return d

    def csv_row(self) -> dict:
        d = self.to_dict()
        d["translation_errors"] = ";".join(f"{v:.6f}" for v in self.translation_errors)
        d["angular_errors_deg"] = ";".join(f"{v:.6f}" for v in self.angular_errors_deg)
        return {k: ("" if d[k] is None else d[k]) for k in CSV_FIELDS}


def condition(anticipation: bool) -> str:
    return "on" if anticipation else "off"


def validate_report(report: RunReport) -> list:
    """Post-run checks; an empty list means the run is valid."""
    problems = []
    if not report.anticipation and report.person_reads:
        problems.append(f"off-condition read person feedback {report.person_reads} times")
    if report.failure:
        problems.append(f"task failure: {report.failure}")
    for v in (report.min_safety, report.avg_safety):
        if v is not None and (not math.isfinite(v) or v < 0):
            problems.append(f"invalid safety distance {v}")
    return problems


def trace_name(scenario_id: str, seed: int, anticipation: bool, repetition: int = 0) -> str:
    return f"{scenario_id}_s{seed}_{condition(anticipation)}_r{repetition}.jsonl"


def run(scenario, seed: int, anticipation: bool, out_dir=None, repetition: int = 0) -> RunReport:
    """One seeded episode; with ``out_dir`` the per-tick trace lands in ``out_dir/traces``."""
    if not isinstance(scenario, ScenarioConfig):
        scenario = load_scenario(scenario)
    if out_dir is None:
        res = simulate(scenario, seed, anticipation)
        report = RunReport.from_result(res, repetition)
    else:
        tdir = Path(out_dir) / "traces"
        tdir.mkdir(parents=True, exist_ok=True)
        path = tdir / trace_name(scenario.id, seed, anticipation, repetition)
        with open(path, "w") as f:
            header = {"kind": "header", "scenario_id": scenario.id, "scenario": scenario.source,
                      "seed": seed, "anticipation": anticipation, "repetition": repetition}
            f.write(json.dumps(header) + "\n")
            res = simulate(scenario, seed, anticipation, trace=f)
            f.write(json.dumps({"kind": "footer", "digest": res.digest, "completed": res.completed,
                                "ticks": res.ticks}) + "\n")
        report = RunReport.from_result(res, repetition, str(path))
    report.problems = validate_report(report)
    return report


# ---------------------------------------------------------------- aggregation

def _stats(values) -> dict:
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return {"n": 0, "mean": None, "std": None}
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return {"n": len(vals), "mean": float(np.mean(vals)), "std": std}


def summarize(reports: Iterable[RunReport]) -> list:
    """Mean and sample std of every metric per (scenario, condition), sorted by key."""
    groups: dict = {}
    for r in reports:
        groups.setdefault((r.scenario_id, r.anticipation), []).append(r)
    out = []
    for (sid, ant), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], not kv[0][1])):
        row = {"scenario_id": sid, "anticipation": ant, "runs": len(rs),
               "completed": sum(r.completed for r in rs)}
        for m in METRICS:
            row[m] = _stats(getattr(r, m) for r in rs)
        out.append(row)
    return out


def paired_deltas(reports: Iterable[RunReport]) -> list:
    """on minus off for every metric of runs sharing (scenario, seed, repetition)."""
    pairs: dict = {}
    for r in reports:
        pairs.setdefault((r.scenario_id, r.seed, r.repetition), {})[r.anticipation] = r
    out = []
    for (sid, seed, rep), pr in sorted(pairs.items()):
        if True not in pr or False not in pr:
            continue
        on, off = pr[True], pr[False]
        row = {"scenario_id": sid, "seed": seed, "repetition": rep}
        for m in METRICS:
            a, b = getattr(on, m), getattr(off, m)
            row[m] = None if a is None or b is None else float(a) - float(b)
        out.append(row)
    return out


@dataclass
class BatchResult:
    reports: list
    summary: list
    deltas: list

    @property
    def ok(self) -> bool:
        return bool(self.reports) and all(r.ok for r in self.reports)


def _sort_key(r: RunReport):
    return r.scenario_id, r.seed, r.repetition, not r.anticipation


def batch(scenarios, seeds, repetitions: int = 1, conditions=(True, False), out_dir=None) -> BatchResult:
    """Every scenario x seed x repetition x condition; reports merged in a fixed order."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    configs = [s if isinstance(s, ScenarioConfig) else load_scenario(s) for s in scenarios]
    reports = []
    for sc in configs:
        for seed in seeds:
            for rep in range(repetitions):
                for ant in conditions:
                    reports.append(run(sc, seed, ant, out_dir, rep))
    if not reports:
        raise ValueError("batch needs at least one run")
    reports.sort(key=_sort_key)
    res = BatchResult(reports, summarize(reports), paired_deltas(reports))
    if out_dir is not None:
        write_reports(res, out_dir)
    return res


def write_reports(res: BatchResult, out_dir) -> None:
    """``report.csv`` (one row per run) and ``report.jsonl`` (runs, then summaries, then paired deltas)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in res.reports:
            w.writerow(r.csv_row())
    with open(out / "report.jsonl", "w") as f:
        for r in res.reports:
            f.write(json.dumps({"kind": "run", **r.to_dict()}) + "\n")
        for s in res.summary:
            f.write(json.dumps({"kind": "summary", **s}) + "\n")
        for d in res.deltas:
            f.write(json.dumps({"kind": "delta", **d}) + "\n")


# ---------------------------------------------------------------- replay

@dataclass
class ReplayResult:
    ok: bool
    expected_digest: str
    actual_digest: str
    ticks: int
    first_mismatch: Optional[int] = None   # tick index of the first differing line


def read_trace(path):
    """(header, tick records as raw lines, footer) of a trace file."""
    with open(path) as f:
        lines = f.read().splitlines()
    if len(lines) < 2:
        raise ValueError(f"{path}: not a trace file")
    header, footer = json.loads(lines[0]), json.loads(lines[-1])
    if header.get("kind") != "header" or footer.get("kind") != "footer":
        raise ValueError(f"{path}: missing trace header or footer")
    return header, lines[1:-1], footer


def replay(path) -> ReplayResult:
    """Re-run the episode a trace was recorded from and compare it line by line."""
    import io

    header, lines, footer = read_trace(path)
    src = header.get("scenario")
    scenario = load_scenario(src if src and Path(src).exists() else header["scenario_id"])
    buf = io.StringIO()
    res = simulate(scenario, int(header["seed"]), bool(header["anticipation"]), trace=buf)
    fresh = buf.getvalue().splitlines()
    mismatch = next((i for i, (a, b) in enumerate(zip(lines, fresh)) if a != b), None)
    if mismatch is None and len(lines) != len(fresh):
        mismatch = min(len(lines), len(fresh))
    ok = mismatch is None and res.digest == footer["digest"]
    return ReplayResult(ok, footer["digest"], res.digest, res.ticks, mismatch)
