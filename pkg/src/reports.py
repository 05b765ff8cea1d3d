"""
Result files: one RFC-4180 CSV per report, plus manifest.json and summary.json.

Reals are written as repr(float), the shortest decimal that parses back to
the same double. Timestamps live only in the manifest.
"""
import csv
import json
from datetime import datetime, timezone
from functools import singledispatch
from typing import Any, Dict, Iterable, List, Sequence

from . import __version__
from .concentration import ConcentrationReport, ReductionReport
from .flows import LipschitzCertificate, Trajectory
from .wep import WepReport

CSV_NAMES = {
    ConcentrationReport: "concentration.csv",
    ReductionReport: "reduction.csv",
    WepReport: "wep.csv",
    LipschitzCertificate: "lipschitz.csv",
    Trajectory: "trajectory.csv",
}


def fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, str)):
        return str(value)
    return repr(float(value))


def _write_rows(path, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


@singledispatch
def emit_csv(report, path):
    raise TypeError(f"No CSV layout for {type(report).__name__}")


@emit_csv.register
def _(report: ConcentrationReport, path):
    _write_rows(
        path,
        ["rho", "empirical_tail", "dkw_margin", "bound_log", "fitted_exponent"],
        (
            (rho, tail, margin, bound, report.fitted_exponent)
            for rho, tail, margin, bound in zip(
                report.rho_grid, report.empirical_tail, report.dkw_margin, report.bound_log
            )
        ),
    )


@emit_csv.register
def _(report: ReductionReport, path):
    _write_rows(
        path,
        ["observable", "count", "dispersion_before", "dispersion_after",
         "contraction_ratio", "predicted_ratio", "ratio_stderr", "verdict"],
        [(report.observable, report.count, report.dispersion_before, report.dispersion_after,
          report.contraction_ratio, report.predicted_ratio, report.ratio_stderr, report.verdict)],
    )


@emit_csv.register
def _(report: WepReport, path):
    rows = []
    for i, tau in enumerate(report.tau_grid):
        for j, system in enumerate(report.systems):
            for mu in range(1, 5):
                rows.append((tau, system.name, mu, report.x_mean[j, i, mu - 1],
                             report.x_stderr[j, i, mu - 1], report.com_reference[i, mu - 1]))
    _write_rows(path, ["tau", "system", "mu", "x_mean", "x_stderr", "m_ref"], rows)


@emit_csv.register
def _(report: LipschitzCertificate, path):
    _write_rows(
        path,
        ["estimate", "pairs_tested", "passed"],
        [(report.estimate, report.pairs_tested, report.passed)],
    )


@emit_csv.register
def _(report: Trajectory, path):
    dim = report.samples[0][1].u.size if report.samples else 0
    header = ["tau"] + [f"u_{i}" for i in range(dim)] + [f"p_{i}" for i in range(dim)]
    _write_rows(path, header, ([tau, *state.u, *state.p] for tau, state in report.samples))


def csv_name(report) -> str:
    return CSV_NAMES[type(report)]


def _json_safe(value):
    if isinstance(value, float) and value != value:
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_json(path, payload: Dict[str, Any]):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_json_safe(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def write_summary(path, command: str, run_id: str, verdicts: Dict[str, bool], metrics: Dict[str, Any]):
    write_json(path, {
        "command": command,
        "run_id": run_id,
        "verdicts": verdicts,
        "passed": all(verdicts.values()),
        "metrics": metrics,
    })


def write_manifest(path, run_id: str, seed: int, config: Dict[str, Any], started: datetime,
                   finished: datetime, verdicts: Dict[str, bool], files: List[str]):
    write_json(path, {
        "run_id": run_id,
        "seed": seed,
        "config": config,
        "version": __version__,
        "started": started.isoformat(),
        "finished": finished.isoformat(),
        "verdicts": verdicts,
        "files": sorted(files),
    })


def utc_now() -> datetime:
    return datetime.now(timezone.utc)
