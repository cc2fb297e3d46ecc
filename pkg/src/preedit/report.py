"""Evaluation report emission: rate-distortion rows, per-q aggregates, the
estimated-vs-actual bit-rate scatter and per-image deltas, as CSV and JSON."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from .params import atomic_write_text

ROWS_FILE = "evaluation.jsonl"
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"
METHODS = ("baseline", "smoother", "stn", "cascade")
ROW_FIELDS = ("image_id", "method", "q", "q_used", "bpp", "bpp_est", "mse", "psnr")


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Sample Pearson correlation; NaN when undefined."""
    n = len(xs)
    if n != len(ys):
        raise ValueError("pearson: length mismatch")
    if n < 2:
        return math.nan
    mx, my = math.fsum(xs) / n, math.fsum(ys) / n
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    if sxx == 0 or syy == 0:
        return math.nan
    return sxy / math.sqrt(sxx * syy)


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope and intercept of ys on xs."""
    n = len(xs)
    mx, my = math.fsum(xs) / n, math.fsum(ys) / n
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    slope = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sxx if sxx else math.nan
    return slope, my - slope * mx


def _number(v):
    """Plain decimal text, independent of locale; empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def write_rows(path, rows: Iterable) -> None:
    lines = [json.dumps(r if isinstance(r, dict) else r.to_dict(), sort_keys=True) for r in rows]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_rows(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def check_closest_fewer_bits(rows: Sequence[dict]) -> list[str]:
    """Edited rows whose bit-rate exceeds their baseline's."""
    base = {(r["image_id"], r["q"]): r["bpp"] for r in rows if r["method"] == "baseline"}
    problems = []
    for r in rows:
        if r["method"] == "baseline":
            continue
        key = (r["image_id"], r["q"])
        if key not in base:
            problems.append(f"{r['method']} row for {key} has no baseline row")
        elif r["bpp"] > base[key]:
            problems.append(f"{r['method']} row for {key} exceeds baseline bpp")
    return problems


def build_report(rows: Sequence[dict]) -> dict:
    """Aggregate rows into the report structure (pure function of the rows)."""
    rows = [dict(r) for r in rows]
    series = {}
    for method in METHODS:
        by_q = defaultdict(list)
        for r in rows:
            if r["method"] == method:
                by_q[r["q"]].append(r)
        series[method] = [
            {
                "q": q,
                "count": len(group),
                "bpp": math.fsum(r["bpp"] for r in group) / len(group),
                "mse": math.fsum(r["mse"] for r in group) / len(group),
                "psnr": math.fsum(r["psnr"] for r in group) / len(group),
            }
            for q, group in sorted(by_q.items())
        ]
    scatter = [
        {"image_id": r["image_id"], "q": r["q"], "bpp_est": r["bpp_est"], "bpp": r["bpp"]}
        for r in rows
        if r["method"] == "baseline" and r.get("bpp_est") is not None
    ]
    est = [p["bpp_est"] for p in scatter]
    act = [p["bpp"] for p in scatter]
    correlation = {"points": len(scatter), "pearson": pearson(est, act) if len(scatter) >= 2 else math.nan}
    if len(scatter) >= 2:
        correlation["slope"], correlation["intercept"] = linear_fit(est, act)
    base = {(r["image_id"], r["q"]): r for r in rows if r["method"] == "baseline"}
    deltas = []
    for r in rows:
        b = base.get((r["image_id"], r["q"]))
        if r["method"] == "baseline" or b is None:
            continue
        deltas.append(
            {
                "image_id": r["image_id"],
                "method": r["method"],
                "q": r["q"],
                "q_used": r["q_used"],
                "delta_bpp": r["bpp"] - b["bpp"],
                "delta_mse": r["mse"] - b["mse"],
                "delta_psnr": r["psnr"] - b["psnr"],
            }
        )
    return {"rows": rows, "series": series, "scatter": scatter, "correlation": correlation, "deltas": deltas}


def report_csv(report: dict) -> str:
    """All report sections as one CSV table, one ``section`` column per record type."""
    fields = ["section", "image_id", "method", "q", "q_used", "count", "bpp", "bpp_est", "mse", "psnr",
              "delta_bpp", "delta_mse", "delta_psnr", "points", "pearson", "slope", "intercept"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()

    def emit(section, record):
        writer.writerow({"section": section, **{k: _number(v) for k, v in record.items() if k in fields}})

    for r in report["rows"]:
        emit("row", r)
    for method, points in report["series"].items():
        for p in points:
            emit("series", {"method": method, **p})
    for p in report["scatter"]:
        emit("scatter", p)
    emit("correlation", report["correlation"])
    for d in report["deltas"]:
        emit("delta", d)
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def emit_report(run_dir) -> dict:
    """Read ``evaluation.jsonl`` from ``run_dir`` and write report.csv / report.json."""
    run_dir = Path(run_dir)
    missing = [name for name in (ROWS_FILE,) if not (run_dir / name).exists()]
    if missing:
        raise FileNotFoundError(f"incomplete run directory {run_dir}: missing {', '.join(missing)}")
    report = build_report(read_rows(run_dir / ROWS_FILE))
    atomic_write_text(run_dir / REPORT_JSON, json.dumps(_json_safe(report), indent=2, sort_keys=True))
    atomic_write_text(run_dir / REPORT_CSV, report_csv(report))
    return report


def csv_records(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
