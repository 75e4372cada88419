"""Speedup metrics, run-log parsing and report tables."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

ARROW = "→"
SPLITS = ("train", "valid")
SPLIT_TITLES = {"train": "Training", "valid": "Validation"}


def geomean(values: Iterable[float]) -> float:
    """Geometric mean of the strictly positive finite values; nan if there are none."""
    vals = [float(v) for v in values if v is not None and v > 0 and math.isfinite(v)]
    if not vals:
        return math.nan
    return math.exp(sum(math.log(v) for v in vals) / len(vals))


def format_sequence(actions) -> str:
    return ARROW.join(str(a) for a in actions)


def parse_sequence(text: str) -> list:
    text = text.strip()
    if not text:
        return []
    return [int(t) for t in text.replace("->", ARROW).split(ARROW)]


def ratio(agent: float, o3: float) -> float:
    return agent / o3


def fmt_x(v: float) -> str:
    return f"{v:.2f}x"


@dataclass
class ProgramRow:
    split: str
    program_id: str
    sequence: str
    o3_speedup: float
    agent_speedup: float
    best_observed: float = math.nan

    @property
    def ratio(self) -> float:
        return ratio(self.agent_speedup, self.o3_speedup)


def read_log(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{n}: not JSON ({e.msg})") from None
            if not {"step", "phase", "program_id", "metric", "value"} <= rec.keys():
                raise ValueError(f"{path}:{n}: missing fields")
            records.append(rec)
    return records


def evaluations(records) -> dict:
    """step -> program_id -> {metric: value} for eval records."""
    out: dict = defaultdict(lambda: defaultdict(dict))
    for r in records:
        if r["phase"] == "eval":
            out[r["step"]][r["program_id"]][r["metric"]] = r["value"]
    return {s: dict(v) for s, v in sorted(out.items())}


def rows_at(evals: dict, step: Optional[int] = None) -> list:
    if not evals:
        return []
    step = max(evals) if step is None else step
    rows = []
    for pid, m in sorted(evals[step].items()):
        if "agent_speedup" not in m or "o3_speedup" not in m:
            continue
        rows.append(ProgramRow(m.get("split", "train"), pid, m.get("sequence", ""),
                               float(m["o3_speedup"]), float(m["agent_speedup"]),
                               float(m.get("best_observed", math.nan))))
    return rows


def top_bottom(rows, split: str, k: int = 5) -> list:
    """Worst k then best k by agent-vs-O3 ratio, ascending."""
    chosen = sorted((r for r in rows if r.split == split), key=lambda r: (r.ratio, r.program_id))
    if len(chosen) <= 2 * k:
        return chosen
    return chosen[:k] + chosen[-k:]


def program_table(rows, k: int = 5) -> str:
    header = ("Dataset", "Source Code", "Action Sequence", "O3", "Agent", "Agent vs O3")
    lines = []
    for split in SPLITS:
        for r in top_bottom(rows, split, k):
            lines.append((SPLIT_TITLES.get(split, split), r.program_id, r.sequence,
                          fmt_x(r.o3_speedup), fmt_x(r.agent_speedup), fmt_x(r.ratio)))
    widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
    out = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    out += ["  ".join(str(c).ljust(w) for c, w in zip(line, widths)).rstrip() for line in lines]
    return "\n".join(out)


def aggregate_series(evals: dict) -> list:
    """One row per evaluation: agent, best-observed and O3 geomeans for each set.

    Best-observed is a running maximum per program, so its curve is clamped
    to be non-decreasing even when a program drops out of a later report.
    """
    series = []
    best_so_far = {s: -math.inf for s in SPLITS}
    for step in sorted(evals):
        rows = rows_at(evals, step)
        row = {"step": step}
        for split in SPLITS:
            sub = [r for r in rows if r.split == split]
            row[f"{split}_agent"] = geomean(r.agent_speedup for r in sub)
            row[f"{split}_o3"] = geomean(r.o3_speedup for r in sub)
            best = geomean(r.best_observed for r in sub)
            if not math.isnan(best):
                best_so_far[split] = max(best_so_far[split], best)
            row[f"{split}_best"] = best_so_far[split] if best_so_far[split] > -math.inf else math.nan
        series.append(row)
    return series


SERIES_COLUMNS = ["step"] + [f"{s}_{m}" for s in SPLITS for m in ("agent", "best", "o3")]


def write_series_csv(series, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SERIES_COLUMNS)
        w.writeheader()
        for row in series:
            w.writerow({k: row[k] for k in SERIES_COLUMNS})


def write_series_svg(series, path, width=640, height=360) -> None:
    """Static line plot, one panel per set."""
    colors = {"agent": "#1f77b4", "best": "#2ca02c", "o3": "#d62728"}
    pad = 40
    panel_w = (width - 3 * pad) / 2
    steps = [r["step"] for r in series] or [0]
    vals = [r[c] for r in series for c in SERIES_COLUMNS[1:] if not math.isnan(r[c])] or [1.0]
    lo, hi = min(min(vals), 1.0), max(max(vals), 1.0)
    hi = hi if hi > lo else lo + 1
    smin, smax = min(steps), max(steps)
    smax = smax if smax > smin else smin + 1
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             '<rect width="100%" height="100%" fill="white"/>']
    for i, split in enumerate(SPLITS):
        x0 = pad + i * (panel_w + pad)

        def px(s):
            return x0 + (s - smin) / (smax - smin) * panel_w

        def py(v):
            return height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)

        parts.append(f'<rect x="{x0:.1f}" y="{pad}" width="{panel_w:.1f}" height="{height - 2 * pad}" '
                     'fill="none" stroke="#999"/>')
        parts.append(f'<text x="{x0:.1f}" y="{pad - 8}" font-size="12">{SPLIT_TITLES[split]}</text>')
        for metric, color in colors.items():
            pts = [(px(r["step"]), py(r[f"{split}_{metric}"])) for r in series
                   if not math.isnan(r[f"{split}_{metric}"])]
            if pts:
                d = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
                parts.append(f'<polyline points="{d}" fill="none" stroke="{color}"/>')
    for j, (metric, color) in enumerate(colors.items()):
        parts.append(f'<text x="{pad + 90 * j}" y="{height - 10}" font-size="11" fill="{color}">{metric}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def build_report(log_path, out_dir, svg: bool = False, k: int = 5) -> dict:
    """Write table.txt, series.csv (and series.svg); return what was written."""
    evals = evaluations(read_log(log_path))
    if not evals:
        raise ValueError(f"{log_path}: no evaluation records")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = rows_at(evals)
    table = program_table(rows, k)
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    series = aggregate_series(evals)
    write_series_csv(series, out / "series.csv")
    written = {"table": out / "table.txt", "series": out / "series.csv", "rows": rows,
               "text": table, "aggregate": series}
    if svg:
        write_series_svg(series, out / "series.svg")
        written["svg"] = out / "series.svg"
    return written
