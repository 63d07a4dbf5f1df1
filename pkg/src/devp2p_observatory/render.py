"""Report rendering: CSV files, JSON and a plain-text summary."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Dict, List, Union

from .analyzer import Report

# files every report writes, with their documented column order
CSV_TABLES = ("messages", "classes", "disconnects", "neighbors_hist", "chains", "dial_efficiency")
EXTRA_TABLES = ("disconnects_by_family", "neighbors_mix", "findnode")


def table_csv(report: Report, name: str) -> str:
    cols = Report.COLUMNS[name]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in report.table(name):
        w.writerow(["" if row.get(c) is None else row.get(c) for c in cols])
    return buf.getvalue()


def write_csvs(report: Report, outdir: Union[str, Path]) -> List[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in CSV_TABLES + EXTRA_TABLES:
        p = out / f"{name}.csv"
        p.write_text(table_csv(report, name))
        paths.append(p)
    return paths


def render_json(report: Report) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"


def write_json(report: Report, outdir: Union[str, Path]) -> Path:
    p = Path(outdir) / "report.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(render_json(report))
    return p


def _fmt_table(rows: List[Dict], cols) -> List[str]:
    cells = [[str(c) for c in cols]] + [["" if r.get(c) is None else str(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return lines


def render_text(report: Report) -> str:
    out: List[str] = []
    s = report.summary
    out.append(f"events {s['events']}  peers {s['peers']}  disconnects {s['disconnects']}  "
               f"dial attempts {s['dialAttempts']}  quarantined {s['quarantined']}")
    for name in CSV_TABLES + EXTRA_TABLES:
        rows = report.table(name)
        if not rows:
            continue
        out.append("")
        out.append(f"[{name}]")
        out.extend(_fmt_table(rows, Report.COLUMNS[name]))
    f = report.false_ip
    out.append("")
    out.append(f"[false_ip] flagged {f['flagged']} of {f['pingingPeers']} pinging peers ({f['pct']}%)")
    for ip, n in f["claimedIps"].items():
        out.append(f"  {ip}: {n}")
    return "\n".join(out) + "\n"


__all__ = ["CSV_TABLES", "EXTRA_TABLES", "table_csv", "write_csvs", "render_json", "write_json",
           "render_text"]
