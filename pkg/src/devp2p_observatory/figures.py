"""PNG figures drawn from a report, written next to its CSV files."""
from __future__ import annotations

from pathlib import Path
from typing import List, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analyzer import Report  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps the files byte-stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def classes_figure(report: Report, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    rows = report.classes
    ax.bar([r["class"] for r in rows], [r["pct"] for r in rows], color=["#999", "#d95f02", "#1b9e77"])
    ax.set_ylabel("% of peers")
    ax.set_title("Peer classes")
    return _save(fig, path)


def disconnects_figure(report: Report, path: Path) -> Path:
    rows = [r for r in report.disconnects if r["received"] or r["sent"]] or report.disconnects
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [r["reason"] for r in rows]
    y = range(len(rows))
    ax.barh(list(y), [r["received"] for r in rows], label="received")
    ax.barh(list(y), [r["sent"] for r in rows], left=[r["received"] for r in rows], label="sent")
    ax.set_yticks(list(y))
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xlabel("disconnects")
    ax.legend(fontsize=8)
    ax.set_title("Disconnect reasons")
    return _save(fig, path)


def neighbors_figure(report: Report, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    families = sorted({r["family"] for r in report.neighbors_hist})
    width = 0.8 / max(1, len(families))
    for i, fam in enumerate(families):
        rows = [r for r in report.neighbors_hist if r["family"] == fam]
        ax.bar([r["length"] + (i - len(families) / 2) * width for r in rows], [r["pct"] for r in rows],
               width=width, label=fam)
    ax.set_xlabel("nodes per FindNode exchange")
    ax.set_ylabel("% of exchanges")
    ax.set_xticks(range(0, 17, 2))
    if families:
        ax.legend(fontsize=8)
    ax.set_title("Neighbors reply lengths")
    return _save(fig, path)


def dial_efficiency_figure(report: Report, path: Path) -> Path:
    rows = report.dial_efficiency
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [r["attempts"] for r in rows]
    for col, label in (("pctA", "A"), ("pctB", "B"), ("pctC", "C")):
        ax.plot(xs, [r[col] for r in rows], marker="o", label=label)
    if xs and min(xs) > 0:
        ax.set_xscale("log")
    ax.set_xlabel("dial attempts")
    ax.set_ylabel("% of unique peers")
    ax.legend(fontsize=8)
    ax.set_title("Dial efficiency")
    return _save(fig, path)


def write_figures(report: Report, outdir: Union[str, Path]) -> List[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        classes_figure(report, out / "classes.png"),
        disconnects_figure(report, out / "disconnects.png"),
        neighbors_figure(report, out / "neighbors_hist.png"),
        dial_efficiency_figure(report, out / "dial_efficiency.png"),
    ]


__all__ = ["write_figures"]
