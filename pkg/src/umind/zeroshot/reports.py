"""Tab-separated report tables and line-delimited per-query dumps."""

from __future__ import annotations

import json
import os
from typing import Mapping, Sequence

import numpy as np

from .ablation import AblationGrid
from .templates import RetrievalResult, TopKReport


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def write_topk_table(path: str | os.PathLike, rows: Mapping[str, Mapping[str, TopKReport]]) -> None:
    """Rows are methods (or cells); columns are top-1/top-5 per subject, then their average, in percent."""
    subjects: list[str] = []
    for per_subject in rows.values():
        for s in per_subject:
            if s not in subjects:
                subjects.append(s)
    header = ["method"] + [f"{s} {k}" for s in subjects for k in ("top-1", "top-5")] + ["average top-1", "average top-5"]
    lines = ["\t".join(header)]
    for method, per_subject in rows.items():
        cells = [method]
        for s in subjects:
            rep = per_subject.get(s)
            cells += [_pct(rep.top1), _pct(rep.top5)] if rep else ["", ""]
        reps = list(per_subject.values())
        cells += [_pct(np.mean([r.top1 for r in reps])), _pct(np.mean([r.top5 for r in reps]))]
        lines.append("\t".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_rank_dump(path: str | os.PathLike, results: Sequence[RetrievalResult], truth: Sequence[int],
                    task: str, subject: str = "", append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for res, t in zip(results, truth):
            record = {"task": task, "subject": subject, "query_id": res.query_id, "truth": int(t),
                      "rank": res.rank_of(int(t)), "top5": [int(c) for c in res.candidates[:5]]}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_ablation_table(path: str | os.PathLike, grid: AblationGrid) -> None:
    header = ["mode", "cell", "start_ms", "end_ms", "regions", "retrieval top-1", "retrieval top-5",
              "classification top-1", "classification top-5", "warning"]
    lines = ["\t".join(header)]
    for c in grid.cells:
        r, k = c.retrieval, c.classification
        lines.append("\t".join([
            grid.mode, c.label,
            "" if c.start_ms is None else f"{c.start_ms:g}", "" if c.end_ms is None else f"{c.end_ms:g}",
            ",".join(c.regions),
            _pct(r.top1) if r else "", _pct(r.top5) if r else "",
            _pct(k.top1) if k else "", _pct(k.top5) if k else "", c.warning,
        ]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_plot_data(path: str | os.PathLike, grid: AblationGrid) -> None:
    """(x, accuracy) table: x is the window's moving endpoint t, or the region label."""
    lines = ["x\tretrieval_top1\tclassification_top1"]
    for c in grid.cells:
        if c.retrieval is None:
            continue
        if grid.mode == "decreasing":
            x = f"{c.start_ms:g}"
        elif grid.mode in ("expanding", "sliding"):
            x = f"{c.end_ms:g}"
        else:
            x = c.label
        lines.append(f"{x}\t{c.retrieval.top1:.6f}\t{c.classification.top1:.6f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
