"""Full metric suite over a set of generated/reference pairs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ProtocolError
from .features import (
    COLUMN_NAMES,
    DISTANCE_EXTRACTORS,
    TWO_WAY_EXTRACTORS,
    FeatureExtractorHandle,
    feature_distance,
    paired_correlations,
    rank_generations,
    two_way_identification,
)
from .lowlevel import pixcorr, ssim

TABLE_COLUMNS = ("PixCorr", "SSIM") + tuple(COLUMN_NAMES[n] for n in TWO_WAY_EXTRACTORS + DISTANCE_EXTRACTORS)


@dataclass
class MetricReport:
    pixcorr: float
    ssim: float
    two_way: dict[str, float] = field(default_factory=dict)
    distance: dict[str, float] = field(default_factory=dict)
    raw_correlation: dict[str, float] = field(default_factory=dict)
    n_pairs: int = 0
    per_pair: list[dict] = field(default_factory=list)


def compute_report(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
                   extractors: Sequence[FeatureExtractorHandle], names: Sequence[str] | None = None) -> MetricReport:
    """Every extractor gets two-way accuracy, correlation distance and mean paired correlation.

    Which of these fills an extractor's table column follows the usual
    convention: two-way for AlexNet/Inception/CLIP, distance for
    EfficientNet/SwAV. The raw correlations go to their own columns.
    """
    if len(generated) != len(reference):
        raise ProtocolError(f"{len(generated)} generated vs {len(reference)} reference images")
    if not generated:
        raise ProtocolError("no image pairs")
    names = list(names) if names is not None else [str(i) for i in range(len(generated))]
    pc = [pixcorr(g, r) for g, r in zip(generated, reference)]
    ss = [ssim(g, r) for g, r in zip(generated, reference)]
    per_pair = [{"index": i, "name": n, "pixcorr": pc[i], "ssim": ss[i]} for i, n in enumerate(names)]
    rep = MetricReport(float(np.mean(pc)), float(np.mean(ss)), n_pairs=len(generated), per_pair=per_pair)
    for ex in extractors:
        gf, rf = ex.batch(generated), ex.batch(reference)
        corr = paired_correlations(gf, rf)
        rep.raw_correlation[ex.name] = float(corr.mean())
        rep.distance[ex.name] = feature_distance(gf, rf)
        if len(generated) >= 2:
            rep.two_way[ex.name] = two_way_identification(gf, rf)
        for row, c in zip(per_pair, corr):
            row[f"corr:{ex.name}"] = float(c)
    return rep


def ranked_reports(candidate_sets: Sequence[Sequence[np.ndarray]], reference: Sequence[np.ndarray],
                   extractors: Sequence[FeatureExtractorHandle], rank_by: FeatureExtractorHandle,
                   n_candidates: int = 10, names: Sequence[str] | None = None) -> list[MetricReport]:
    """Report per rank position: element 0 scores the best-ranked candidate of every set."""
    orders = [rank_generations(c, r, rank_by, n_candidates) for c, r in zip(candidate_sets, reference)]
    return [
        compute_report([c[o[k]] for c, o in zip(candidate_sets, orders)], reference, extractors, names)
        for k in range(n_candidates)
    ]


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def write_metric_table(path: str | os.PathLike, rows: dict[str, MetricReport]) -> None:
    """Eight headline columns, then labelled raw-correlation columns."""
    extra = [f"{COLUMN_NAMES.get(n, n)} raw corr" for n in TWO_WAY_EXTRACTORS + DISTANCE_EXTRACTORS]
    lines = ["\t".join(("method",) + TABLE_COLUMNS + tuple(extra) + ("n_pairs",))]
    for method, rep in rows.items():
        cells = [method, _fmt(rep.pixcorr), _fmt(rep.ssim)]
        cells += [_fmt(rep.two_way.get(n)) for n in TWO_WAY_EXTRACTORS]
        cells += [_fmt(rep.distance.get(n)) for n in DISTANCE_EXTRACTORS]
        cells += [_fmt(rep.raw_correlation.get(n)) for n in TWO_WAY_EXTRACTORS + DISTANCE_EXTRACTORS]
        cells.append(str(rep.n_pairs))
        lines.append("\t".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_pair_dump(path: str | os.PathLike, rep: MetricReport, method: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rep.per_pair:
            fh.write(json.dumps({"method": method, **row}, sort_keys=True) + "\n")
