"""Temporal-window and electrode-region ablation grids.

By default every cell retrains the encoder from the same seed on the
restricted input, since the input shape changes. ``retrain=False`` instead
zeroes the excluded samples/channels and reuses one fixed model: quicker,
but not equivalent to retraining.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data.preprocess import crop_time_window, select_channels
from ..data.types import ChannelGroupMap, TrialSet
from ..encoders import EncoderConfig, UMindModel, embed_trials
from ..errors import UMindError
from .templates import TemplateBank, TopKReport, classify, retrieve, topk_accuracy

log = logging.getLogger(__name__)

TEMPORAL_MODES = ("expanding", "sliding", "decreasing")


@dataclass
class AblationContext:
    """Everything a cell needs to (re)train and evaluate."""

    train: TrialSet
    val: TrialSet
    test: TrialSet
    bank: TemplateBank
    image_provider: object
    text_provider: object
    encoder_cfg: EncoderConfig
    alignment_cfg: object
    model: UMindModel | None = None


@dataclass
class AblationCell:
    label: str
    start_ms: float | None = None
    end_ms: float | None = None
    regions: tuple[str, ...] = ()
    retrieval: TopKReport | None = None
    classification: TopKReport | None = None
    warning: str = ""


@dataclass
class AblationGrid:
    mode: str
    cells: list[AblationCell] = field(default_factory=list)
    retrain: bool = True


def evaluate(model: UMindModel, test: TrialSet, bank: TemplateBank):
    """Retrieval and classification reports plus the raw rankings."""
    zv, zs = embed_trials(model, test.trials)
    ids = [t.image_id for t in test.trials]
    cats = [t.category_id for t in test.trials]
    ret = retrieve(zv, bank, ids)
    cls = classify(zs, bank, ids)
    return (topk_accuracy(ret, ids, 5, "retrieval"), topk_accuracy(cls, cats, 5, "classification"), ret, cls)


def fit_encoder_config(cfg: EncoderConfig, channels: int, samples: int) -> EncoderConfig:
    """Same architecture resized to a restricted input; kernels shrink to fit."""
    return dataclasses.replace(
        cfg, channels=channels, samples=samples,
        temporal_kernel=min(cfg.temporal_kernel, samples), pool_kernel=min(cfg.pool_kernel, samples),
    )


def _train_and_eval(ctx: AblationContext, train: TrialSet, val: TrialSet, test: TrialSet):
    from ..alignment.training import new_train_state, train as run_training

    c, t = train.shape
    cfg = fit_encoder_config(ctx.encoder_cfg, c, t)
    state = new_train_state(cfg, ctx.alignment_cfg)
    state = run_training(state, train, val, ctx.image_provider, ctx.text_provider, ctx.alignment_cfg)
    return evaluate(state.best_model(), test, ctx.bank)


def temporal_windows(duration_ms: float, mode: str, step_ms: float, width_ms: float = 100.0,
                     tmin_ms: float = 0.0) -> list[tuple[float, float]]:
    """[0, t] (expanding), [t - width, t] (sliding) or [t, end] (decreasing) on a uniform t grid."""
    end = tmin_ms + duration_ms
    n = int(round(duration_ms / step_ms))
    grid = [tmin_ms + k * step_ms for k in range(n + 1)]
    if mode == "expanding":
        return [(tmin_ms, t) for t in grid[1:]]
    if mode == "sliding":
        return [(t - width_ms, t) for t in grid if t - width_ms >= tmin_ms - 1e-9 and t > tmin_ms]
    if mode == "decreasing":
        return [(t, end) for t in grid[:-1]]
    raise ValueError(f"unknown temporal mode {mode!r}; expected one of {TEMPORAL_MODES}")


def _masked_time(ts: TrialSet, start_ms: float, end_ms: float) -> TrialSet:
    out = []
    for tr in ts.trials:
        times = tr.tmin_ms + np.arange(tr.n_samples) * 1000.0 / tr.sample_rate_hz
        keep = (times >= start_ms - 1e-9) & (times < end_ms - 1e-9)
        out.append(tr.with_signal(np.where(keep[None, :], tr.signal, 0).astype(tr.signal.dtype)))
    return ts.with_trials(out)


def _crop(ts: TrialSet, start_ms: float, end_ms: float) -> TrialSet:
    return ts.with_trials([crop_time_window(t, start_ms, end_ms) for t in ts.trials])


def run_temporal_cell(ctx: AblationContext, start_ms: float, end_ms: float, retrain: bool = True) -> AblationCell:
    cell = AblationCell(label=f"[{start_ms:g}, {end_ms:g}]", start_ms=start_ms, end_ms=end_ms)
    try:
        if retrain:
            reports = _train_and_eval(ctx, _crop(ctx.train, start_ms, end_ms), _crop(ctx.val, start_ms, end_ms),
                                      _crop(ctx.test, start_ms, end_ms))
        else:
            if ctx.model is None:
                raise UMindError("mask-and-reuse mode needs a trained model")
            reports = evaluate(ctx.model, _masked_time(ctx.test, start_ms, end_ms), ctx.bank)
        cell.retrieval, cell.classification = reports[0], reports[1]
    except UMindError as exc:
        cell.warning = f"skipped: {exc}"
        log.warning("ablation cell %s skipped: %s", cell.label, exc)
    return cell


def temporal_ablation(ctx: AblationContext, mode: str, step_ms: float, width_ms: float = 100.0,
                      retrain: bool = True, windows: Sequence[tuple[float, float]] | None = None) -> AblationGrid:
    """One cell per window. ``windows`` overrides the generated grid (e.g. to evaluate a subset)."""
    if mode not in TEMPORAL_MODES:
        raise ValueError(f"unknown temporal mode {mode!r}; expected one of {TEMPORAL_MODES}")
    first = ctx.test.trials[0]
    if windows is None:
        windows = temporal_windows(first.duration_ms, mode, step_ms, width_ms, first.tmin_ms)
    return AblationGrid(mode, [run_temporal_cell(ctx, s, e, retrain) for s, e in windows], retrain)


def _masked_channels(ts: TrialSet, keep_names: set[str]) -> TrialSet:
    mask = np.array([n in keep_names for n in ts.channel_names])
    return ts.with_trials([t.with_signal(np.where(mask[:, None], t.signal, 0).astype(t.signal.dtype)) for t in ts.trials])


def run_spatial_cell(ctx: AblationContext, regions: Sequence[str], cmap: ChannelGroupMap,
                     retrain: bool = True) -> AblationCell:
    cell = AblationCell(label="+".join(regions), regions=tuple(regions))
    try:
        if retrain:
            reports = _train_and_eval(ctx, *(select_channels(ts, list(regions), cmap) for ts in (ctx.train, ctx.val, ctx.test)))
        else:
            if ctx.model is None:
                raise UMindError("mask-and-reuse mode needs a trained model")
            keep = set(select_channels(ctx.test, list(regions), cmap).channel_names)
            reports = evaluate(ctx.model, _masked_channels(ctx.test, keep), ctx.bank)
        cell.retrieval, cell.classification = reports[0], reports[1]
    except UMindError as exc:
        cell.warning = f"skipped: {exc}"
        log.warning("ablation cell %s skipped: %s", cell.label, exc)
    return cell


def spatial_ablation(ctx: AblationContext, region_sets: Sequence[Sequence[str]], cmap: ChannelGroupMap,
                     retrain: bool = True) -> AblationGrid:
    return AblationGrid("spatial", [run_spatial_cell(ctx, rs, cmap, retrain) for rs in region_sets], retrain)
