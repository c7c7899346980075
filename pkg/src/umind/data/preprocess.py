"""Trial preprocessing: baseline, decimation, windowing, channel selection,
multivariate noise normalisation and repetition averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from ..errors import BoundsError, ConfigError, EmptySelectionError, FormatError, UnsupportedRateError
from .types import ChannelGroupMap, NeuralTrial, PreprocessConfig, TrialSet, check_zero_shot, group_by

log = logging.getLogger(__name__)

SHRINKAGE = 0.1
CUTOFF_FRACTION = 0.4  # of the target rate


def average_repetitions(ts: TrialSet) -> TrialSet:
    """One trial per (subject, image); signal is the mean over its repetitions.

    The sum is accumulated element by element in repetition order, so the
    result commutes exactly with channel selection and time cropping.
    """
    groups = group_by(ts.trials, lambda t: (t.subject_id, t.image_id))
    out = []
    for (_, _), reps in groups.items():
        shape = reps[0].signal.shape
        if any(r.signal.shape != shape for r in reps):
            raise FormatError(f"ragged repetitions for image {reps[0].image_id}")
        if len(reps) == 1:
            out.append(reps[0].with_signal(reps[0].signal.copy(), repetition=0))
            continue
        acc = reps[0].signal.astype(np.float64, copy=True)
        for r in reps[1:]:
            acc += r.signal
        acc /= len(reps)
        out.append(reps[0].with_signal(acc.astype(reps[0].signal.dtype), repetition=0))
    return ts.with_trials(out)


def _decimation_factor(source: float, target: float) -> int:
    if target <= 0 or target > source:
        raise UnsupportedRateError(f"target rate {target} Hz must be in (0, {source}] Hz")
    q = int(round(source / target))
    if q < 1 or abs(q * target - source) > 1e-9 * source:
        raise UnsupportedRateError(f"{source} Hz -> {target} Hz is not an integer decimation")
    return q


def lowpass_taps(source_hz: float, target_hz: float) -> np.ndarray:
    q = _decimation_factor(source_hz, target_hz)
    return sps.firwin(8 * q + 1, CUTOFF_FRACTION * target_hz, fs=source_hz)


def downsample(trial: NeuralTrial, target_rate_hz: float) -> NeuralTrial:
    """Zero-phase FIR low-pass at 0.4 x target rate, then keep every q-th sample."""
    q = _decimation_factor(trial.sample_rate_hz, target_rate_hz)
    if q == 1:
        return trial.with_signal(trial.signal.copy())
    x = trial.signal
    n_out = x.shape[1] // q
    if x.shape[1] > 1:
        taps = lowpass_taps(trial.sample_rate_hz, target_rate_hz)
        x = sps.filtfilt(taps, [1.0], x.astype(np.float64), axis=-1,
                         padlen=min(3 * len(taps), x.shape[1] - 1))
    y = x[:, : n_out * q : q].astype(trial.signal.dtype)
    return trial.with_signal(np.ascontiguousarray(y), sample_rate_hz=float(target_rate_hz))


def _ms_to_index(trial: NeuralTrial, ms: float) -> int:
    pos = (ms - trial.tmin_ms) * trial.sample_rate_hz / 1000.0
    idx = int(round(pos))
    if abs(pos - idx) > 1e-6:
        raise BoundsError(f"{ms} ms does not fall on a sample boundary at {trial.sample_rate_hz} Hz")
    return idx


def crop_time_window(trial: NeuralTrial, start_ms: float, end_ms: float) -> NeuralTrial:
    """Samples whose onset-relative time lies in [start_ms, end_ms)."""
    end_of_data = trial.tmin_ms + trial.duration_ms
    if not (trial.tmin_ms - 1e-9 <= start_ms < end_ms <= end_of_data + 1e-9):
        raise BoundsError(
            f"window [{start_ms}, {end_ms}) ms outside data [{trial.tmin_ms}, {end_of_data}) ms"
        )
    i0, i1 = _ms_to_index(trial, start_ms), _ms_to_index(trial, end_ms)
    if i1 <= i0:
        raise BoundsError(f"window [{start_ms}, {end_ms}) ms contains no samples")
    return trial.with_signal(
        np.ascontiguousarray(trial.signal[:, i0:i1]),
        tmin_ms=trial.tmin_ms + i0 * 1000.0 / trial.sample_rate_hz,
    )


def baseline_correct(trial: NeuralTrial, interval_ms: tuple[float, float]) -> NeuralTrial:
    """Subtract each channel's mean over the pre-stimulus interval."""
    ref = crop_time_window(trial, *interval_ms).signal
    return trial.with_signal(trial.signal - ref.mean(axis=1, keepdims=True).astype(trial.signal.dtype))


DEFAULT_BASELINE_MS = (-100.0, 0.0)


def resolve_baseline(setting, trial: NeuralTrial) -> tuple[float, float] | None:
    """``"auto"`` means [-100, 0) ms if the trial has that much pre-stimulus data, else no correction."""
    if setting == "auto":
        return DEFAULT_BASELINE_MS if trial.tmin_ms <= DEFAULT_BASELINE_MS[0] else None
    return setting


def select_channels(ts: TrialSet, groups: list[str], cmap: ChannelGroupMap) -> TrialSet:
    unknown = [g for g in groups if g not in cmap.groups]
    if unknown:
        raise ConfigError(f"unknown region(s) {unknown}; known: {sorted(cmap.groups)}")
    cmap.validate_against(ts.channel_names)
    wanted = set()
    for g in groups:
        wanted.update(cmap.groups[g])
    idx = [i for i, name in enumerate(ts.channel_names) if name in wanted]
    if not idx:
        raise EmptySelectionError(f"regions {groups} select no channels")
    names = [ts.channel_names[i] for i in idx]
    return ts.with_trials([t.with_signal(np.ascontiguousarray(t.signal[idx])) for t in ts.trials], names)


@dataclass
class Whitener:
    """Per-subject C x C whitening matrices fitted on training repetitions.

    Not idempotent: applying it to already whitened data whitens again.
    """

    matrices: dict[str, np.ndarray] = field(default_factory=dict)
    shrinkage: float = SHRINKAGE

    def apply_trial(self, trial: NeuralTrial) -> NeuralTrial:
        try:
            w = self.matrices[trial.subject_id]
        except KeyError:
            raise ConfigError(f"no whitener fitted for subject {trial.subject_id!r}") from None
        return trial.with_signal((w @ trial.signal.astype(np.float64)).astype(trial.signal.dtype))

    def apply(self, ts: TrialSet) -> TrialSet:
        return ts.with_trials([self.apply_trial(t) for t in ts.trials])


def residual_covariance(trials: list[NeuralTrial]) -> np.ndarray:
    """Noise covariance: per-time-point covariance across repetitions of each
    image, pooled over images and averaged over time points."""
    groups = group_by(trials, lambda t: t.image_id)
    c = trials[0].n_channels
    scatter = np.zeros((c, c))
    dof = 0
    n_times = trials[0].n_samples
    for reps in groups.values():
        if len(reps) < 2:
            continue
        x = np.stack([r.signal for r in reps]).astype(np.float64)
        resid = x - x.mean(axis=0, keepdims=True)
        scatter += np.einsum("nct,ndt->cd", resid, resid)
        dof += len(reps) - 1
    if dof == 0:
        raise ConfigError("noise normalisation needs >= 2 repetitions of at least one image")
    return scatter / (dof * n_times)


def inverse_sqrt(cov: np.ndarray, shrinkage: float = SHRINKAGE) -> np.ndarray:
    """Shrink toward the diagonal, then take the symmetric inverse square root.

    Rank-deficient covariances get a ridge of 1e-6 x mean variance, with a warning.
    """
    cov = (1.0 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))
    evals, evecs = np.linalg.eigh(cov)
    scale = max(float(np.trace(cov)) / len(cov), np.finfo(float).tiny)
    if evals.min() <= 1e-10 * scale:
        ridge = 1e-6 * scale
        log.warning("noise covariance is singular (min eigenvalue %.3g); adding ridge %.3g", evals.min(), ridge)
        evals = np.clip(evals, 0.0, None) + ridge
    return (evecs * evals ** -0.5) @ evecs.T


def noise_normalize(train: TrialSet, shrinkage: float = SHRINKAGE) -> tuple[TrialSet, Whitener]:
    """Fit one whitening matrix per subject on the training repetitions and apply it."""
    whitener = Whitener(shrinkage=shrinkage)
    for subject, trials in group_by(train.trials, lambda t: t.subject_id).items():
        whitener.matrices[subject] = inverse_sqrt(residual_covariance(trials), shrinkage)
    return whitener.apply(train), whitener


def preprocess(
    train: TrialSet, test: TrialSet, cfg: PreprocessConfig
) -> tuple[TrialSet, TrialSet, Whitener | None]:
    """Baseline -> decimate -> crop -> noise-normalise (fit on train) -> average.

    Returns the processed splits and the fitted whitener (None if disabled).
    """
    check_zero_shot(train, test)

    def per_trial(ts: TrialSet) -> TrialSet:
        out = []
        for t in ts.trials:
            interval = resolve_baseline(cfg.baseline_ms, t)
            if interval is not None:
                t = baseline_correct(t, interval)
            t = downsample(t, cfg.target_rate_hz)
            t = crop_time_window(t, cfg.window_start_ms, cfg.window_end_ms)
            out.append(t)
        return ts.with_trials(out)

    train, test = per_trial(train), per_trial(test)
    whitener = None
    if cfg.noise_normalize:
        train, whitener = noise_normalize(train)
        test = whitener.apply(test)
    if cfg.average_repetitions:
        train, test = average_repetitions(train), average_repetitions(test)
    for ts in (train, test):
        bad = [t.image_id for t in ts.trials if not np.isfinite(t.signal).all()]
        if bad:
            raise FormatError(f"{ts.split}: non-finite samples after preprocessing (image ids {bad[:5]})")
    return train, test, whitener
