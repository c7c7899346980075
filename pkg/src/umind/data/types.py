"""Domain records for neural trials, stimuli and preprocessing settings."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from ..errors import ConfigError, FormatError, ZeroShotViolation

SPLITS = ("train", "test")


@dataclass
class NeuralTrial:
    """One channels x samples recording locked to a stimulus onset.

    Attributes:
        signal: Array of shape (C, T). Units are metadata only.
        subject_id: Subject label, e.g. ``"sub-01"``.
        category_id: Stimulus category.
        image_id: Stimulus image, unique across the catalog.
        repetition: Presentation index of this image, 0-based.
        sample_rate_hz: Sampling rate of ``signal``.
        tmin_ms: Time of the first sample relative to stimulus onset.
    """

    signal: np.ndarray
    subject_id: str
    category_id: int
    image_id: int
    repetition: int = 0
    sample_rate_hz: float = 250.0
    tmin_ms: float = 0.0

    def __post_init__(self) -> None:
        self.signal = np.asarray(self.signal)
        if self.signal.ndim != 2:
            raise FormatError(f"signal must be 2D (C, T), got shape {self.signal.shape}")
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be positive")
        if self.repetition < 0:
            raise ConfigError("repetition must be >= 0")

    @property
    def n_channels(self) -> int:
        return self.signal.shape[0]

    @property
    def n_samples(self) -> int:
        return self.signal.shape[1]

    @property
    def duration_ms(self) -> float:
        return self.n_samples * 1000.0 / self.sample_rate_hz

    def with_signal(self, signal: np.ndarray, **changes) -> "NeuralTrial":
        return replace(self, signal=signal, **changes)


@dataclass(frozen=True)
class StimulusRecord:
    image_id: int
    category_id: int
    image_ref: str
    coarse_text: str
    fine_text: str

    def __post_init__(self) -> None:
        if not self.coarse_text:
            raise FormatError(f"image {self.image_id}: coarse_text is empty")
        if not self.fine_text:
            raise FormatError(f"image {self.image_id}: fine_text is empty")


@dataclass
class TrialSet:
    """A split of trials with its stimulus catalog and montage."""

    trials: list[NeuralTrial]
    catalog: list[StimulusRecord]
    split: str
    channel_names: list[str]

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        seen = set()
        for rec in self.catalog:
            if rec.image_id in seen:
                raise FormatError(f"duplicate image_id {rec.image_id} in catalog")
            seen.add(rec.image_id)
        self.validate_shapes()

    def validate_shapes(self) -> None:
        if not self.trials:
            return
        c, t = self.trials[0].signal.shape
        if c != len(self.channel_names):
            raise FormatError(f"{len(self.channel_names)} channel names for {c}-channel signals")
        for tr in self.trials:
            if tr.signal.shape != (c, t):
                raise FormatError(f"trial shape {tr.signal.shape} differs from {(c, t)}")

    @property
    def shape(self) -> tuple[int, int]:
        if not self.trials:
            return (len(self.channel_names), 0)
        return self.trials[0].signal.shape

    @property
    def sample_rate_hz(self) -> float:
        return self.trials[0].sample_rate_hz

    def record(self, image_id: int) -> StimulusRecord:
        return self.catalog_index()[image_id]

    def catalog_index(self) -> dict[int, StimulusRecord]:
        return {r.image_id: r for r in self.catalog}

    def category_ids(self) -> set[int]:
        return {t.category_id for t in self.trials} | {r.category_id for r in self.catalog}

    def stacked(self) -> np.ndarray:
        """All signals as one (N, C, T) float32 array."""
        return np.stack([t.signal for t in self.trials]).astype(np.float32, copy=False)

    def with_trials(self, trials: Iterable[NeuralTrial], channel_names: list[str] | None = None) -> "TrialSet":
        return TrialSet(
            trials=list(trials),
            catalog=list(self.catalog),
            split=self.split,
            channel_names=list(channel_names if channel_names is not None else self.channel_names),
        )


def check_zero_shot(train: TrialSet, test: TrialSet) -> None:
    """Raise ZeroShotViolation if any category occurs in both splits."""
    shared = train.category_ids() & test.category_ids()
    if shared:
        raise ZeroShotViolation(f"categories present in both train and test: {sorted(shared)}")


@dataclass
class PreprocessConfig:
    target_rate_hz: float = 250.0
    window_start_ms: float = 0.0
    window_end_ms: float = 1000.0
    baseline_ms: tuple[float, float] | str | None = "auto"
    noise_normalize: bool = True
    average_repetitions: bool = True

    def __post_init__(self) -> None:
        if self.target_rate_hz <= 0:
            raise ConfigError("target_rate_hz must be positive")
        if not self.window_start_ms < self.window_end_ms:
            raise ConfigError("window_start_ms must be < window_end_ms")
        if isinstance(self.baseline_ms, str):
            if self.baseline_ms != "auto":
                raise ConfigError(f"baseline_ms must be an interval, null or 'auto', got {self.baseline_ms!r}")
        elif self.baseline_ms is not None:
            self.baseline_ms = tuple(float(v) for v in self.baseline_ms)
            if len(self.baseline_ms) != 2 or self.baseline_ms[0] >= self.baseline_ms[1]:
                raise ConfigError("baseline_ms must be an interval [start, end) with start < end")


REGIONS = ("occipital", "parietal", "temporal", "central", "frontal")


@dataclass
class ChannelGroupMap:
    """Region name -> channel names. Overlap between regions must be declared."""

    groups: dict[str, list[str]]
    allow_overlap: bool = False

    def __post_init__(self) -> None:
        if not self.allow_overlap:
            owner: dict[str, str] = {}
            for region, chans in self.groups.items():
                for ch in chans:
                    if ch in owner:
                        raise ConfigError(f"channel {ch} in both {owner[ch]} and {region} (overlap not declared)")
                    owner[ch] = region

    def validate_against(self, channel_names: list[str]) -> None:
        known = set(channel_names)
        for region, chans in self.groups.items():
            missing = [c for c in chans if c not in known]
            if missing:
                raise ConfigError(f"region {region}: channels not in montage: {missing}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the desk-scale oracle dataset.

    ``info_onset_ms`` delays the informative signal (noise only before it) and
    ``informative_channels`` restricts it to a channel subset; both exist so the
    temporal and spatial ablations have a known answer.
    """

    n_categories: int = 10
    images_per_category: int = 8
    repetitions: int = 2
    channels: int = 8
    samples: int = 50
    embed_dim: int = 16
    noise_sigma: float = 0.0
    seed: int = 0
    n_test_categories: int = 5
    test_repetitions: int = 2
    sample_rate_hz: float = 250.0
    within_category_scale: float = 0.25
    info_onset_ms: float = 0.0
    informative_channels: tuple[str, ...] | None = None
    subject_id: str = "sub-01"

    def __post_init__(self) -> None:
        counts = dict(
            n_categories=self.n_categories, images_per_category=self.images_per_category,
            repetitions=self.repetitions, channels=self.channels, samples=self.samples,
            embed_dim=self.embed_dim, n_test_categories=self.n_test_categories,
            test_repetitions=self.test_repetitions,
        )
        for name, value in counts.items():
            if int(value) != value or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be positive")
        if self.informative_channels is not None:
            object.__setattr__(self, "informative_channels", tuple(self.informative_channels))


def group_by(trials: Iterable[NeuralTrial], key) -> dict:
    out: dict = {}
    for tr in trials:
        out.setdefault(key(tr), []).append(tr)
    return out


__all__ = [
    "NeuralTrial", "StimulusRecord", "TrialSet", "PreprocessConfig", "ChannelGroupMap",
    "SyntheticSpec", "REGIONS", "SPLITS", "check_zero_shot", "group_by",
]
