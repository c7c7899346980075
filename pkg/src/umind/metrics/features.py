"""Feature extractors and feature-space metrics.

The shipped extractors are fixed random projections of a downsampled image,
one per named network, so the full suite runs without pretrained weights.
Real networks plug in through ``"package.module:function"`` specs; the
function returns a :class:`FeatureExtractorHandle` or a plain callable.
"""

from __future__ import annotations

import hashlib
import importlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import zoom

from ..errors import ConfigError, DegenerateInputError, ProtocolError
from .images import as_image

TWO_WAY_EXTRACTORS = ("alexnet-2", "alexnet-5", "inception", "clip")
DISTANCE_EXTRACTORS = ("efficientnet", "swav")
BUILTIN_EXTRACTORS = TWO_WAY_EXTRACTORS + DISTANCE_EXTRACTORS

COLUMN_NAMES = {
    "alexnet-2": "AlexNet(2)", "alexnet-5": "AlexNet(5)", "inception": "Inception",
    "clip": "CLIP", "efficientnet": "EfficientNet", "swav": "SwAV",
}


@dataclass(frozen=True)
class FeatureExtractorHandle:
    name: str
    embed: Callable[[np.ndarray], np.ndarray]
    fingerprint: str

    def __call__(self, image) -> np.ndarray:
        return np.asarray(self.embed(image), dtype=np.float64).ravel()

    def batch(self, images: Sequence) -> np.ndarray:
        return np.stack([self(im) for im in images])


def random_projection_extractor(name: str, side: int = 16, dim: int = 64) -> FeatureExtractorHandle:
    """Resize to side x side x 3, flatten, project with a name-seeded Gaussian matrix, then tanh."""
    digest = hashlib.sha256(f"{name}|{side}|{dim}".encode()).hexdigest()
    rng = np.random.default_rng(int(digest[:16], 16))
    w = rng.standard_normal((dim, side * side * 3)) / np.sqrt(side * side * 3)

    def embed(image):
        a = as_image(image)
        if a.ndim == 2:
            a = np.repeat(a[:, :, None], 3, axis=2)
        small = zoom(a, (side / a.shape[0], side / a.shape[1], 1), order=1, mode="nearest")
        return np.tanh(w @ (small.ravel() - 0.5) * 4.0)

    return FeatureExtractorHandle(name, embed, f"randproj:{digest[:16]}")


def get_extractor(spec: str) -> FeatureExtractorHandle:
    """A built-in name, or ``"module:function"`` optionally followed by ``=name``."""
    if spec in BUILTIN_EXTRACTORS:
        return random_projection_extractor(spec)
    target, _, label = spec.partition("=")
    if ":" not in target:
        raise ConfigError(f"unknown extractor {spec!r}; use one of {BUILTIN_EXTRACTORS} or 'module:function'")
    mod_name, fn_name = target.split(":", 1)
    try:
        factory = getattr(importlib.import_module(mod_name), fn_name)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load extractor {target!r}: {exc}") from exc
    made = factory()
    if isinstance(made, FeatureExtractorHandle):
        return made
    if callable(made):
        return FeatureExtractorHandle(label or fn_name, made, f"plugin:{target}")
    raise ConfigError(f"extractor factory {target!r} returned {type(made).__name__}")


def _standardize_rows(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    f = f - f.mean(axis=1, keepdims=True)
    n = np.linalg.norm(f, axis=1, keepdims=True)
    if (n == 0).any():
        raise DegenerateInputError("correlation undefined for a constant feature vector")
    return f / n


def correlation_matrix(gen: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """C[i, j] = Pearson(gen_i, ref_j)."""
    gen, ref = np.atleast_2d(gen), np.atleast_2d(ref)
    if gen.shape != ref.shape:
        raise ProtocolError(f"feature sets differ in shape: {gen.shape} vs {ref.shape}")
    return _standardize_rows(gen) @ _standardize_rows(ref).T


def two_way_identification(gen_features, ref_features) -> float:
    """Fraction of (i, j != i) with corr(gen_i, ref_i) > corr(gen_i, ref_j)."""
    c = correlation_matrix(gen_features, ref_features)
    n = len(c)
    if n < 2:
        raise ProtocolError("two-way identification needs at least 2 pairs")
    wins = (np.diag(c)[:, None] > c)
    np.fill_diagonal(wins, False)
    return float(wins.sum() / (n * (n - 1)))


def paired_correlations(gen_features, ref_features) -> np.ndarray:
    return np.diag(correlation_matrix(gen_features, ref_features)).copy()


def feature_distance(gen_features, ref_features) -> float:
    """Mean correlation distance 1 - Pearson(gen_i, ref_i)."""
    return max(0.0, float(np.mean(1.0 - paired_correlations(gen_features, ref_features))))


def rank_generations(candidates: Sequence, reference, extractor: FeatureExtractorHandle,
                     n_candidates: int = 10) -> list[int]:
    """Candidate indices in descending feature correlation with the reference (ties: lower index first)."""
    if len(candidates) != n_candidates:
        raise ProtocolError(f"expected {n_candidates} candidates, got {len(candidates)}")
    scores = _standardize_rows(extractor.batch(candidates)) @ _standardize_rows(extractor(reference)[None, :])[0]
    return [int(i) for i in np.lexsort((np.arange(len(scores)), -scores))]
