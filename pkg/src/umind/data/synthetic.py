"""Desk-scale oracle dataset with known latents.

Each image has a latent vector (its category centre plus a small offset).
A trial is a fixed linear encoding of that latent (a sum of rank-one
channel x time patterns weighted by the latent coordinates) plus white
noise. Because the encoding is linear and the patterns are independent, a
linear decoder recovers the latent exactly at zero noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..providers import TableImageProvider, TablePromptProvider, TableTextProvider, fused_prompt
from .io import MONTAGE_63
from .types import NeuralTrial, StimulusRecord, SyntheticSpec, TrialSet


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


@dataclass
class SyntheticOracle:
    """Ground truth behind a synthetic dataset."""

    spec: SyntheticSpec
    latents: dict[int, np.ndarray]          # image_id -> latent
    centers: dict[int, np.ndarray]          # category_id -> centre
    spatial: np.ndarray                     # (d, C)
    temporal: np.ndarray                    # (d, T)
    image_rotation: np.ndarray              # (d, d)
    text_rotation: np.ndarray               # (d, d)
    prompt_map: np.ndarray                  # (d_prompt, d)
    prompt_offsets: np.ndarray              # (n_tokens, d_prompt)
    pooled_map: np.ndarray                  # (d_pool, d)

    def encode(self, latent: np.ndarray) -> np.ndarray:
        """Noise-free C x T signal for a latent."""
        return np.einsum("k,kc,kt->ct", latent, self.spatial, self.temporal)

    def decode(self, signal: np.ndarray) -> np.ndarray:
        """Least-squares latent estimate: the perfect linear decoder."""
        basis = np.einsum("kc,kt->kct", self.spatial, self.temporal).reshape(len(self.spatial), -1)
        coef, *_ = np.linalg.lstsq(basis.T, np.asarray(signal, dtype=np.float64).ravel(), rcond=None)
        return coef

    def image_embedding(self, latent: np.ndarray) -> np.ndarray:
        return self.image_rotation @ latent

    def text_embedding(self, latent: np.ndarray) -> np.ndarray:
        return self.text_rotation @ latent

    def providers(self, catalog: list[StimulusRecord]):
        """(image, text, prompt) providers whose outputs are fixed linear maps of the latents.

        Image embedding = R_v latent; coarse text = R_t centre; fine text =
        R_t latent; prompt token i = P latent + offset_i, pooled = Q latent.
        """
        images, texts, seqs, pooled = {}, {}, {}, {}
        for r in catalog:
            z = self.latents[r.image_id]
            images[r.image_ref] = self.image_embedding(z)
            texts[r.coarse_text] = self.text_embedding(self.centers[r.category_id])
            texts[r.fine_text] = self.text_embedding(z)
            p = fused_prompt(r)
            seqs[p] = (self.prompt_map @ z)[None, :] + self.prompt_offsets
            pooled[p] = self.pooled_map @ z
        return TableImageProvider(images), TableTextProvider(texts), TablePromptProvider(seqs, pooled)


def _channel_names(n: int) -> list[str]:
    if n == len(MONTAGE_63):
        return list(MONTAGE_63)
    return [f"ch{i:02d}" for i in range(n)]


def generate_synthetic(spec: SyntheticSpec) -> tuple[TrialSet, TrialSet, SyntheticOracle]:
    """Build (train, test, oracle). Bit-reproducible for a given spec."""
    rng = np.random.default_rng(spec.seed)
    d, c, t = spec.embed_dim, spec.channels, spec.samples
    names = _channel_names(c)
    n_cat = spec.n_categories + spec.n_test_categories

    centers = rng.standard_normal((n_cat, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    spatial = rng.standard_normal((d, c))
    temporal = rng.standard_normal((d, t))
    if spec.informative_channels is not None:
        unknown = set(spec.informative_channels) - set(names)
        if unknown:
            raise ConfigError(f"informative channels not in montage: {sorted(unknown)}")
        spatial[:, [n not in spec.informative_channels for n in names]] = 0.0
    onset = int(round(spec.info_onset_ms * spec.sample_rate_hz / 1000.0))
    if not 0 <= onset < t:
        raise ConfigError(f"info_onset_ms={spec.info_onset_ms} leaves no informative samples")
    temporal[:, :onset] = 0.0

    image_rotation = _orthogonal(rng, d)
    text_rotation = _orthogonal(rng, d)
    n_tokens, d_prompt, d_pool = 4, d, d
    prompt_map = rng.standard_normal((d_prompt, d)) / np.sqrt(d)
    prompt_offsets = 0.5 * rng.standard_normal((n_tokens, d_prompt))
    pooled_map = rng.standard_normal((d_pool, d)) / np.sqrt(d)

    latents: dict[int, np.ndarray] = {}
    next_image = 0

    def make_split(categories, per_category, reps, split):
        nonlocal next_image
        catalog, trials = [], []
        for cat in categories:
            for _ in range(per_category):
                image_id = next_image
                next_image += 1
                z = centers[cat] + spec.within_category_scale * rng.standard_normal(d) / np.sqrt(d)
                latents[image_id] = z
                catalog.append(StimulusRecord(
                    image_id=image_id, category_id=int(cat),
                    image_ref=f"synthetic://image/{image_id}",
                    coarse_text=f"object class {cat}",
                    fine_text=f"a synthetic picture of object class {cat}, exemplar {image_id}",
                ))
                clean = np.einsum("k,kc,kt->ct", z, spatial, temporal)
                for rep in range(reps):
                    noise = rng.standard_normal((c, t))
                    sig = (clean + spec.noise_sigma * noise).astype(np.float32)
                    trials.append(NeuralTrial(sig, spec.subject_id, int(cat), image_id, rep, spec.sample_rate_hz, 0.0))
        return TrialSet(trials, catalog, split, names)

    train = make_split(range(spec.n_categories), spec.images_per_category, spec.repetitions, "train")
    test = make_split(range(spec.n_categories, n_cat), 1, spec.test_repetitions, "test")
    oracle = SyntheticOracle(
        spec=spec, latents=latents, centers={i: centers[i] for i in range(n_cat)},
        spatial=spatial, temporal=temporal, image_rotation=image_rotation,
        text_rotation=text_rotation, prompt_map=prompt_map, prompt_offsets=prompt_offsets,
        pooled_map=pooled_map,
    )
    return train, test, oracle
