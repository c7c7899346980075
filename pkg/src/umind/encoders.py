"""Neural encoder with visual and semantic projection heads."""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import tensorfile
from .data.types import NeuralTrial
from .errors import ConfigError, DegenerateInputError, FormatError

MODALITIES = ("neural_visual", "neural_semantic", "image", "coarse_text", "fine_text")
CHECKPOINT_KIND = "umind.encoder"


@dataclass
class EncoderConfig:
    """Shape and capacity of the encoder.

    ``variant`` is ``"attention"`` (temporal self-attention block inserted after
    the spatial convolution) or ``"tsconv"`` (plain temporal-spatial convolution).
    """

    channels: int = 63
    samples: int = 250
    temporal_kernel: int = 25
    temporal_filters: int = 40
    spatial_filters: int = 40
    feature_dim: int = 1024
    embed_dim: int = 1024
    dropout_rate: float = 0.5
    seed: int = 0
    variant: str = "attention"
    pool_kernel: int = 10
    attention_heads: int = 4

    def __post_init__(self) -> None:
        for name in ("channels", "samples", "temporal_kernel", "temporal_filters",
                     "spatial_filters", "feature_dim", "embed_dim", "pool_kernel", "attention_heads"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.temporal_kernel > self.samples:
            raise ConfigError(f"temporal_kernel {self.temporal_kernel} exceeds samples {self.samples}")
        if self.pool_kernel > self.samples:
            raise ConfigError(f"pool_kernel {self.pool_kernel} exceeds samples {self.samples}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.variant not in ("attention", "tsconv"):
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.variant == "attention" and self.spatial_filters % self.attention_heads:
            raise ConfigError("spatial_filters must be divisible by attention_heads")


@dataclass
class EmbeddingBatch:
    """B x d embeddings of one modality, row i belonging to ``ids[i]``."""

    data: torch.Tensor
    modality: str
    ids: list[int]

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if not isinstance(self.data, torch.Tensor):
            self.data = torch.as_tensor(np.asarray(self.data))
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise FormatError(f"embedding batch must be B x d with B >= 1, got {tuple(self.data.shape)}")
        if len(self.ids) != self.data.shape[0]:
            raise FormatError("ids length must equal batch size")
        if not torch.isfinite(self.data).all():
            raise DegenerateInputError("embedding batch contains NaN/Inf")

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy()


class TemporalAttention(nn.Module):
    """Pre-norm transformer block over time-step tokens (no positional encoding)."""

    def __init__(self, width: int, heads: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, x):  # x: (B, T, width)
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class NeuralEncoder(nn.Module):
    """Temporal conv -> spatial conv -> BN/ELU -> [attention] -> pool -> linear."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.temporal_kernel
        self.temporal = nn.Conv2d(1, cfg.temporal_filters, (1, k), padding=(0, k // 2))
        t_out = cfg.samples + 2 * (k // 2) - k + 1
        self.spatial = nn.Conv2d(cfg.temporal_filters, cfg.spatial_filters, (cfg.channels, 1))
        self.norm = nn.BatchNorm2d(cfg.spatial_filters)
        self.act = nn.ELU()
        self.attention = (
            TemporalAttention(cfg.spatial_filters, cfg.attention_heads, cfg.dropout_rate)
            if cfg.variant == "attention" else None
        )
        self.pool = nn.AvgPool1d(cfg.pool_kernel, cfg.pool_kernel)
        self.drop = nn.Dropout(cfg.dropout_rate)
        self.out = nn.Linear(cfg.spatial_filters * (t_out // cfg.pool_kernel), cfg.feature_dim)

    def forward(self, x):  # x: (B, C, T)
        h = self.temporal(x.unsqueeze(1))
        h = self.act(self.norm(self.spatial(h))).squeeze(2)  # (B, F, T)
        if self.attention is not None:
            h = self.attention(h.transpose(1, 2)).transpose(1, 2)
        h = self.drop(self.pool(h))
        return self.out(h.flatten(1))


class Projector(nn.Module):
    """Linear -> residual GELU-MLP -> LayerNorm."""

    def __init__(self, in_dim: int, out_dim: int, dropout: float):
        super().__init__()
        self.inp = nn.Linear(in_dim, out_dim)
        self.mlp = nn.Sequential(nn.GELU(), nn.Linear(out_dim, out_dim), nn.Dropout(dropout))
        self.norm = nn.LayerNorm(out_dim)

    def forward(self, x):
        h = self.inp(x)
        return self.norm(h + self.mlp(h))


class UMindModel(nn.Module):
    """Encoder, the two projection heads and the log-temperature."""

    def __init__(self, cfg: EncoderConfig, tau_init: float = 0.07):
        super().__init__()
        if tau_init <= 0:
            raise ConfigError("tau_init must be positive")
        self.cfg = cfg
        self.encoder = NeuralEncoder(cfg)
        self.visual_head = Projector(cfg.feature_dim, cfg.embed_dim, cfg.dropout_rate)
        self.semantic_head = Projector(cfg.feature_dim, cfg.embed_dim, cfg.dropout_rate)
        self.log_tau = nn.Parameter(torch.tensor(math.log(tau_init)))

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def forward(self, x):
        f = self.encoder(x)
        return self.visual_head(f), self.semantic_head(f)


def init_params(cfg: EncoderConfig, tau_init: float = 0.07) -> UMindModel:
    """Fresh model, bit-identical for a given ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = UMindModel(cfg, tau_init)
    return model.eval()


def trials_to_tensor(batch, cfg: EncoderConfig, dtype=torch.float32) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        x = batch.to(dtype)
    elif isinstance(batch, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(batch)).to(dtype)
    else:
        x = torch.from_numpy(np.stack([t.signal for t in batch])).to(dtype)
    if x.ndim != 3 or tuple(x.shape[1:]) != (cfg.channels, cfg.samples):
        raise ConfigError(f"expected trials of shape (C={cfg.channels}, T={cfg.samples}), got {tuple(x.shape[1:])}")
    return x


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def encode_neural(model: UMindModel, batch: Sequence[NeuralTrial] | np.ndarray | torch.Tensor) -> torch.Tensor:
    """Shared features, B x feature_dim. Deterministic when the model is in eval mode."""
    return model.encoder(trials_to_tensor(batch, model.cfg, _param_dtype(model)))


def project_visual(model: UMindModel, features: torch.Tensor, ids: list[int] | None = None) -> EmbeddingBatch:
    out = model.visual_head(features)
    return EmbeddingBatch(out, "neural_visual", list(ids) if ids is not None else list(range(len(out))))


def project_semantic(model: UMindModel, features: torch.Tensor, ids: list[int] | None = None) -> EmbeddingBatch:
    out = model.semantic_head(features)
    return EmbeddingBatch(out, "neural_semantic", list(ids) if ids is not None else list(range(len(out))))


@torch.no_grad()
def embed_trials(model: UMindModel, trials: Sequence[NeuralTrial], batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode (z_v_hat, z_s_hat) as float32 numpy arrays."""
    was_training = model.training
    model.eval()
    zv, zs = [], []
    for i in range(0, len(trials), batch_size):
        v, s = model(trials_to_tensor(trials[i : i + batch_size], model.cfg, _param_dtype(model)))
        zv.append(v.float().numpy())
        zs.append(s.float().numpy())
    model.train(was_training)
    return np.concatenate(zv), np.concatenate(zs)


def state_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def fingerprint_arrays(arrays: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(tensorfile.dumps(dict(sorted(arrays.items())))).hexdigest()[:16]


def model_fingerprint(model: nn.Module) -> str:
    return fingerprint_arrays(state_arrays(model))


def save_checkpoint(path: str | os.PathLike, model: UMindModel, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> str:
    """Write model (+ optional extra tensors) and return the model fingerprint."""
    arrays = state_arrays(model, "model/")
    arrays.update(extra or {})
    fp = model_fingerprint(model)
    header = {"kind": CHECKPOINT_KIND, "config": asdict(model.cfg), "seed": model.cfg.seed,
              "fingerprint": fp, **(meta or {})}
    tensorfile.save(path, arrays, header)
    return fp


def load_checkpoint(path: str | os.PathLike) -> tuple[UMindModel, dict[str, np.ndarray], dict]:
    """Returns (model in eval mode, extra tensors, header meta)."""
    arrays, meta = tensorfile.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise FormatError(f"{path} is not an encoder checkpoint")
    model = UMindModel(EncoderConfig(**meta["config"]))
    state = {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(state)
    extra = {k: v for k, v in arrays.items() if not k.startswith("model/")}
    return model.eval(), extra, meta
