"""Learnable-query transformer mapping neural-semantic vectors to prompt embeddings.

The three sublayers are exposed as functions so each can be tested alone:

* ``qformer_self_attention``: multi-head self-attention over the query tokens
* ``qformer_cross_attention``: single-head softmax(Q K^T / sqrt(d_model)) V with
  Q from the queries and K, V from the tokenised input vector
* ``qformer_ffn``: position-wise two-layer FFN followed by the prompt head

``qformer_forward`` chains them with a residual connection around each
sublayer. Neither queries nor input tokens carry positional encodings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError, FormatError, NumericalAbort


@dataclass
class QFormerConfig:
    n_queries: int = 4
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 256
    seed: int = 0
    embed_dim: int = 1024    # width of the incoming neural-semantic vector
    d_prompt: int = 2048
    d_pool: int = 1280

    def __post_init__(self) -> None:
        if self.n_queries < 1:
            raise ConfigError("n_queries must be >= 1")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be a positive multiple of n_heads")
        if self.embed_dim % self.d_model:
            raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by d_model {self.d_model}")
        if min(self.ffn_dim, self.d_prompt, self.d_pool) < 1:
            raise ConfigError("ffn_dim, d_prompt and d_pool must be positive")

    @property
    def n_tokens(self) -> int:
        """Number of width-d_model tokens the input vector is cut into."""
        return self.embed_dim // self.d_model


class QFormer(nn.Module):
    def __init__(self, cfg: QFormerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, d) * 0.5)
        self.sa_q = nn.Linear(d, d)
        self.sa_k = nn.Linear(d, d)
        self.sa_v = nn.Linear(d, d)
        self.sa_out = nn.Linear(d, d)
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.ffn_in = nn.Linear(d, cfg.ffn_dim)
        self.ffn_out = nn.Linear(cfg.ffn_dim, d)
        self.prompt_head = nn.Linear(d, cfg.d_prompt)
        self.pooled_head = nn.Linear(d, cfg.d_pool)


def init_qformer(cfg: QFormerConfig) -> QFormer:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return QFormer(cfg)


def qformer_self_attention(params: QFormer, zq: torch.Tensor, return_weights: bool = False):
    """Multi-head self-attention over query tokens; (..., n_q, d_model) -> same shape."""
    cfg = params.cfg
    if zq.shape[-1] != cfg.d_model:
        raise FormatError(f"query width {zq.shape[-1]} != d_model {cfg.d_model}")
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

    def split(x):
        return x.reshape(*x.shape[:-1], h, dh).transpose(-3, -2)  # (..., h, n, dh)

    q, k, v = split(params.sa_q(zq)), split(params.sa_k(zq)), split(params.sa_v(zq))
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    mixed = (weights @ v).transpose(-3, -2).reshape(zq.shape)
    out = params.sa_out(mixed)
    return (out, weights) if return_weights else out


def tokenize(params: QFormer, zs_hat: torch.Tensor) -> torch.Tensor:
    """(B, embed_dim) -> (B, L, d_model) by consecutive chunks."""
    cfg = params.cfg
    if zs_hat.shape[-1] != cfg.embed_dim:
        raise FormatError(f"input width {zs_hat.shape[-1]} != embed_dim {cfg.embed_dim}")
    return zs_hat.reshape(*zs_hat.shape[:-1], cfg.n_tokens, cfg.d_model)


def qformer_cross_attention(params: QFormer, zq1: torch.Tensor, tokens: torch.Tensor, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_model)) V, Q = W_Q zq', K = W_K tokens, V = W_V tokens.

    ``zq1`` is (n_q, d_model) or (B, n_q, d_model); ``tokens`` is (L, d_model)
    or (B, L, d_model).
    """
    d = params.cfg.d_model
    if zq1.shape[-1] != d or tokens.shape[-1] != d:
        raise FormatError(f"cross-attention widths {zq1.shape[-1]}, {tokens.shape[-1]} != d_model {d}")
    q, k, v = params.w_q(zq1), params.w_k(tokens), params.w_v(tokens)
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def _ffn_block(params: QFormer, z: torch.Tensor) -> torch.Tensor:
    return z + params.ffn_out(F.gelu(params.ffn_in(z)))


def qformer_ffn(params: QFormer, zq2: torch.Tensor) -> torch.Tensor:
    """Position-wise FFN (with residual) then the linear prompt head: (..., n_q, d_prompt)."""
    if zq2.shape[-1] != params.cfg.d_model:
        raise FormatError(f"FFN input width {zq2.shape[-1]} != d_model {params.cfg.d_model}")
    return params.prompt_head(_ffn_block(params, zq2))


def qformer_forward(params: QFormer, zs_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(B, embed_dim) -> prompt embeddings (B, n_q, d_prompt), pooled (B, d_pool).

    The pooled head reads the mean of the same post-FFN token stack.
    """
    squeeze = zs_hat.ndim == 1
    if squeeze:
        zs_hat = zs_hat[None]
    zs_hat = zs_hat.to(params.queries.dtype)
    zq = params.queries
    zq1 = zq + qformer_self_attention(params, zq)
    zq1 = zq1.expand(zs_hat.shape[0], *zq1.shape)
    zq2 = zq1 + qformer_cross_attention(params, zq1, tokenize(params, zs_hat))
    stack = _ffn_block(params, zq2)
    prompt = params.prompt_head(stack)
    pooled = params.pooled_head(stack.mean(dim=-2))
    if squeeze:
        return prompt[0], pooled[0]
    return prompt, pooled


@dataclass
class FitConfig:
    """Optimiser settings shared by the Q-Former and prior trainers."""

    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("need lr >= 0, epochs >= 1, batch_size >= 1")


def qformer_loss(params: QFormer, zs_hat, target_prompt, target_pooled) -> torch.Tensor:
    prompt, pooled = qformer_forward(params, zs_hat)
    return F.mse_loss(prompt, target_prompt.to(prompt.dtype)) + F.mse_loss(pooled, target_pooled.to(pooled.dtype))


def _as_tensor(x, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(dtype)


def train_qformer(params: QFormer, zs_hat, target_prompt, target_pooled, cfg: FitConfig) -> tuple[QFormer, list[float]]:
    """Adam on MSE(prompt) + MSE(pooled). Returns params and per-epoch mean loss."""
    dtype = params.queries.dtype
    x = _as_tensor(zs_hat, dtype)
    yp = _as_tensor(target_prompt, dtype)
    yq = _as_tensor(target_pooled, dtype)
    if yp.shape[1:] != (params.cfg.n_queries, params.cfg.d_prompt) or yq.shape[1:] != (params.cfg.d_pool,):
        raise FormatError("prompt targets must be (N, n_queries, d_prompt) and pooled (N, d_pool)")
    opt = torch.optim.Adam(params.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = []
    params.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(x), generator=gen)
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = qformer_loss(params, x[idx], yp[idx], yq[idx])
            if not torch.isfinite(loss):
                raise NumericalAbort(f"non-finite Q-Former loss at epoch {epoch}", {"epoch": epoch})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / len(x))
    params.eval()
    return params, history
