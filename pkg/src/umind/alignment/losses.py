"""Contrastive and regression objectives for multimodal alignment."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from ..encoders import EmbeddingBatch
from ..errors import ConfigError, DegenerateInputError, FormatError


def _tensor(x) -> torch.Tensor:
    if isinstance(x, EmbeddingBatch):
        return x.data
    return torch.as_tensor(x)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise FormatError(f"paired batches must share shape B x d, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[0] < 1:
        raise FormatError("empty batch")


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateInputError("zero-norm embedding row: cosine similarity undefined")
    return x / norms


def contrastive_loss(anchors, targets, tau) -> torch.Tensor:
    """One-directional InfoNCE with cosine similarity.

    Row i of ``anchors`` is scored against every target; the softmax
    denominator runs over targets only (anchor -> target direction).
    """
    a, t = _tensor(anchors), _tensor(targets)
    _check_pair(a, t)
    tau = torch.as_tensor(tau, dtype=a.dtype)
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {float(tau)}")
    t = t.to(a.dtype)
    logits = _unit_rows(a) @ _unit_rows(t).T / tau
    return -torch.diagonal(F.log_softmax(logits, dim=1)).mean()


def clip_text_loss(zs_hat, zc, zt, tau) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(coarse-text term, fine-text term, their mean). The two terms use separate softmaxes."""
    t1 = contrastive_loss(zs_hat, zc, tau)
    t2 = contrastive_loss(zs_hat, zt, tau)
    return t1, t2, (t1 + t2) / 2


def mse_loss_visual(zv_hat, zv) -> torch.Tensor:
    """Sum of squared errors over the batch divided by B*d (raw, unnormalised vectors)."""
    p, z = _tensor(zv_hat), _tensor(zv)
    _check_pair(p, z)
    return ((z.to(p.dtype) - p) ** 2).sum() / p.numel()


def mse_loss_text(zs_hat, zc, zt) -> torch.Tensor:
    p, c, t = _tensor(zs_hat), _tensor(zc), _tensor(zt)
    _check_pair(p, c)
    _check_pair(p, t)
    return (((c.to(p.dtype) - p) ** 2).sum() + ((t.to(p.dtype) - p) ** 2).sum()) / (2 * p.numel())


def overall_loss(clip_v, mse_v, clip_t, mse_t, alpha: float, beta: float):
    """alpha * (clip_v + beta * mse_v) + (1 - alpha) * (clip_t + beta * mse_t)."""
    return alpha * (clip_v + beta * mse_v) + (1 - alpha) * (clip_t + beta * mse_t)


@dataclass
class LossBreakdown:
    clip_v: float
    clip_t1: float
    clip_t2: float
    clip_t: float
    mse_v: float
    mse_t: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def alignment_objective(zv_hat, zs_hat, zv, zc, zt, tau, alpha: float, beta: float):
    """Total loss tensor (for backprop) and its float breakdown."""
    clip_v = contrastive_loss(zv_hat, zv, tau)
    t1, t2, clip_t = clip_text_loss(zs_hat, zc, zt, tau)
    mse_v = mse_loss_visual(zv_hat, zv)
    mse_t = mse_loss_text(zs_hat, zc, zt)
    total = overall_loss(clip_v, mse_v, clip_t, mse_t, alpha, beta)
    f = lambda v: float(v.detach())
    parts = LossBreakdown(
        clip_v=f(clip_v), clip_t1=f(t1), clip_t2=f(t2), clip_t=f(clip_t),
        mse_v=f(mse_v), mse_t=f(mse_t), total=f(total),
    )
    return total, parts
