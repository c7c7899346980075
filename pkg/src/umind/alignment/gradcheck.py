"""Central finite-difference verification of autograd gradients."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from ..encoders import EncoderConfig, UMindModel, init_params
from .losses import alignment_objective
from .training import AlignmentConfig

# Gradients smaller than this are compared in absolute rather than relative terms.
GRAD_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    def merged(self, other: "GradCheckReport", prefix: str) -> "GradCheckReport":
        per = dict(self.per_tensor)
        per.update({f"{prefix}{k}": v for k, v in other.per_tensor.items()})
        return GradCheckReport(max(self.max_rel_error, other.max_rel_error), per, self.n_checked + other.n_checked)


def relative_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.nn.Parameter],
                   n_per_tensor: int = 4, step: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare autograd against (f(p+h) - f(p-h)) / 2h on a seeded subset of entries.

    ``loss_fn`` must be a deterministic function of ``params`` (float64 advised).
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: p.grad.detach().clone() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    per, n = {}, 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.data.view(-1)
            picks = rng.choice(flat.numel(), size=min(n_per_tensor, flat.numel()), replace=False)
            worst = 0.0
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                worst = max(worst, relative_error(analytic[name].view(-1)[i].item(), numeric))
                n += 1
            per[name] = worst
    return GradCheckReport(max(per.values(), default=0.0), per, n)


def reference_encoder_config(**overrides) -> EncoderConfig:
    """Reduced dimensions for gradient checks."""
    base = dict(channels=4, samples=20, temporal_kernel=5, temporal_filters=4, spatial_filters=4,
                feature_dim=12, embed_dim=8, dropout_rate=0.0, pool_kernel=5, attention_heads=2, seed=0)
    base.update(overrides)
    return EncoderConfig(**base)


def random_alignment_batch(cfg: EncoderConfig, batch_size: int = 4, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch_size, cfg.channels, cfg.samples, generator=g, dtype=torch.float64)
    zv, zc, zt = (torch.randn(batch_size, cfg.embed_dim, generator=g, dtype=torch.float64) for _ in range(3))
    return x, zv, zc, zt


def finite_diff_check(model: UMindModel, batch, cfg: AlignmentConfig, n_per_tensor: int = 4,
                      step: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Check d(total alignment loss)/d(every parameter tensor), temperature included.

    Runs on a float64 eval-mode copy, so dropout is off and batch norm uses
    its running statistics.
    """
    m = copy.deepcopy(model).double().eval()
    x, zv, zc, zt = (torch.as_tensor(t, dtype=torch.float64) for t in batch)

    def loss():
        zv_hat, zs_hat = m(x)
        return alignment_objective(zv_hat, zs_hat, zv, zc, zt, m.tau, cfg.alpha, cfg.beta)[0]

    return gradient_check(loss, dict(m.named_parameters()), n_per_tensor, step, seed)


def check_alignment(seed: int = 0, variant: str = "attention", batch_size: int = 4) -> GradCheckReport:
    cfg = reference_encoder_config(seed=seed, variant=variant)
    model = init_params(cfg)
    return finite_diff_check(model, random_alignment_batch(cfg, batch_size, seed), AlignmentConfig(), seed=seed)


def check_qformer(seed: int = 0, batch_size: int = 4) -> GradCheckReport:
    from ..bridge.qformer import QFormerConfig, init_qformer, qformer_loss

    cfg = QFormerConfig(n_queries=3, d_model=4, n_heads=2, ffn_dim=8, seed=seed, embed_dim=8, d_prompt=5, d_pool=6)
    q = init_qformer(cfg).double()
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch_size, 8, generator=g, dtype=torch.float64)
    yp = torch.randn(batch_size, 3, 5, generator=g, dtype=torch.float64)
    yq = torch.randn(batch_size, 6, generator=g, dtype=torch.float64)
    return gradient_check(lambda: qformer_loss(q, x, yp, yq), dict(q.named_parameters()), seed=seed)


def check_prior(seed: int = 0, batch_size: int = 4, mode: str = "mlp_direct") -> GradCheckReport:
    from ..bridge.prior import PriorConfig, init_prior, prior_loss

    cfg = PriorConfig(mode=mode, hidden_dim=8, n_steps=4, seed=seed, embed_dim=8, out_dim=6)
    p = init_prior(cfg).double()
    g = torch.Generator().manual_seed(seed)
    c = torch.randn(batch_size, 8, generator=g, dtype=torch.float64)
    y = torch.randn(batch_size, 6, generator=g, dtype=torch.float64)
    # Same noise draw on every evaluation keeps the denoising loss a fixed function.
    return gradient_check(lambda: prior_loss(p, c, y, torch.Generator().manual_seed(seed)),
                          dict(p.named_parameters()), seed=seed)


def check_all(seed: int = 0) -> dict[str, GradCheckReport]:
    return {
        "alignment[attention]": check_alignment(seed, "attention"),
        "alignment[tsconv]": check_alignment(seed, "tsconv"),
        "qformer": check_qformer(seed),
        "prior[mlp_direct]": check_prior(seed, mode="mlp_direct"),
        "prior[denoising]": check_prior(seed, mode="denoising"),
    }
