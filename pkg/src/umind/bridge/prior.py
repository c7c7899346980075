"""Map neural-visual vectors into the image-embedding space.

Two modes share one ``prior_predict`` signature:

``mlp_direct``
    MSE regression: out = skip(c) + MLP(c). The MLP's last layer starts at
    zero and, for equal widths, ``skip`` starts as the identity.
``denoising``
    Conditional denoiser trained to predict the clean embedding x0 from
    x_t = sqrt(abar_t) x0 + s * sqrt(1 - abar_t) eps, with a cosine
    schedule whose final step carries no signal (abar_T = 0). Prediction is
    deterministic DDIM (eta = 0) from seeded noise. With ``n_steps=1`` and
    ``noise_scale=0`` the denoiser always sees x_T = 0, so it reduces to a
    direct regressor of x0 on the condition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError, FormatError, NumericalAbort
from .qformer import FitConfig, _as_tensor

TIME_EMBED = 16


@dataclass
class PriorConfig:
    mode: str = "mlp_direct"
    hidden_dim: int = 512
    n_steps: int = 10
    seed: int = 0
    embed_dim: int = 1024     # width of the neural-visual input
    out_dim: int = 1024       # width of the image-embedding space
    noise_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("mlp_direct", "denoising"):
            raise ConfigError(f"unknown prior mode {self.mode!r}")
        if self.mode == "denoising" and self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1 in denoising mode")
        if min(self.hidden_dim, self.embed_dim, self.out_dim) < 1:
            raise ConfigError("prior dimensions must be positive")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")


def _mlp(inp: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(inp, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, out))


def cosine_alpha_bar(n_steps: int, s: float = 0.008) -> torch.Tensor:
    """abar_0 .. abar_T with abar_0 = 1 and abar_T = 0."""
    t = torch.arange(n_steps + 1, dtype=torch.float64) / n_steps
    f = torch.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    abar = f / f[0]
    abar[-1] = 0.0
    return abar.clamp(0.0, 1.0)


def time_embedding(t: torch.Tensor, n_steps: int) -> torch.Tensor:
    freqs = torch.exp(torch.arange(TIME_EMBED // 2, dtype=torch.float64) * (-math.log(1000.0) / (TIME_EMBED // 2)))
    ang = (t.to(torch.float64) / n_steps)[:, None] * freqs[None] * 1000.0
    return torch.cat([ang.sin(), ang.cos()], dim=1)


class DiffusionPrior(nn.Module):
    def __init__(self, cfg: PriorConfig):
        super().__init__()
        self.cfg = cfg
        self.skip = nn.Linear(cfg.embed_dim, cfg.out_dim)
        if cfg.mode == "mlp_direct":
            self.net = _mlp(cfg.embed_dim, cfg.hidden_dim, cfg.out_dim)
        else:
            self.net = _mlp(cfg.embed_dim + cfg.out_dim + TIME_EMBED, cfg.hidden_dim, cfg.out_dim)
            self.register_buffer("alpha_bar", cosine_alpha_bar(cfg.n_steps), persistent=False)
        # Start as the identity map when widths agree: the alignment MSE term
        # already pulls neural-visual vectors towards image embeddings.
        with torch.no_grad():
            self.net[-1].weight.zero_()
            self.net[-1].bias.zero_()
            if cfg.embed_dim == cfg.out_dim:
                self.skip.weight.copy_(torch.eye(cfg.out_dim))
                self.skip.bias.zero_()

    def denoise(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        temb = time_embedding(t, self.cfg.n_steps).to(cond.dtype)
        return self.skip(cond) + self.net(torch.cat([cond, x_t, temb], dim=1))

    def forward(self, cond: torch.Tensor) -> torch.Tensor:
        return self.skip(cond) + self.net(cond)


def init_prior(cfg: PriorConfig) -> DiffusionPrior:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return DiffusionPrior(cfg)


def prior_loss(prior: DiffusionPrior, cond: torch.Tensor, target: torch.Tensor, generator: torch.Generator | None = None):
    if prior.cfg.mode == "mlp_direct":
        return F.mse_loss(prior(cond), target)
    cfg = prior.cfg
    t = torch.randint(1, cfg.n_steps + 1, (len(cond),), generator=generator)
    eps = torch.randn(target.shape, generator=generator, dtype=target.dtype)
    abar = prior.alpha_bar.to(target.dtype)[t][:, None]
    x_t = abar.sqrt() * target + cfg.noise_scale * (1 - abar).sqrt() * eps
    return F.mse_loss(prior.denoise(x_t, t, cond), target)


def train_prior(cfg: PriorConfig, zv_hat, zv, fit: FitConfig | None = None) -> tuple[DiffusionPrior, list[float]]:
    """Fit a prior on paired (neural-visual, image embedding) rows."""
    fit = fit or FitConfig()
    prior = init_prior(cfg)
    dtype = prior.skip.weight.dtype
    x, y = _as_tensor(zv_hat, dtype), _as_tensor(zv, dtype)
    if x.ndim != 2 or x.shape[1] != cfg.embed_dim or y.shape != (len(x), cfg.out_dim):
        raise FormatError(f"prior data must be (N, {cfg.embed_dim}) -> (N, {cfg.out_dim})")
    opt = torch.optim.Adam(prior.parameters(), lr=fit.lr)
    gen = torch.Generator().manual_seed(fit.seed)
    history = []
    prior.train()
    for epoch in range(fit.epochs):
        order = torch.randperm(len(x), generator=gen)
        total = 0.0
        for start in range(0, len(x), fit.batch_size):
            idx = order[start : start + fit.batch_size]
            loss = prior_loss(prior, x[idx], y[idx], gen)
            if not torch.isfinite(loss):
                raise NumericalAbort(f"non-finite prior loss at epoch {epoch}", {"epoch": epoch})
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / len(x))
    prior.eval()
    return prior, history


@torch.no_grad()
def prior_predict(prior: DiffusionPrior, zv_hat, seed: int = 0) -> np.ndarray:
    """Image-space embeddings, (N, out_dim) float32. Deterministic given ``seed``."""
    prior.eval()
    dtype = prior.skip.weight.dtype
    cond = _as_tensor(zv_hat, dtype)
    if cond.ndim == 1:
        cond = cond[None]
    if prior.cfg.mode == "mlp_direct":
        return prior(cond).float().numpy()
    cfg = prior.cfg
    abar = prior.alpha_bar.to(dtype)
    gen = torch.Generator().manual_seed(seed)
    s = cfg.noise_scale
    x = s * torch.randn((len(cond), cfg.out_dim), generator=gen, dtype=dtype)
    x0 = x
    for step in range(cfg.n_steps, 0, -1):
        t = torch.full((len(cond),), step, dtype=torch.long)
        x0 = prior.denoise(x, t, cond)
        if step == 1:
            break
        noise_part = s * (1 - abar[step]).sqrt()
        eps = (x - abar[step].sqrt() * x0) / noise_part if noise_part > 0 else torch.zeros_like(x)
        x = abar[step - 1].sqrt() * x0 + s * (1 - abar[step - 1]).sqrt() * eps
    return x0.float().numpy()
