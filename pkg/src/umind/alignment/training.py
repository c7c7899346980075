"""Mini-batch Adam training of encoder + projectors + temperature."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from ..data.types import NeuralTrial, TrialSet
from ..encoders import EncoderConfig, UMindModel, init_params, load_checkpoint, save_checkpoint, trials_to_tensor
from ..errors import ConfigError, NumericalAbort
from ..zeroshot.templates import cosine_rank, topk_accuracy
from .losses import alignment_objective

log = logging.getLogger(__name__)


@dataclass
class AlignmentConfig:
    alpha: float = 0.5
    beta: float = 2.0
    lr: float = 2e-4
    epochs: int = 100
    batch_size: int = 256
    tau_init: float = 0.07
    seed: int = 0
    val_size: int = 740
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.tau_init <= 0:
            raise ConfigError("tau_init must be positive")
        if self.val_size < 1:
            raise ConfigError("val_size must be positive")
        self.adam_betas = tuple(self.adam_betas)


@dataclass
class Targets:
    """Frozen provider embeddings per image: image, coarse text, fine text."""

    image: dict[int, np.ndarray]
    coarse: dict[int, np.ndarray]
    fine: dict[int, np.ndarray]

    def stack(self, image_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.stack([self.image[i] for i in image_ids]),
                np.stack([self.coarse[i] for i in image_ids]),
                np.stack([self.fine[i] for i in image_ids]))

    def digest(self) -> str:
        h = hashlib.sha256()
        for table in (self.image, self.coarse, self.fine):
            for k in sorted(table):
                h.update(str(k).encode())
                h.update(np.ascontiguousarray(table[k], dtype="<f4").tobytes())
        return h.hexdigest()


def compute_targets(catalog, image_provider, text_provider) -> Targets:
    records = sorted(catalog, key=lambda r: r.image_id)
    img = image_provider.embed_images(records)
    coarse = text_provider.embed_texts([r.coarse_text for r in records])
    fine = text_provider.embed_texts([r.fine_text for r in records])
    ids = [r.image_id for r in records]
    as32 = lambda m: {i: np.asarray(row, dtype=np.float32) for i, row in zip(ids, m)}
    return Targets(as32(img), as32(coarse), as32(fine))


def split_validation(ts: TrialSet, n: int, seed: int) -> tuple[TrialSet, TrialSet]:
    """Hold out ``n`` trials (by sample, not category), drawn once from the seed."""
    if n >= len(ts.trials):
        raise ConfigError(f"validation size {n} leaves no training trials (have {len(ts.trials)})")
    perm = np.random.default_rng([seed, 740]).permutation(len(ts.trials))
    val_idx = set(perm[:n].tolist())
    train = [t for i, t in enumerate(ts.trials) if i not in val_idx]
    val = [t for i, t in enumerate(ts.trials) if i in val_idx]
    return ts.with_trials(train), ts.with_trials(val)


@dataclass
class TrainState:
    model: UMindModel
    optimizer: torch.optim.Adam
    cfg: AlignmentConfig
    epoch: int = 0
    step: int = 0
    best_validation_metric: float = float("-inf")
    best_epoch: int = -1
    best_state: dict[str, torch.Tensor] | None = None
    history: list[dict] = field(default_factory=list)

    def best_model(self) -> UMindModel:
        model = copy.deepcopy(self.model)
        if self.best_state is not None:
            model.load_state_dict(self.best_state)
        return model.eval()


def make_optimizer(model: UMindModel, cfg: AlignmentConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas, weight_decay=0.0)


def new_train_state(enc_cfg: EncoderConfig, cfg: AlignmentConfig) -> TrainState:
    model = init_params(enc_cfg, cfg.tau_init)
    return TrainState(model, make_optimizer(model, cfg), cfg)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1, dtype=np.uint64)[0] % (2**63))


@torch.no_grad()
def validation_topk(model: UMindModel, val: TrialSet, targets: Targets) -> tuple[float, float]:
    """Top-1/top-5 retrieval of validation trials among the validation images."""
    model.eval()
    x = trials_to_tensor(val.trials, model.cfg, next(model.parameters()).dtype)
    zv_hat = model.visual_head(model.encoder(x)).double().numpy()
    image_ids = sorted({t.image_id for t in val.trials})
    templates = np.stack([targets.image[i] for i in image_ids])
    results = cosine_rank(zv_hat, templates, image_ids, [t.image_id for t in val.trials])
    rep = topk_accuracy(results, [t.image_id for t in val.trials], k=5)
    return rep.top1, rep.top5


def _write_log(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(
    state: TrainState,
    train_ts: TrialSet,
    val_ts: TrialSet,
    image_provider,
    text_provider,
    cfg: AlignmentConfig | None = None,
    log_path: str | os.PathLike | None = None,
    on_epoch_end: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run epochs ``state.epoch .. cfg.epochs - 1``.

    Each epoch's shuffling and dropout draw from a generator seeded by
    (cfg.seed, epoch), so a state saved after any epoch resumes bit-exactly.
    Providers are only queried, never updated; their outputs are hashed
    before and after and a mismatch raises.
    """
    cfg = cfg or state.cfg
    if not val_ts.trials:
        raise ConfigError("empty validation set")
    if not train_ts.trials:
        raise ConfigError("empty training set")
    catalog = {r.image_id: r for r in train_ts.catalog + val_ts.catalog}.values()
    targets = compute_targets(list(catalog), image_provider, text_provider)
    digest = targets.digest()

    model = state.model
    dtype = next(model.parameters()).dtype
    x_all = trials_to_tensor(train_ts.trials, model.cfg, dtype)
    zv_all, zc_all, zt_all = (torch.from_numpy(a).to(dtype) for a in targets.stack([t.image_id for t in train_ts.trials]))
    n = len(x_all)

    while state.epoch < cfg.epochs:
        epoch = state.epoch
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(_epoch_seed(cfg.seed, epoch))
            order = torch.randperm(n)
            model.train()
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                zv_hat, zs_hat = model(x_all[idx])
                total, parts = alignment_objective(zv_hat, zs_hat, zv_all[idx], zc_all[idx], zt_all[idx],
                                                   model.tau, cfg.alpha, cfg.beta)
                if not torch.isfinite(total):
                    raise NumericalAbort(
                        f"non-finite loss at epoch {epoch}, step {state.step}",
                        {"epoch": epoch, "step": state.step, "parts": parts.as_dict(), "tau": float(model.tau.detach())},
                    )
                state.optimizer.zero_grad(set_to_none=True)
                total.backward()
                state.optimizer.step()
                record = {"step": state.step, "epoch": epoch, **parts.as_dict(), "tau": float(model.tau.detach())}
                state.history.append(record)
                if log_path is not None:
                    _write_log(log_path, record)
                state.step += 1

        top1, top5 = validation_topk(model, val_ts, targets)
        record = {"epoch": epoch, "step": state.step, "val_top1": top1, "val_top5": top5, "tau": float(model.tau.detach())}
        state.history.append(record)
        if log_path is not None:
            _write_log(log_path, record)
        if top1 >= state.best_validation_metric:  # ties go to the later epoch
            state.best_validation_metric = top1
            state.best_epoch = epoch
            state.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        state.epoch += 1
        log.debug("epoch %d val top1 %.4f", epoch, top1)
        if on_epoch_end is not None:
            on_epoch_end(state)

    model.eval()
    if compute_targets(list(catalog), image_provider, text_provider).digest() != digest:
        raise NumericalAbort("embedding provider outputs changed during training")
    return state


def save_train_state(path: str | os.PathLike, state: TrainState, meta: dict | None = None) -> str:
    """Model, Adam moments, best-so-far weights and history in one container.

    ``meta`` adds extra header entries (e.g. data fingerprints).
    """
    extra: dict[str, np.ndarray] = {}
    opt = state.optimizer.state_dict()
    for idx, slots in opt["state"].items():
        for name, value in slots.items():
            extra[f"optim/{idx}/{name}"] = torch.as_tensor(value).detach().cpu().numpy()
    if state.best_state is not None:
        for k, v in state.best_state.items():
            extra[f"best/{k}"] = v.detach().cpu().numpy()
    meta = {
        "train": {
            "alignment": asdict(state.cfg), "epoch": state.epoch, "step": state.step,
            "best_validation_metric": state.best_validation_metric, "best_epoch": state.best_epoch,
            "history": state.history,
        },
        **(meta or {}),
    }
    return save_checkpoint(path, state.model, extra, meta)


def load_train_state(path: str | os.PathLike) -> TrainState:
    model, extra, meta = load_checkpoint(path)
    info = meta.get("train")
    if info is None:
        raise ConfigError(f"{path} holds no training state")
    cfg = AlignmentConfig(**info["alignment"])
    optimizer = make_optimizer(model, cfg)
    slots: dict[int, dict] = {}
    best: dict[str, torch.Tensor] = {}
    for key, value in extra.items():
        if key.startswith("optim/"):
            _, idx, name = key.split("/", 2)
            slots.setdefault(int(idx), {})[name] = torch.from_numpy(value)
        elif key.startswith("best/"):
            best[key[len("best/"):]] = torch.from_numpy(value)
    opt_state = optimizer.state_dict()
    opt_state["state"] = slots
    optimizer.load_state_dict(opt_state)
    return TrainState(
        model, optimizer, cfg, epoch=info["epoch"], step=info["step"],
        best_validation_metric=info["best_validation_metric"], best_epoch=info["best_epoch"],
        best_state=best or None, history=info["history"],
    )

