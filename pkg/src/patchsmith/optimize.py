"""Outer attack loop: Adam on the generation-space latent through APS."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import seeding
from .diffusion import LatentState, SamplerConfig, aps_sample
from .errors import ConfigError, NumericError
from .io import save_latent, tensor_digest, write_png
from .objective import AttackStack, LossBreakdown, batch_objective
from .render import SceneSample

log = logging.getLogger(__name__)

Objective = Callable[..., LossBreakdown]


@dataclass(frozen=True)
class OptimizeConfig:
    max_iterations: int = 200
    batch_size: int = 8
    lr: float = 0.005
    lr_decay_factor: float = 0.5
    lr_patience: int = 10
    loss_delta_threshold: float = 1e-4
    min_lr: float = 1e-6
    lam: float = 0.1
    val_fraction: float = 0.1
    checkpoint_every: int = 50
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.max_iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("max_iterations >= 0, batch_size >= 1 and lr > 0 required")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1)")
        if self.lr_patience < 1 or self.checkpoint_every < 1:
            raise ConfigError("lr_patience and checkpoint_every must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")


@dataclass
class OptimizeTrace:
    rows: list[dict] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_iteration: int | None = None
    best_val: float | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "det_term", "tv_term", "total", "lr"])
            for r in self.rows:
                w.writerow([r["iteration"], repr(r["det_term"]), repr(r["tv_term"]), repr(r["total"]), repr(r["lr"])])
        return path


def init_patch(cfg: SamplerConfig, condition, stack: AttackStack, dtype=torch.float32) -> LatentState:
    """Initial patch sampled from pure noise (APS with no input patch)."""
    if cfg.t_start != stack.schedule.T:
        raise ConfigError(f"init_patch requires t_start == T ({stack.schedule.T}), got {cfg.t_start}")
    with torch.no_grad():
        st = aps_sample(None, cfg, stack.predictor, stack.schedule, condition=condition, dtype=dtype)
    return LatentState(st.value.detach(), 0, condition)


def resample_patch(latent: LatentState, cfg: SamplerConfig, stack: AttackStack) -> torch.Tensor:
    if latent.t != 0:
        raise ConfigError("resample_patch expects a clean latent (t=0)")
    return stack.codec.decode(aps_sample(latent, cfg, stack.predictor, stack.schedule).value)


def split_validation(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seeding.derive_seed(seed, 99)).permutation(n)
    n_val = int(round(n * fraction)) if n >= 2 else 0
    n_val = min(max(n_val, 1 if fraction > 0 and n >= 2 else 0), n - 1) if n >= 2 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def optimize_patch(init: LatentState, scenes: Sequence[SceneSample], cfg: OptimizeConfig, stack: AttackStack,
                   objective: Objective = batch_objective, checkpoint_dir=None) -> tuple[LatentState, OptimizeTrace]:
    cfg.validate()
    scenes = list(scenes)
    if not scenes:
        raise ConfigError("scene corpus is empty")
    trace = OptimizeTrace()
    if cfg.max_iterations == 0:
        return init, trace

    train_idx, val_idx = split_validation(len(scenes), cfg.val_fraction, cfg.seed)
    train = [scenes[i] for i in train_idx]
    val = [scenes[i] for i in val_idx] or train[: cfg.batch_size]
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    val_sampler = replace(cfg.sampler, seed=seeding.derive_seed(cfg.seed, 3))
    val_render = seeding.derive_seed(cfg.seed, 4)

    latent = init.value.detach().clone().requires_grad_(True)
    cond = init.condition
    opt = torch.optim.Adam([latent], lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    lr = cfg.lr

    def validate_at(it: int) -> None:
        with torch.no_grad():
            val_total = float(objective(val, LatentState(latent, 0, cond), val_sampler, stack, cfg.lam, val_render).total)
        digest = tensor_digest(latent)
        trace.checkpoints.append({"iteration": it, "digest": digest, "val_total": val_total})
        if trace.best_val is None or val_total < trace.best_val:
            trace.best_val, trace.best_iteration = val_total, it
            best[0] = latent.detach().clone()
        if checkpoint_dir is not None:
            d = Path(checkpoint_dir)
            d.mkdir(parents=True, exist_ok=True)
            save_latent(latent, d / f"ckpt_{it:06d}.npy")
            write_png(stack.codec.decode(latent.detach()), d / f"ckpt_{it:06d}.png")
            row = trace.rows[-1] if trace.rows else {}
            (d / f"ckpt_{it:06d}.csv").write_text(
                "iteration,det_term,tv_term,total,lr,val_total,digest\n"
                f"{it},{row.get('det_term', '')},{row.get('tv_term', '')},{row.get('total', '')},{lr},{val_total},{digest}\n")

    best = [latent.detach().clone()]
    validate_at(0)
    epoch_losses: list[float] = []
    prev_epoch_mean: float | None = None
    plateau = 0
    order = np.arange(len(train))
    for it in range(cfg.max_iterations):
        t0 = time.perf_counter()
        epoch, pos = divmod(it, per_epoch)
        if pos == 0:
            order = np.random.default_rng(seeding.derive_seed(cfg.seed, 5, epoch)).permutation(len(train))
        batch = [train[i] for i in order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]]
        sampler_cfg = replace(cfg.sampler, seed=seeding.derive_seed(cfg.seed, 1, it))
        loss = objective(batch, LatentState(latent, 0, cond), sampler_cfg, stack, cfg.lam,
                         seeding.derive_seed(cfg.seed, 2, it))
        if not torch.isfinite(loss.total):
            raise NumericError(f"non-finite loss at iteration {it}",
                               {"iteration": it, "latent_digest": tensor_digest(latent),
                                "batch": [sc.source_id for sc in batch], "sampler_seed": sampler_cfg.seed})
        opt.zero_grad()
        loss.total.backward()
        opt.step()

        row = {"iteration": it, **loss.as_row(), "lr": lr}
        trace.rows.append(row)
        trace.lr_history.append(lr)
        epoch_losses.append(row["total"])
        trace.seconds.append(time.perf_counter() - t0)

        if pos == per_epoch - 1:
            mean = float(np.mean(epoch_losses))
            epoch_losses = []
            if prev_epoch_mean is not None and abs(mean - prev_epoch_mean) < cfg.loss_delta_threshold:
                plateau += 1
            else:
                plateau = 0
            prev_epoch_mean = mean
            if plateau >= cfg.lr_patience and lr * cfg.lr_decay_factor >= cfg.min_lr:
                lr *= cfg.lr_decay_factor
                for g in opt.param_groups:
                    g["lr"] = lr
                plateau = 0
                log.info("iteration %d: lr decayed to %g", it, lr)
        if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.max_iterations:
            validate_at(it + 1)
    return LatentState(best[0], 0, cond), trace
