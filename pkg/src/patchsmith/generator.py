"""Noise-predictor and codec contracts, analytic oracles, the desk-scale
trainable denoiser, and the adapter entry point for external generators."""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import seeding
from .diffusion import NoiseSchedule, build_schedule
from .errors import ConfigError, MissingAssetError, NumericError, ShapeMismatchError, TimeOutOfRangeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConditionRef:
    """Generation condition. ``embedding`` is an int class label for the toy
    generator, or whatever payload an adapter produced from ``prompt``."""

    prompt: str = ""
    negative_prompt: str = ""
    embedding: Any = None

    @classmethod
    def unconditional(cls) -> "ConditionRef":
        return cls()

    @classmethod
    def label(cls, k: int, prompt: str = "") -> "ConditionRef":
        return cls(prompt=prompt or f"label:{int(k)}", embedding=int(k))

    @property
    def is_unconditional(self) -> bool:
        return self.embedding is None and not self.prompt


@runtime_checkable
class NoisePredictor(Protocol):
    latent_shape: tuple[int, ...]
    supports_unconditional: bool

    def __call__(self, value: torch.Tensor, t: int, condition: ConditionRef | None = None) -> torch.Tensor:
        ...


class IdentityCodec:
    """Generation space is pixel space; decode clamps to [0, 1]."""

    def __init__(self, latent_shape: Sequence[int]):
        self.latent_shape = tuple(latent_shape)
        self.pixel_shape = self.latent_shape

    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        return pixels.clone()

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return latent.clamp(0.0, 1.0)


def _time_index(t) -> int:
    if isinstance(t, torch.Tensor):
        t = t.item()
    return int(t)


class PointMassOracle:
    """Exact noise predictor for a data distribution concentrated on ``target``."""

    supports_unconditional = True

    def __init__(self, target: torch.Tensor, sched: NoiseSchedule):
        if not torch.isfinite(target).all():
            raise ConfigError("point-mass target must be finite")
        self.target = target
        self.sched = sched
        self.latent_shape = tuple(target.shape)

    def __call__(self, value, t, condition=None):
        t = _time_index(t)
        if t == 0:
            raise TimeOutOfRangeError("point-mass oracle is undefined at t=0")
        s = self.sched
        return (value - s.sqrt_ab(t) * self.target.to(value)) / s.sqrt_one_minus_ab(t)


def make_pointmass_oracle(target: torch.Tensor, sched: NoiseSchedule) -> PointMassOracle:
    return PointMassOracle(target, sched)


class GaussianOracle:
    """Exact noise predictor for isotropic Gaussian data ``N(mean, std^2 I)``."""

    supports_unconditional = True

    def __init__(self, mean: torch.Tensor, std: float, sched: NoiseSchedule):
        self.mean, self.std, self.sched = mean, float(std), sched
        self.latent_shape = tuple(mean.shape)

    def __call__(self, value, t, condition=None):
        t = _time_index(t)
        if t == 0:
            raise TimeOutOfRangeError("oracle is undefined at t=0")
        ab = self.sched.ab(t)
        var = self.std ** 2
        m = self.mean.to(value)
        x0 = m + var * math.sqrt(ab) / (ab * var + 1.0 - ab) * (value - math.sqrt(ab) * m)
        return (value - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


# ---------------------------------------------------------------------------
# Desk-scale trainable denoiser


def _fourier(x: torch.Tensor, n: int) -> torch.Tensor:
    freqs = torch.exp(torch.linspace(0.0, math.log(64.0), n // 2, dtype=x.dtype, device=x.device))
    ang = x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int, glob: bool = False):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.glob = nn.Linear(ch, ch) if glob else None

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x))) + self.emb(F.silu(emb))[:, :, None, None]
        if self.glob is not None:
            h = h + self.glob(h.mean(dim=(2, 3)))[:, :, None, None]
        return x + self.conv2(F.silu(self.norm2(h)))


class ToyDenoiser(nn.Module):
    """Small conv denoiser with per-label mean templates.

    The clean estimate is preconditioned around the label template ``m``::

        x0_hat = m + c_skip(σ)·r + c_out(σ)·F(c_in(σ)·r, σ, label),   r = x_t/√ᾱ_t - m

    and is converted to the ε parameterisation on output. Label ``n_classes``
    is the null (unconditional) label.
    """

    def __init__(self, shape: Sequence[int], alpha_bar: np.ndarray, n_classes: int = 1,
                 width: int = 24, sigma_data: float = 0.5):
        super().__init__()
        c = shape[0]
        self.shape = tuple(shape)
        self.n_classes = n_classes
        self.template = nn.Parameter(torch.zeros(n_classes + 1, *shape))
        self.register_buffer("alpha_bar", torch.tensor(np.array(alpha_bar), dtype=torch.float32))
        self.register_buffer("sigma_data", torch.tensor(float(sigma_data)))
        self.label_emb = nn.Embedding(n_classes + 1, width)
        self.time_mlp = nn.Sequential(nn.Linear(16, width), nn.SiLU(), nn.Linear(width, width))
        w, w2 = width, 2 * width
        self.conv_in = nn.Conv2d(c, w, 3, padding=1)
        self.res1 = _ResBlock(w, width)
        self.down1 = nn.Conv2d(w, w2, 3, stride=2, padding=1)
        self.res2 = _ResBlock(w2, width)
        self.down2 = nn.Conv2d(w2, w2, 3, stride=2, padding=1)
        self.res3 = _ResBlock(w2, width, glob=True)
        self.up2 = nn.Conv2d(w2, w2, 1)
        self.res4 = _ResBlock(w2, width)
        self.up1 = nn.Conv2d(w2, w, 1)
        self.res5 = _ResBlock(w, width)
        self.norm_out = nn.GroupNorm(8, w)
        self.conv_out = nn.Conv2d(w, c, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def denoise(self, x_t: torch.Tensor, t: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        ab = self.alpha_bar.to(x_t.dtype)[t].view(-1, 1, 1, 1)
        sigma = torch.sqrt((1.0 - ab) / ab)
        sd = self.sigma_data.to(x_t.dtype)
        m = self.template[label].to(x_t.dtype)
        r = x_t / torch.sqrt(ab) - m
        denom = torch.sqrt(sigma ** 2 + sd ** 2)
        c_skip = sd ** 2 / denom ** 2
        c_out = sigma * sd / denom
        c_in = 1.0 / denom

        emb = self.time_mlp(_fourier(torch.log(sigma.view(-1)) / 4.0, 16)) + self.label_emb(label)
        h1 = self.res1(self.conv_in(c_in * r), emb)
        h2 = self.res2(self.down1(h1), emb)
        h3 = self.res3(self.down2(h2), emb)
        u2 = self.res4(self.up2(F.interpolate(h3, scale_factor=2.0, mode="nearest")) + h2, emb)
        h = self.res5(self.up1(F.interpolate(u2, scale_factor=2.0, mode="nearest")) + h1, emb)
        h = F.silu(self.norm_out(h))
        return m + c_skip * r + c_out * self.conv_out(h)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        ab = self.alpha_bar.to(x_t.dtype)[t].view(-1, 1, 1, 1)
        x0 = self.denoise(x_t, t, label)
        return (x_t - torch.sqrt(ab) * x0) / torch.sqrt(1.0 - ab)


@dataclass
class ToyTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    width: int = 24
    p_uncond: float = 0.1
    seed: int = 0
    labels: Sequence[int] | None = None


class ToyPredictor:
    """Contract wrapper around a trained :class:`ToyDenoiser`."""

    supports_unconditional = True

    def __init__(self, module: ToyDenoiser, metadata: dict | None = None):
        module.eval().requires_grad_(False)
        self.module = module
        self.latent_shape = module.shape
        self.metadata = metadata or {}
        self._by_dtype = {next(module.parameters()).dtype: module}

    def _module_for(self, dtype):
        if dtype not in self._by_dtype:
            self._by_dtype[dtype] = copy.deepcopy(self.module).to(dtype)
        return self._by_dtype[dtype]

    def _label(self, condition) -> int:
        if condition is None or condition.is_unconditional or condition.embedding is None:
            return self.module.n_classes
        k = int(condition.embedding)
        if not 0 <= k < self.module.n_classes:
            raise ConfigError(f"label {k} outside [0, {self.module.n_classes})")
        return k

    def __call__(self, value, t, condition=None):
        t = _time_index(t)
        if t == 0:
            raise TimeOutOfRangeError("toy predictor is undefined at t=0")
        batched = value.dim() == len(self.latent_shape) + 1
        if tuple(value.shape[batched:]) != self.latent_shape:
            raise ShapeMismatchError(f"value shape {tuple(value.shape)} vs latent {self.latent_shape}")
        x = value if batched else value[None]
        n = x.shape[0]
        mod = self._module_for(x.dtype)
        tt = torch.full((n,), t, dtype=torch.long)
        lab = torch.full((n,), self._label(condition), dtype=torch.long)
        out = mod(x, tt, lab)
        return out if batched else out[0]


def make_toy_predictor(train_set, sched: NoiseSchedule, train_cfg: ToyTrainConfig | None = None) -> ToyPredictor:
    cfg = train_cfg or ToyTrainConfig()
    data = torch.stack(list(train_set)) if not isinstance(train_set, torch.Tensor) else train_set
    if data.shape[0] == 0:
        raise ConfigError("train_set is empty")
    data = data.to(torch.float32)
    labels = torch.zeros(len(data), dtype=torch.long) if cfg.labels is None else torch.as_tensor(cfg.labels, dtype=torch.long)
    if len(labels) != len(data):
        raise ShapeMismatchError("labels and train_set lengths differ")
    n_classes = int(labels.max()) + 1

    torch.manual_seed(cfg.seed)
    means = [data[labels == k].mean(0) if (labels == k).any() else data.mean(0) for k in range(n_classes)]
    resid = data - torch.stack(means)[labels]
    sigma_data = max(float(resid.std()) if len(data) > 1 else 0.0, 0.05)
    module = ToyDenoiser(tuple(data.shape[1:]), sched.alpha_bar, n_classes, cfg.width, sigma_data)
    with torch.no_grad():
        module.template.copy_(torch.stack(means + [data.mean(0)]))

    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr)
    gen = seeding.generator(cfg.seed)
    history: list[float] = []
    for step in range(cfg.steps):
        idx = torch.randint(0, len(data), (cfg.batch_size,), generator=gen)
        x0, lab = data[idx], labels[idx].clone()
        drop = torch.rand(cfg.batch_size, generator=gen) < cfg.p_uncond
        lab[drop] = n_classes
        t = torch.randint(1, sched.T + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        ab = module.alpha_bar[t].view(-1, 1, 1, 1)
        x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
        # ε-MSE weighted by 1 + σ²/σ_data², which equals the unit-scale loss
        # on the preconditioned network output at every noise level.
        weight = 1.0 + (1.0 - ab) / ab / sigma_data ** 2
        loss = (weight * (module(x_t, t, lab) - eps) ** 2).mean()
        if not torch.isfinite(loss):
            raise NumericError("toy predictor training diverged",
                               {"step": step, "recent_losses": history[-10:], "lr": cfg.lr})
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(module.parameters(), 1.0)
        opt.step()
        history.append(loss.item())
    final = float(np.mean(history[-50:])) if history else None
    return ToyPredictor(module, {"final_loss": final, "steps": cfg.steps, "n_classes": n_classes,
                                 "sigma_data": sigma_data, "schedule_T": sched.T})


def save_toy_predictor(pred: ToyPredictor, path: str | os.PathLike) -> None:
    m = pred.module
    torch.save({"state": m.state_dict(), "shape": m.shape, "n_classes": m.n_classes,
                "width": m.conv_in.out_channels, "metadata": pred.metadata}, path)


def load_toy_predictor(path: str | os.PathLike) -> ToyPredictor:
    blob = torch.load(path, weights_only=False)
    alpha_bar = blob["state"]["alpha_bar"].double().numpy()
    m = ToyDenoiser(blob["shape"], alpha_bar, blob["n_classes"], blob["width"])
    m.load_state_dict(blob["state"])
    return ToyPredictor(m, blob["metadata"])


# ---------------------------------------------------------------------------
# Adapters

GENERATOR_MANIFEST_KEYS = frozenset({
    "generator.kind", "generator.checkpoint", "codec.kind", "codec.checkpoint",
    "conditioning.kind", "runtime.reentrant",
})


@dataclass
class Manifest:
    entries: dict[str, str]
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, key: str, default: str = "") -> str:
        return self.entries.get(key, default)

    def resolve(self, key: str) -> Path:
        raw = self.get(key)
        if not raw:
            raise MissingAssetError(f"manifest entry {key} is empty", key)
        p = Path(os.path.expanduser(raw))
        candidates = [p] if p.is_absolute() else [self.base_dir / p]
        cache = os.environ.get("PATCHSMITH_CACHE")
        if cache and not p.is_absolute():
            candidates.append(Path(cache) / p)
        for c in candidates:
            if c.exists():
                return c
        raise MissingAssetError(f"{key}: asset not found at {candidates[0]}", key)


def load_manifest(source, allowed: frozenset[str] = GENERATOR_MANIFEST_KEYS) -> Manifest:
    from .config import parse_kv

    if isinstance(source, Manifest):
        entries, base = dict(source.entries), source.base_dir
    elif isinstance(source, dict):
        entries, base = {k: str(v) for k, v in source.items()}, Path.cwd()
    else:
        path = Path(source)
        if not path.exists():
            raise MissingAssetError(f"manifest not found: {path}", str(path))
        entries, base = parse_kv(path.read_text()), path.parent
    unknown = sorted(set(entries) - allowed)
    if unknown:
        raise ConfigError(f"unknown manifest keys: {', '.join(unknown)}")
    return Manifest(entries, base)


def _load_image_tensor(path: Path) -> torch.Tensor:
    if path.suffix == ".npy":
        return torch.from_numpy(np.load(path)).to(torch.float64)
    from .io import read_png

    return read_png(path).to(torch.float64)


def adapt_pretrained_generator(manifest, sched: NoiseSchedule | None = None):
    """Bind an external generator + codec behind the predictor/codec contracts.

    Kinds: ``pointmass`` (checkpoint = target image), ``toy`` (checkpoint =
    saved :class:`ToyPredictor`), ``diffusers`` (checkpoint = a Stable
    Diffusion pipeline directory; needs the ``diffusers`` package).
    """
    man = load_manifest(manifest)
    kind = man.get("generator.kind")
    codec_kind = man.get("codec.kind", "identity")
    if kind == "pointmass":
        target = _load_image_tensor(man.resolve("generator.checkpoint"))
        predictor = PointMassOracle(target, sched or build_schedule())
    elif kind == "toy":
        predictor = load_toy_predictor(man.resolve("generator.checkpoint"))
    elif kind == "diffusers":
        from .adapters import load_diffusers_generator

        return load_diffusers_generator(man)
    else:
        raise ConfigError(f"unknown generator.kind {kind!r}")
    if codec_kind != "identity":
        raise ConfigError(f"codec.kind {codec_kind!r} is not available for generator.kind {kind!r}")
    return predictor, IdentityCodec(predictor.latent_shape)
