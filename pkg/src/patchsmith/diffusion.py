"""Diffusion-process math: schedules, forward noising, DDPM/DDIM stepping,
adversarial patch sampling (APS) and classifier-free guidance.

Tensors are torch tensors so that APS stays differentiable with respect to
the starting latent. Schedule tables are float64 numpy arrays; coefficients
enter the graph as python floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable

import numpy as np
import torch

from . import seeding
from .errors import (
    ConfigError,
    PredictorError,
    ShapeMismatchError,
    TimeOutOfRangeError,
    UnsupportedCapabilityError,
)

if TYPE_CHECKING:
    from .generator import ConditionRef


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step ``alpha[t-1] = α_t`` and cumulative ``alpha_bar[t] = ᾱ_t`` with ``ᾱ_0 = 1``."""

    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        self.alpha.setflags(write=False)
        self.alpha_bar.setflags(write=False)

    @property
    def beta(self) -> np.ndarray:
        return 1.0 - self.alpha

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise TimeOutOfRangeError(f"time index {t} outside [0, {self.T}]")
        return t

    def ab(self, t: int) -> float:
        return float(self.alpha_bar[self.check_t(t)])

    def sqrt_ab(self, t: int) -> float:
        return math.sqrt(self.ab(t))

    def sqrt_one_minus_ab(self, t: int) -> float:
        return math.sqrt(1.0 - self.ab(t))


@dataclass
class LatentState:
    value: torch.Tensor
    t: int = 0
    condition: Any = None

    def with_value(self, value: torch.Tensor, t: int | None = None) -> "LatentState":
        return LatentState(value, self.t if t is None else t, self.condition)


@dataclass(frozen=True)
class SamplerConfig:
    t_start: int = 500
    s: int = 166
    sigma: float = 0.0
    cfg_weight: float = 1.0
    seed: int = 0
    T: int = 1000

    def validate(self, sched: NoiseSchedule | None = None, aps: bool = True) -> None:
        T = sched.T if sched is not None else self.T
        if self.s < 1:
            raise ConfigError(f"step size s must be >= 1, got {self.s}")
        if not 1 <= self.t_start <= T:
            raise ConfigError(f"t_start={self.t_start} outside [1, {T}]")
        if aps and self.sigma != 0:
            raise ConfigError("APS requires sigma = 0")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if self.cfg_weight < 0:
            raise ConfigError("cfg_weight must be >= 0")


def build_schedule(T: int = 1000, kind: str = "linear", beta_min: float = 1e-4,
                   beta_max: float = 0.02, cosine_offset: float = 0.008) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    T = int(T)
    if kind == "linear":
        if not (0.0 < beta_min <= beta_max < 1.0):
            raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "scaled_linear":
        if not (0.0 < beta_min <= beta_max < 1.0):
            raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
        beta = np.linspace(math.sqrt(beta_min), math.sqrt(beta_max), T, dtype=np.float64) ** 2
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + cosine_offset) / (1 + cosine_offset) * math.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    return NoiseSchedule(T=T, alpha=alpha, alpha_bar=alpha_bar, kind=kind)


def forward_diffuse(x0: LatentState, t: int, noise: torch.Tensor, sched: NoiseSchedule) -> LatentState:
    if x0.t != 0:
        raise ConfigError(f"forward_diffuse expects a clean latent (t=0), got t={x0.t}")
    t = sched.check_t(t)
    if tuple(noise.shape) != tuple(x0.value.shape):
        raise ShapeMismatchError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(x0.value.shape)}")
    if t == 0:
        return x0.with_value(x0.value, 0)
    value = sched.sqrt_ab(t) * x0.value + sched.sqrt_one_minus_ab(t) * noise.to(x0.value)
    return x0.with_value(value, t)


def _predict(predictor, value, t, condition, w=1.0):
    try:
        if w == 1.0:
            out = predictor(value, t, condition)
        else:
            out = cfg_predict(predictor, LatentState(value, t, condition), condition, w)
    except UnsupportedCapabilityError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise PredictorError(t, exc) from exc
    if tuple(out.shape) != tuple(value.shape):
        raise PredictorError(t, ShapeMismatchError(f"predictor returned shape {tuple(out.shape)}"))
    return out


def ddpm_sample(predictor, sched: NoiseSchedule, seed: int, condition=None,
                dtype=torch.float64, shape=None) -> LatentState:
    """Ancestral sampling from pure noise with fixed variance ``Σ_t = sqrt(β_t)``."""
    shape = tuple(shape or predictor.latent_shape)
    x = seeding.gaussian(shape, seeding.derive_seed(seed, sched.T + 1), dtype)
    for t in range(sched.T, 0, -1):
        eps = _predict(predictor, x, t, condition)
        a = float(sched.alpha[t - 1])
        mean = (x - (1.0 - a) / sched.sqrt_one_minus_ab(t) * eps) / math.sqrt(a)
        if t > 1:
            z = seeding.gaussian(shape, seeding.derive_seed(seed, t), dtype)
            x = mean + math.sqrt(1.0 - a) * z
        else:
            x = mean
    return LatentState(x, 0, condition)


def predict_x0(x_t: torch.Tensor, eps: torch.Tensor, t: int, sched: NoiseSchedule) -> torch.Tensor:
    return (x_t - sched.sqrt_one_minus_ab(t) * eps) / sched.sqrt_ab(t)


def ddim_step(x_t: LatentState, predicted_noise: torch.Tensor, sched: NoiseSchedule,
              sigma: float = 0.0, fresh_noise: torch.Tensor | None = None,
              t_prev: int | None = None) -> LatentState:
    """Non-Markovian update from ``x_t.t`` to ``t_prev`` (default ``t - 1``)."""
    t = sched.check_t(x_t.t)
    if t < 1:
        raise TimeOutOfRangeError("ddim_step needs t >= 1")
    t_prev = t - 1 if t_prev is None else sched.check_t(t_prev)
    if t_prev >= t:
        raise ConfigError(f"t_prev={t_prev} must be below t={t}")
    ab_prev = sched.ab(t_prev)
    if sigma * sigma > 1.0 - ab_prev:
        raise ConfigError(f"sigma^2={sigma * sigma} exceeds 1 - alpha_bar[{t_prev}]={1.0 - ab_prev}")
    x0_hat = predict_x0(x_t.value, predicted_noise, t, sched)
    direction = math.sqrt(1.0 - ab_prev - sigma * sigma)
    out = math.sqrt(ab_prev) * x0_hat + direction * predicted_noise
    if sigma != 0.0:
        if fresh_noise is None:
            raise ConfigError("sigma > 0 requires fresh_noise")
        out = out + sigma * fresh_noise
    return x_t.with_value(out, t_prev)


def aps_timesteps(t_start: int, s: int) -> tuple[list[int], int]:
    """Loop times and the final time at which the return line is evaluated."""
    loop = []
    t = t_start
    while t >= 2 * s:
        loop.append(t)
        t -= s
    return loop, t


@dataclass
class APSResult:
    state: LatentState
    predictor_calls: int
    times: list[int] = field(default_factory=list)


def aps_sample(x0: LatentState | None, cfg: SamplerConfig, predictor, sched: NoiseSchedule,
               condition: "ConditionRef | None" = None, return_info: bool = False,
               shape=None, dtype=None):
    """Noise ``x0`` to ``t_start``, stride down by ``s`` with deterministic DDIM
    steps while ``t >= 2s``, then return the clean estimate at the final ``t``.

    ``x0=None`` is the initial-patch mode and requires ``t_start == T``; the
    start point is then pure noise.
    """
    cfg.validate(sched, aps=True)
    if condition is None and x0 is not None:
        condition = x0.condition
    if x0 is None:
        if cfg.t_start != sched.T:
            raise ConfigError(f"NULL initial patch requires t_start == T ({sched.T}), got {cfg.t_start}")
        shape = tuple(shape or predictor.latent_shape)
        dtype = dtype or torch.float64
        x = seeding.gaussian(shape, seeding.derive_seed(cfg.seed, 0), dtype)
    else:
        if x0.t != 0:
            raise ConfigError(f"APS input must be a clean latent (t=0), got t={x0.t}")
        z = seeding.gaussian(x0.value.shape, seeding.derive_seed(cfg.seed, 0), x0.value.dtype)
        x = forward_diffuse(x0, cfg.t_start, z, sched).value

    w = float(cfg.cfg_weight)
    loop, t_final = aps_timesteps(cfg.t_start, cfg.s)
    calls = 0
    t = cfg.t_start
    for t in loop:
        eps = _predict(predictor, x, t, condition, w)
        calls += 1
        x = ddim_step(LatentState(x, t), eps, sched, 0.0, t_prev=t - cfg.s).value
    t = t_final
    eps = _predict(predictor, x, t, condition, w)
    calls += 1
    # Return line: evaluate at ᾱ_0 = 1, i.e. the predicted clean latent.
    out = math.sqrt(sched.ab(0)) * predict_x0(x, eps, t, sched)
    state = LatentState(out, 0, condition)
    if return_info:
        return APSResult(state, calls, loop + [t_final])
    return state


def cfg_predict(predictor, x_t: LatentState, condition, w: float) -> torch.Tensor:
    """Guided noise ``ε_u + w (ε_c - ε_u)``, written as ``(1-w) ε_u + w ε_c``
    so that ``w=1`` and ``w=0`` reproduce the branches exactly."""
    if not getattr(predictor, "supports_unconditional", False):
        raise UnsupportedCapabilityError("predictor has no unconditional mode")
    from .generator import ConditionRef

    eps_c = predictor(x_t.value, x_t.t, condition)
    eps_u = predictor(x_t.value, x_t.t, ConditionRef.unconditional())
    return (1.0 - w) * eps_u + w * eps_c


class CountingPredictor:
    """Wraps a predictor and counts invocations; used for step bookkeeping."""

    def __init__(self, inner: Callable):
        self.inner = inner
        self.calls: list[int] = []

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def __call__(self, value, t, condition=None):
        self.calls.append(int(t))
        return self.inner(value, t, condition)
