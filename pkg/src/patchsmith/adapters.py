"""Optional bindings to external pretrained generators (Stable Diffusion via
``diffusers``). Never imported by the test suite; everything here is lazy."""

from __future__ import annotations

import threading

import torch

from .errors import ConfigError, MissingAssetError
from .generator import ConditionRef, Manifest


class DiffusersPredictor:
    """UNet noise predictor with CLIP text conditioning.

    ``condition.embedding`` is filled from ``condition.prompt`` on first use.
    The wrapped runtime is not assumed reentrant; calls are serialised.
    """

    supports_unconditional = True

    def __init__(self, pipe, latent_shape=(4, 64, 64)):
        self.pipe = pipe
        self.latent_shape = tuple(latent_shape)
        self._lock = threading.Lock()
        self._cache: dict[str, torch.Tensor] = {}

    def _embed(self, prompt: str) -> torch.Tensor:
        if prompt not in self._cache:
            tok = self.pipe.tokenizer(prompt, padding="max_length", truncation=True,
                                      max_length=self.pipe.tokenizer.model_max_length, return_tensors="pt")
            with torch.no_grad():
                self._cache[prompt] = self.pipe.text_encoder(tok.input_ids.to(self.pipe.device))[0]
        return self._cache[prompt]

    def __call__(self, value, t, condition=None):
        cond = condition or ConditionRef.unconditional()
        emb = cond.embedding if isinstance(cond.embedding, torch.Tensor) else self._embed(cond.prompt)
        x = value if value.dim() == 4 else value[None]
        with self._lock:
            out = self.pipe.unet(x.to(self.pipe.unet.dtype), int(t),
                                 encoder_hidden_states=emb.expand(x.shape[0], -1, -1)).sample
        out = out.to(value.dtype)
        return out if value.dim() == 4 else out[0]


class VAECodec:
    def __init__(self, vae, latent_shape=(4, 64, 64), pixel_shape=(3, 512, 512)):
        self.vae = vae
        self.latent_shape = tuple(latent_shape)
        self.pixel_shape = tuple(pixel_shape)
        self.scale = getattr(vae.config, "scaling_factor", 0.18215)

    def encode(self, pixels: torch.Tensor) -> torch.Tensor:
        x = (pixels * 2.0 - 1.0)[None].to(self.vae.dtype)
        return (self.vae.encode(x).latent_dist.mean[0] * self.scale).to(pixels.dtype)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        x = self.vae.decode((latent / self.scale)[None].to(self.vae.dtype)).sample[0]
        return ((x.to(latent.dtype) + 1.0) / 2.0).clamp(0.0, 1.0)


def load_diffusers_generator(man: Manifest):
    try:
        from diffusers import StableDiffusionPipeline
    except ImportError as exc:
        raise MissingAssetError("generator.kind=diffusers needs the 'diffusers' package", "generator.kind") from exc
    path = man.resolve("generator.checkpoint")
    if man.get("codec.kind", "sd-vae") not in ("sd-vae", ""):
        raise ConfigError("generator.kind=diffusers pairs only with codec.kind=sd-vae")
    pipe = StableDiffusionPipeline.from_pretrained(str(path), safety_checker=None)
    pipe.unet.requires_grad_(False)
    pipe.vae.requires_grad_(False)
    return DiffusersPredictor(pipe), VAECodec(pipe.vae)
