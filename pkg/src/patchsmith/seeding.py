"""Deterministic seed splitting and seeded tensor draws."""

from __future__ import annotations

import numpy as np
import torch

_MASK64 = (1 << 64) - 1


def derive_seed(root: int, *keys: int) -> int:
    """Child seed for ``(root, *keys)``; independent of call order."""
    # SeedSequence ignores trailing zero words, so the key count leads the
    # entropy to keep (r,) and (r, 0) apart.
    entropy = [len(keys), int(root) & _MASK64] + [int(k) & _MASK64 for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) & _MASK64)


def gaussian(shape, seed: int, dtype=torch.float64) -> torch.Tensor:
    # Drawn at double precision, then cast, so float32 and float64 runs see the same noise.
    z = torch.randn(tuple(shape), generator=generator(seed), dtype=torch.float64)
    return z.to(dtype)


def uniform(shape, seed: int, low: float = 0.0, high: float = 1.0, dtype=torch.float64) -> torch.Tensor:
    u = torch.rand(tuple(shape), generator=generator(seed), dtype=torch.float64)
    return (low + (high - low) * u).to(dtype)
