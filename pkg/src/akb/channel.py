"""AWGN channel simulation over complex baseband symbols.

One channel symbol is one complex value; all CBR arithmetic uses that unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import PSNR_CAP, RngStream


@dataclass(frozen=True)
class ChannelSpec:
    snr_db: float
    kind: str = "AWGN"

    def __post_init__(self):
        if self.kind != "AWGN":
            raise ValueError(f"unsupported channel kind {self.kind!r}")
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")

    @property
    def noise_var(self) -> float:
        """Total complex noise variance for unit signal power."""
        return noise_variance(self.snr_db)


def noise_variance(snr_db: float) -> float:
    return 10.0 ** (-float(snr_db) / 10.0)


def normalize_power(block) -> np.ndarray:
    """Scale a symbol block to unit mean power."""
    x = np.asarray(block, dtype=np.complex128)
    if x.size == 0:
        raise ValueError("cannot normalize an empty block")
    p = np.mean(np.abs(x) ** 2)
    if p == 0.0:
        raise ValueError("cannot normalize an all-zero block")
    return x / np.sqrt(p)


def awgn(block, spec: ChannelSpec, rng: RngStream) -> np.ndarray:
    """Add circularly-symmetric complex Gaussian noise of variance ``10^(-snr/10)``."""
    x = np.asarray(block, dtype=np.complex128)
    if x.size == 0:
        return x.copy()
    n = rng.generator.standard_normal((2, x.size))
    scale = math.sqrt(spec.noise_var / 2.0)
    return x + scale * (n[0] + 1j * n[1]).reshape(x.shape)


def snr_map(spec: ChannelSpec, grid_h: int, grid_w: int) -> np.ndarray:
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid dimensions must be >= 1")
    return np.full((grid_h, grid_w), float(spec.snr_db), dtype=np.float64)


def empirical_snr(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=np.complex128)
    noisy = np.asarray(noisy, dtype=np.complex128)
    if clean.shape != noisy.shape or clean.size < 1:
        raise ValueError("blocks must be non-empty and of equal length")
    noise_energy = np.sum(np.abs(noisy - clean) ** 2)
    if noise_energy == 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(np.sum(np.abs(clean) ** 2) / noise_energy))


# -- differentiable counterparts used inside training ------------------------


def normalize_power_torch(z: torch.Tensor, mask: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Per-sample unit-power normalisation of masked real pairs.

    ``z`` and ``mask`` have shape ``(B, ...)``; the real values under the mask
    form ``mask.sum() / 2`` complex symbols per sample.  Samples with no
    symbols are left at zero.
    """
    dims = tuple(range(1, z.dim()))
    z = z * mask
    energy = (z * z).sum(dim=dims, keepdim=True)
    n_sym = mask.sum(dim=dims, keepdim=True) / 2.0
    # keep both branches finite so an all-dropped sample cannot leak NaN gradients;
    # its z is already zero, so the placeholder scale has no effect
    live = n_sym > 0
    energy = torch.where(live, energy, torch.ones_like(energy))
    return z * torch.sqrt(torch.where(live, n_sym, torch.ones_like(n_sym)) / (energy + eps))


def awgn_torch(z: torch.Tensor, snr_db: torch.Tensor | float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Real-valued AWGN with variance ``sigma^2 / 2`` per real component.

    ``snr_db`` may be a scalar or a per-sample tensor of shape ``(B,)``.
    """
    snr = torch.as_tensor(snr_db, dtype=z.dtype, device=z.device)
    if snr.dim() == 1:
        snr = snr.view(-1, *([1] * (z.dim() - 1)))
    std = torch.sqrt(10.0 ** (-snr / 10.0) / 2.0)
    noise = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    return z + std * noise
