"""Gaussian entropy model over latent tokens and the rate preset map.

Each latent value is assigned the probability mass of its unit-width bin
under a Gaussian, floored at ``P_FLOOR``.  Summing ``-log2 p`` over a token's
channels gives the entropy map that drives per-token rate allocation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import ndtr
from torch import nn

SIGMA_MIN = 0.01
P_FLOOR = 1e-9
BITS_CAP = -math.log2(P_FLOOR)  # 29.897...
DEFAULT_RATES = (0, 2, 4, 8, 12, 16, 24, 32)


def check_rate_set(rates) -> tuple[int, ...]:
    rates = tuple(int(r) for r in rates)
    if not rates:
        raise ValueError("rate set must not be empty")
    if rates[0] < 0:
        raise ValueError("rates must be non-negative")
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValueError(f"rates must be strictly increasing, got {rates}")
    return rates


@dataclass
class GaussianParams:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must have the same shape")
        self.sigma = np.maximum(self.sigma, SIGMA_MIN)


def token_entropy(y, mu, sigma):
    """Bits needed for ``y`` under N(mu, sigma^2) with unit bins (vectorised).

    The bin mass is evaluated on the lower tail side, which is numerically
    stable far from the mean.
    """
    y = np.asarray(y, dtype=np.float64)
    d = np.abs(y - np.asarray(mu, dtype=np.float64))
    s = np.maximum(np.asarray(sigma, dtype=np.float64), SIGMA_MIN)
    p = ndtr((0.5 - d) / s) - ndtr((-0.5 - d) / s)
    bits = -np.log2(np.maximum(p, P_FLOOR))
    return bits if bits.ndim else float(bits)


def entropy_map(f, gp: GaussianParams) -> np.ndarray:
    """Per-token entropy (bits) of a ``(H, W, D)`` feature map, rounded to bin centres."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != gp.mu.shape:
        raise ValueError(f"feature shape {f.shape} does not match params {gp.mu.shape}")
    return token_entropy(np.round(f), gp.mu, gp.sigma).sum(axis=-1)


def rate_preset_map(e, rate_set=DEFAULT_RATES, eta: float = 0.5) -> np.ndarray:
    """Index of the rate nearest to ``eta * e``; ties go to the lower index."""
    if len(rate_set) == 0:
        raise ValueError("rate set must not be empty")
    if not eta > 0:
        raise ValueError("eta must be positive")
    rates = np.asarray(rate_set, dtype=np.float64)
    target = eta * np.asarray(e, dtype=np.float64)
    dist = np.abs(target[..., None] - rates)
    return np.argmin(dist, axis=-1).astype(np.int64)  # argmin picks the first (lower) index on ties


def rate_loss(e) -> float:
    return float(np.mean(np.asarray(e, dtype=np.float64)))


# -- torch model -------------------------------------------------------------


def bin_bits_torch(y: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    d = torch.abs(y - mu)
    p = torch.special.ndtr((0.5 - d) / sigma) - torch.special.ndtr((-0.5 - d) / sigma)
    return -torch.log2(torch.clamp(p, min=P_FLOOR))


class EntropyModel(nn.Module):
    """Predicts per-channel Gaussian parameters for each token.

    ``sigma`` comes from a two-layer network applied to the token's magnitude
    profile ``|y|``; ``mu`` is a learned per-channel location.  Neither can
    reproduce the signed value being coded, so the estimate cannot collapse
    to zero bits while the token still carries information.  Inputs are
    channels-first ``(B, D, H, W)``.
    """

    def __init__(self, depth: int, hidden: int = 64):
        super().__init__()
        self.depth = depth
        self.hidden_layer = nn.Conv2d(depth, hidden, 1)
        self.scale_head = nn.Conv2d(hidden, depth, 1)
        self.mu = nn.Parameter(torch.zeros(depth))
        nn.init.zeros_(self.scale_head.weight)
        nn.init.zeros_(self.scale_head.bias)

    def forward(self, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = nn.functional.gelu(self.hidden_layer(torch.abs(y)))
        sigma = torch.clamp(nn.functional.softplus(self.scale_head(h)), min=SIGMA_MIN)
        mu = self.mu.view(1, -1, 1, 1).expand_as(sigma)
        return mu, sigma

    def entropy_map(self, y_hat: torch.Tensor) -> torch.Tensor:
        """``(B, H, W)`` bits per token for already-rounded latents."""
        mu, sigma = self(y_hat)
        return bin_bits_torch(y_hat, mu, sigma).sum(dim=1)


def predict_params(f, model: EntropyModel) -> GaussianParams:
    """Gaussian parameters for a ``(H, W, D)`` feature map (numpy in, numpy out)."""
    f = np.asarray(f)
    p = next(model.parameters())
    with torch.no_grad():
        y = torch.as_tensor(np.round(f), dtype=p.dtype).permute(2, 0, 1)[None]
        mu, sigma = model(y)
    mu = mu[0].detach().permute(1, 2, 0).cpu().numpy().astype(np.float64)
    sigma = sigma[0].detach().permute(1, 2, 0).cpu().numpy().astype(np.float64)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
        raise FloatingPointError("entropy model produced non-finite parameters")
    return GaussianParams(mu, sigma)
