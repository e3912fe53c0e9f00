"""Gray-mapped 16-QAM with max-log LLR demapping (positive LLR means bit 0)."""

from __future__ import annotations

import numpy as np

SCALE = 1.0 / np.sqrt(10.0)
# Gray order per axis: 00 -> -3, 01 -> -1, 11 -> +1, 10 -> +3
_LEVEL = {(0, 0): -3.0, (0, 1): -1.0, (1, 1): 1.0, (1, 0): 3.0}
LEVELS = np.array([-3.0, -1.0, 1.0, 3.0])
LEVEL_BITS = np.array([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=np.uint8)  # bits of LEVELS[j]


def _axis_levels(b0: np.ndarray, b1: np.ndarray) -> np.ndarray:
    lut = np.zeros((2, 2))
    for (x, y), v in _LEVEL.items():
        lut[x, y] = v
    return lut[b0, b1]


def constellation() -> np.ndarray:
    """All 16 points, indexed by the 4-bit label ``b0 b1 b2 b3`` read as an integer."""
    labels = np.arange(16)
    bits = ((labels[:, None] >> np.arange(3, -1, -1)) & 1).astype(np.uint8)
    return qam16_mod(bits.reshape(-1))


def qam16_mod(bits) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if bits.size % 4:
        raise ValueError("bit count must be a multiple of 4")
    b = bits.reshape(-1, 4)
    i = _axis_levels(b[:, 0], b[:, 1])
    q = _axis_levels(b[:, 2], b[:, 3])
    return (i + 1j * q) * SCALE


def _axis_llr(y: np.ndarray, noise_var: float) -> np.ndarray:
    """Max-log LLRs ``(n, 2)`` for the two bits carried by one real axis."""
    d2 = (y[:, None] - LEVELS[None, :] * SCALE) ** 2  # (n, 4)
    out = np.empty((y.size, 2))
    for k in range(2):
        zero = LEVEL_BITS[:, k] == 0
        out[:, k] = (d2[:, ~zero].min(axis=1) - d2[:, zero].min(axis=1)) / noise_var
    return out


def qam16_demod_llr(received, noise_var: float) -> np.ndarray:
    """Max-log LLRs for every bit; ``noise_var`` is the total complex noise variance."""
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    y = np.asarray(received, dtype=np.complex128).reshape(-1)
    li = _axis_llr(y.real, noise_var)
    lq = _axis_llr(y.imag, noise_var)
    return np.concatenate([li, lq], axis=1).reshape(-1)


def hard_decision(llrs) -> np.ndarray:
    return (np.asarray(llrs) < 0).astype(np.uint8)
