"""Metrics, link reports and seeded random streams shared by every module."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

PSNR_CAP = 99.0
PEAK = 255.0


def _as_f64_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    """Mean squared intensity difference, evaluated in float64."""
    a, b = _as_f64_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float) -> float:
    if err <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, max(0.0, 10.0 * math.log10(PEAK * PEAK / err))))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for 8-bit images; zero error maps to 99 dB."""
    return psnr_from_mse(mse(a, b))


def source_symbols(image_or_shape) -> int:
    shape = image_or_shape if isinstance(image_or_shape, tuple) else np.shape(image_or_shape)
    if len(shape) != 3:
        raise ValueError(f"expected (H, W, C) image or shape, got {shape}")
    return int(shape[0]) * int(shape[1]) * int(shape[2])


def cbr(channel_symbols: int, side_info_symbols: int, image) -> float:
    """Channel bandwidth ratio: transmitted complex symbols per source pixel component."""
    if channel_symbols < 0 or side_info_symbols < 0:
        raise ValueError("symbol counts must be non-negative")
    return (int(channel_symbols) + int(side_info_symbols)) / source_symbols(image)


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(root_seed, stream_id)``.

    The pair is hashed into the PCG64 state via ``numpy.random.SeedSequence``,
    which is platform independent.
    """

    root_seed: int
    stream_id: tuple[int, ...] = ()
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.root_seed < 0 or any(s < 0 for s in self.stream_id):
            raise ValueError("seeds and stream ids must be non-negative integers")
        ss = np.random.SeedSequence(int(self.root_seed), spawn_key=tuple(int(s) for s in self.stream_id))
        object.__setattr__(self, "generator", np.random.Generator(np.random.PCG64(ss)))

    def bytes(self, n: int) -> bytes:
        return self.generator.bytes(n)

    def child(self, *extra: int) -> "RngStream":
        return RngStream(self.root_seed, self.stream_id + tuple(extra))

    def torch_seed(self) -> int:
        """A 63-bit integer seed for ``torch.Generator`` derived from this stream id."""
        ss = np.random.SeedSequence(int(self.root_seed), spawn_key=tuple(self.stream_id) + (0x7A11,))
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_derive(root_seed: int, stream_id: tuple[int, ...] = ()) -> RngStream:
    return RngStream(int(root_seed), tuple(int(s) for s in stream_id))


@dataclass
class LinkReport:
    scheme: str
    snr_db: float
    cbr: float
    psnr_db: float
    n_images: int = 1
    seed: int = 0
    failed: bool = False

    def __post_init__(self):
        if self.cbr < 0:
            raise ValueError("cbr must be non-negative")
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if not 0.0 <= self.psnr_db <= PSNR_CAP:
            raise ValueError(f"psnr_db out of range: {self.psnr_db}")

    def to_dict(self) -> dict:
        return asdict(self)
