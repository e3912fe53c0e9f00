"""Learned analysis/synthesis transforms and the variable-rate JSCC encoder/decoder.

A token is one ``reduction x reduction`` pixel patch.  The JSCC encoder maps
every token to ``2 * max(rate_set)`` real values; a token assigned rate ``k``
sends only its first ``2k`` reals, packed as ``k`` complex symbols.  The
receiver zero-fills what was not sent.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn
from torch.nn import functional as F

from . import core
from .channel import ChannelSpec, awgn, awgn_torch, normalize_power_torch
from .core import RngStream
from .entropy import (
    DEFAULT_RATES,
    EntropyModel,
    check_rate_set,
    rate_preset_map,
    token_entropy,
)
from .validation import check_image, check_images, check_is_fitted

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "akb-codec/1"


@dataclass
class CodecConfig:
    token_dim: int = 64
    reduction: int = 16
    width: int = 48
    jscc_width: int = 96
    n_blocks: int = 2
    conditioning_dim: int = 512
    rate_set: tuple[int, ...] = DEFAULT_RATES
    eta: float = 0.5
    backbone: str = "conv"
    window: int = 4
    entropy_hidden: int = 64
    latent_gain: float = 4.0
    train_snr_db: float = 10.0

    def __post_init__(self):
        self.rate_set = check_rate_set(self.rate_set)
        if self.reduction < 2 or self.reduction & (self.reduction - 1):
            raise ValueError("reduction must be a power of two >= 2")
        if self.token_dim < 2 * self.rate_set[-1]:
            raise ValueError(
                f"token_dim={self.token_dim} cannot carry the largest rate "
                f"({self.rate_set[-1]} complex symbols = {2 * self.rate_set[-1]} reals)"
            )
        if self.backbone not in ("conv", "window_attention"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")

    @property
    def channel_dim(self) -> int:
        return 2 * self.rate_set[-1]

    @property
    def rate_map_bits_per_token(self) -> int:
        return math.ceil(math.log2(len(self.rate_set))) if len(self.rate_set) > 1 else 0


# -- building blocks ---------------------------------------------------------


class FiLM(nn.Module):
    """Feature-wise affine modulation from the KB vector; identity at init."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(cond_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.proj(cond).chunk(2, dim=1)
        return h * (1.0 + gamma[..., None, None]) + beta[..., None, None]


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(F.gelu(x))))


class WindowAttentionBlock(nn.Module):
    """Pre-norm self-attention inside non-overlapping token windows, then an MLP."""

    def __init__(self, channels: int, window: int, heads: int = 4):
        super().__init__()
        heads = max(h for h in range(1, heads + 1) if channels % h == 0)
        self.window = window
        self.norm1 = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))

    def forward(self, x):
        b, c, h, w = x.shape
        ws_h, ws_w = min(self.window, h), min(self.window, w)
        if h % ws_h or w % ws_w:
            raise ValueError(f"grid {h}x{w} not divisible by window {self.window}")
        t = x.view(b, c, h // ws_h, ws_h, w // ws_w, ws_w).permute(0, 2, 4, 3, 5, 1)
        t = t.reshape(-1, ws_h * ws_w, c)
        q = self.norm1(t)
        t = t + self.attn(q, q, q, need_weights=False)[0]
        t = t + self.mlp(self.norm2(t))
        t = t.view(b, h // ws_h, w // ws_w, ws_h, ws_w, c).permute(0, 5, 1, 3, 2, 4)
        return t.reshape(b, c, h, w)


def _blocks(cfg: CodecConfig, channels: int) -> nn.ModuleList:
    if cfg.backbone == "window_attention":
        return nn.ModuleList(WindowAttentionBlock(channels, cfg.window) for _ in range(cfg.n_blocks))
    return nn.ModuleList(ResBlock(channels) for _ in range(cfg.n_blocks))


class AnalysisTransform(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        n_down = int(math.log2(cfg.reduction))
        layers: list[nn.Module] = [nn.Conv2d(3, cfg.width, 5, stride=2, padding=2)]
        for _ in range(n_down - 1):
            layers += [nn.GELU(), nn.Conv2d(cfg.width, cfg.width, 5, stride=2, padding=2)]
        layers += [nn.GELU(), nn.Conv2d(cfg.width, cfg.token_dim, 1)]
        self.net = nn.Sequential(*layers)
        self.gain = cfg.latent_gain

    def forward(self, x):
        return self.gain * self.net(x - 0.5)


class SynthesisTransform(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        n_up = int(math.log2(cfg.reduction))
        layers: list[nn.Module] = [nn.Conv2d(cfg.token_dim, cfg.width, 1)]
        for i in range(n_up):
            out = 3 if i == n_up - 1 else cfg.width
            layers += [nn.GELU(), nn.ConvTranspose2d(cfg.width, out, 4, stride=2, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, f):
        return self.net(f) + 0.5


class JSCCEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.inp = nn.Conv2d(cfg.token_dim, cfg.jscc_width, 3, padding=1)
        self.film = FiLM(cfg.conditioning_dim, cfg.jscc_width)
        self.blocks = _blocks(cfg, cfg.jscc_width)
        self.out = nn.Conv2d(cfg.jscc_width, cfg.channel_dim, 1)

    def forward(self, y, cond):
        h = self.film(self.inp(y), cond)
        for blk in self.blocks:
            h = blk(h)
        return self.out(F.gelu(h))


class JSCCDecoder(nn.Module):
    """Input per token: received reals (zero-filled), its rate fraction, and the SNR offset."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.inp = nn.Conv2d(cfg.channel_dim + 2, cfg.jscc_width, 3, padding=1)
        with torch.no_grad():
            self.inp.weight[:, -1].zero_()  # SNR offset channel: inert until trained on varied SNRs
        self.film = FiLM(cfg.conditioning_dim, cfg.jscc_width)
        self.blocks = _blocks(cfg, cfg.jscc_width)
        self.out = nn.Conv2d(cfg.jscc_width, cfg.token_dim, 1)

    def forward(self, r, rate_frac, snr_offset, cond):
        snr_plane = snr_offset.view(-1, 1, 1, 1).expand(-1, 1, *r.shape[2:])
        h = self.inp(torch.cat([r, rate_frac[:, None], snr_plane], dim=1))
        h = self.film(h, cond)
        for blk in self.blocks:
            h = blk(h)
        return self.out(F.gelu(h))


class JSCCModel(nn.Module):
    """All learned codec parameters: transforms, JSCC pair and entropy model."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.analysis = AnalysisTransform(cfg)
        self.synthesis = SynthesisTransform(cfg)
        self.encoder = JSCCEncoder(cfg)
        self.decoder = JSCCDecoder(cfg)
        self.entropy = EntropyModel(cfg.token_dim, cfg.entropy_hidden)
        self.register_buffer("rates", torch.tensor(cfg.rate_set, dtype=torch.long), persistent=False)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def channel_mask(self, rate_idx: torch.Tensor) -> torch.Tensor:
        """``(B, 2R, h, w)`` mask keeping the first ``2 * rate`` reals of each token."""
        k = self.rates[rate_idx]  # (B, h, w)
        dims = torch.arange(self.cfg.channel_dim, device=rate_idx.device).view(1, -1, 1, 1)
        return (dims < 2 * k[:, None]).to(self.dtype)

    def rate_fraction(self, rate_idx: torch.Tensor) -> torch.Tensor:
        return self.rates[rate_idx].to(self.dtype) / float(self.cfg.rate_set[-1])

    def snr_offset(self, snr_db, batch: int) -> torch.Tensor:
        snr = torch.as_tensor(snr_db, dtype=self.dtype)
        if snr.dim() == 0:
            snr = snr.expand(batch)
        return (snr - self.cfg.train_snr_db) / 20.0

    def forward(
        self,
        x: torch.Tensor,
        cond: torch.Tensor,
        snr_db,
        rate_idx: torch.Tensor | None = None,
        eta_scale: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
        round_latent: bool = True,
        noiseless: bool = False,
        auto_eta: bool = False,
        uniform_levels: torch.Tensor | None = None,
    ) -> dict:
        """Differentiable transmit/receive pass on a ``(B, 3, H, W)`` batch in ``[0, 1]``.

        Without ``rate_idx`` the rate map follows the entropy with
        ``eta = cfg.eta * eta_scale``; ``auto_eta`` replaces ``cfg.eta`` by the
        value that maps the batch's mean token entropy to the geometric middle
        of the positive rates.  ``uniform_levels`` (one index per image, -1 to
        keep the entropy map) pins whole maps to a single level.
        """
        f = self.analysis(x)
        y = f + (torch.round(f) - f).detach() if round_latent else f
        e = self.entropy.entropy_map(y)
        if rate_idx is None:
            base = self.cfg.eta
            if auto_eta:
                positive = [r for r in self.cfg.rate_set if r > 0]
                base = math.sqrt(positive[0] * positive[-1]) / float(e.detach().mean().clamp_min(1e-6))
            scale = base if eta_scale is None else base * eta_scale.view(-1, 1, 1)
            target = scale * e.detach()
            rate_idx = torch.argmin(torch.abs(target[..., None] - self.rates.to(self.dtype)), dim=-1)
            if uniform_levels is not None:
                pin = uniform_levels.view(-1, 1, 1)
                rate_idx = torch.where(pin >= 0, pin.expand_as(rate_idx), rate_idx)
        mask = self.channel_mask(rate_idx)
        s = normalize_power_torch(self.encoder(y, cond), mask)
        r = s if noiseless else awgn_torch(s, snr_db, generator) * mask
        f_hat = self.decoder(r, self.rate_fraction(rate_idx), self.snr_offset(snr_db, x.shape[0]), cond)
        x_hat = self.synthesis(f_hat)
        return {"x_hat": x_hat, "entropy": e, "rate_idx": rate_idx, "n_symbols": mask.sum(dim=(1, 2, 3)) / 2}


# -- frames and the per-image operations -------------------------------------


@dataclass
class SymbolFrame:
    payload: np.ndarray
    rate_map: np.ndarray
    side_bits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    kb_index: int = 0
    grid: tuple[int, int] = (0, 0)
    image_shape: tuple[int, int, int] = (0, 0, 3)
    rate_map_bits: int = 0

    @property
    def n_symbols(self) -> int:
        return int(self.payload.size)

    @property
    def side_symbols(self) -> int:
        """KB index and rate map, each charged at 2 bits per complex symbol."""
        return math.ceil(len(self.side_bits) / 2) + math.ceil(self.rate_map_bits / 2)

    def cbr(self) -> float:
        return core.cbr(self.n_symbols, self.side_symbols, self.image_shape)


def _to_tensor_images(X: np.ndarray, dtype) -> torch.Tensor:
    return torch.as_tensor(X, dtype=dtype).permute(0, 3, 1, 2) / 255.0


def _cond_tensor(cond, n: int, dim: int, dtype) -> torch.Tensor:
    if cond is None:
        return torch.zeros(n, dim, dtype=dtype)
    c = torch.as_tensor(np.asarray(cond), dtype=dtype)
    if c.dim() == 1:
        c = c.expand(n, -1)
    if c.shape != (n, dim):
        raise ValueError(f"conditioning must have shape ({n}, {dim}), got {tuple(c.shape)}")
    return c


def analysis(img, model: JSCCModel) -> np.ndarray:
    """``(H, W, 3)`` image to the ``(H/r, W/r, token_dim)`` feature map."""
    img = check_image(img, reduction=model.cfg.reduction)
    with torch.no_grad():
        f = model.analysis(_to_tensor_images(img[None], model.dtype))
    return f[0].permute(1, 2, 0).double().numpy()


def synthesis(f, model: JSCCModel) -> np.ndarray:
    f = np.asarray(f)
    if not np.all(np.isfinite(f)):
        raise ValueError("feature map must be finite")
    with torch.no_grad():
        x = model.synthesis(torch.as_tensor(f, dtype=model.dtype).permute(2, 0, 1)[None])
    return to_uint8(x)[0]


def to_uint8(x: torch.Tensor) -> np.ndarray:
    return torch.clamp(torch.round(x * 255.0), 0, 255).to(torch.uint8).permute(0, 2, 3, 1).numpy()


def _check_rate_map(rm: np.ndarray, n_rates: int, grid: tuple[int, int]) -> np.ndarray:
    rm = np.asarray(rm, dtype=np.int64)
    if rm.shape[-2:] != tuple(grid):
        raise ValueError(f"rate map shape {rm.shape} does not match token grid {grid}")
    if rm.min(initial=0) < 0 or rm.max(initial=0) >= n_rates:
        raise ValueError("rate map index out of range")
    return rm


def encode_batch(model: JSCCModel, y_hat: np.ndarray, rate_maps: np.ndarray, cond=None, image_shape=None) -> list[SymbolFrame]:
    """Encode ``(N, h, w, D)`` rounded features into power-normalised frames."""
    cfg = model.cfg
    n, h, w, _ = y_hat.shape
    rate_maps = _check_rate_map(rate_maps, len(cfg.rate_set), (h, w))
    c = _cond_tensor(cond, n, cfg.conditioning_dim, model.dtype)
    with torch.no_grad():
        z = model.encoder(torch.as_tensor(y_hat, dtype=model.dtype).permute(0, 3, 1, 2), c)
    z = z.permute(0, 2, 3, 1).double().numpy()  # (N, h, w, 2R)
    rates = np.asarray(cfg.rate_set)
    image_shape = image_shape or (h * cfg.reduction, w * cfg.reduction, 3)
    frames = []
    for i in range(n):
        k = rates[rate_maps[i]].reshape(-1)
        tokens = z[i].reshape(h * w, -1)
        parts = [tokens[t, : 2 * k[t]] for t in range(h * w)]
        reals = np.concatenate(parts) if parts else np.zeros(0)
        payload = reals[0::2] + 1j * reals[1::2]
        power = np.mean(np.abs(payload) ** 2) if payload.size else 0.0
        if power > 0:
            payload = payload / np.sqrt(power)
        frames.append(
            SymbolFrame(
                payload=payload,
                rate_map=rate_maps[i].copy(),
                grid=(h, w),
                image_shape=tuple(image_shape),
                rate_map_bits=cfg.rate_map_bits_per_token * h * w,
            )
        )
    return frames


def unpack_payload(frame: SymbolFrame, rate_set, channel_dim: int) -> np.ndarray:
    """Received payload back to a zero-filled ``(h, w, channel_dim)`` real grid."""
    h, w = frame.grid
    k = np.asarray(rate_set)[frame.rate_map.reshape(-1)]
    if frame.payload.size != int(k.sum()):
        raise ValueError(f"payload has {frame.payload.size} symbols but rate map requires {int(k.sum())}")
    reals = np.empty(2 * frame.payload.size)
    reals[0::2] = frame.payload.real
    reals[1::2] = frame.payload.imag
    out = np.zeros((h * w, channel_dim))
    offsets = np.concatenate([[0], np.cumsum(2 * k)])
    for t in range(h * w):
        out[t, : 2 * k[t]] = reals[offsets[t] : offsets[t + 1]]
    return out.reshape(h, w, channel_dim)


def decode_batch(model: JSCCModel, frames: list[SymbolFrame], snr_db, cond=None) -> np.ndarray:
    """Decode received frames to ``(N, H, W, 3)`` uint8 images."""
    cfg = model.cfg
    n = len(frames)
    r = np.stack([unpack_payload(fr, cfg.rate_set, cfg.channel_dim) for fr in frames])
    idx = torch.as_tensor(np.stack([fr.rate_map for fr in frames]), dtype=torch.long)
    c = _cond_tensor(cond, n, cfg.conditioning_dim, model.dtype)
    snr = np.broadcast_to(np.asarray(snr_db, dtype=np.float64), (n,))
    with torch.no_grad():
        f_hat = model.decoder(
            torch.as_tensor(r, dtype=model.dtype).permute(0, 3, 1, 2),
            model.rate_fraction(idx),
            model.snr_offset(torch.as_tensor(snr.copy()), n),
            c,
        )
        x = model.synthesis(f_hat)
    return to_uint8(x)


def jscc_encode(f, rm, cond, model: JSCCModel) -> SymbolFrame:
    f = np.asarray(f)
    return encode_batch(model, f[None], np.asarray(rm)[None], None if cond is None else np.asarray(cond)[None])[0]


def jscc_decode(frame: SymbolFrame, spec: ChannelSpec, cond, model: JSCCModel) -> np.ndarray:
    """Received frame to the reconstructed ``(h, w, token_dim)`` feature map."""
    cfg = model.cfg
    r = unpack_payload(frame, cfg.rate_set, cfg.channel_dim)
    idx = torch.as_tensor(frame.rate_map[None], dtype=torch.long)
    c = _cond_tensor(None if cond is None else np.asarray(cond)[None], 1, cfg.conditioning_dim, model.dtype)
    with torch.no_grad():
        f_hat = model.decoder(
            torch.as_tensor(r[None], dtype=model.dtype).permute(0, 3, 1, 2),
            model.rate_fraction(idx),
            model.snr_offset(spec.snr_db, 1),
            c,
        )
    return f_hat[0].permute(1, 2, 0).double().numpy()


# -- training ----------------------------------------------------------------


def train_step(
    model: JSCCModel,
    optimizer: torch.optim.Optimizer,
    batch: np.ndarray,
    spec: ChannelSpec,
    lambda_rd: float,
    cond=None,
    generator: torch.Generator | None = None,
    eta_scale: torch.Tensor | None = None,
    rate_idx: torch.Tensor | None = None,
    auto_eta: bool = False,
    uniform_levels: torch.Tensor | None = None,
) -> tuple[float, float, float]:
    """One gradient step on ``MSE + lambda_rd * mean token entropy``; returns (distortion, rate, total)."""
    if lambda_rd < 0:
        raise ValueError("lambda_rd must be non-negative")
    model.train()
    x = _to_tensor_images(batch, model.dtype)
    c = _cond_tensor(cond, x.shape[0], model.cfg.conditioning_dim, model.dtype)
    out = model(
        x, c, spec.snr_db, rate_idx=rate_idx, eta_scale=eta_scale, generator=generator,
        auto_eta=auto_eta, uniform_levels=uniform_levels,
    )
    distortion = F.mse_loss(out["x_hat"], x)
    rate = out["entropy"].mean()
    total = distortion + lambda_rd * rate if lambda_rd else distortion
    if not torch.isfinite(total):
        raise FloatingPointError("non-finite training loss")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return distortion.item(), rate.item(), total.item()


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: JSCCModel, path, root_seed: int, extra: dict | None = None) -> str:
    """Write a codec checkpoint and return the sha256 of its bytes."""
    cfg = asdict(model.cfg)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg,
        "rate_set": list(model.cfg.rate_set),
        "eta": model.cfg.eta,
        "train_snr_db": model.cfg.train_snr_db,
        "root_seed": int(root_seed),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[JSCCModel, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a codec checkpoint")
    cfg = dict(blob["config"])
    cfg["rate_set"] = tuple(cfg["rate_set"])
    model = JSCCModel(CodecConfig(**cfg))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- estimator ---------------------------------------------------------------


@dataclass
class TransmitResult:
    images: np.ndarray
    frames: list[SymbolFrame]
    psnr: np.ndarray
    cbr: np.ndarray
    entropy: np.ndarray


class JSCCCodec(TransformerMixin, BaseEstimator):
    """Entropy-guided variable-rate JSCC codec with an sklearn-style interface.

    ``fit`` trains the whole codec at ``train_snr_db``; ``transform`` returns
    the latent feature maps; ``transmit`` runs images through encoder, AWGN
    channel and decoder.

    Parameters
    ----------
    rate_set, eta : rate preset map configuration (symbols per token, symbols per bit).
    lambda_rd : weight of the mean-entropy rate term in the training loss.
    eta_spread : training draws ``eta * 2**u`` with ``u ~ U(-eta_spread, eta_spread)``
        per image so the decoder sees every truncation level.
    auto_eta : centre the training eta on the batch entropy (mean rate at the
        geometric middle of the positive rates) instead of on ``eta``, so
        training covers the whole rate set whatever the entropy scale.
    uniform_rate_prob : fraction of training images given a uniform random rate map.
    """

    def __init__(
        self,
        token_dim=64,
        reduction=16,
        width=48,
        jscc_width=96,
        n_blocks=2,
        conditioning_dim=512,
        rate_set=DEFAULT_RATES,
        eta=0.5,
        backbone="conv",
        lambda_rd=2e-5,
        train_snr_db=10.0,
        n_steps=20000,
        batch_size=16,
        learning_rate=1e-3,
        eta_spread=2.0,
        auto_eta=True,
        uniform_rate_prob=0.25,
        flip_augment=True,
        random_state=0,
        log_every=500,
    ):
        self.token_dim = token_dim
        self.reduction = reduction
        self.width = width
        self.jscc_width = jscc_width
        self.n_blocks = n_blocks
        self.conditioning_dim = conditioning_dim
        self.rate_set = rate_set
        self.eta = eta
        self.backbone = backbone
        self.lambda_rd = lambda_rd
        self.train_snr_db = train_snr_db
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.eta_spread = eta_spread
        self.auto_eta = auto_eta
        self.uniform_rate_prob = uniform_rate_prob
        self.flip_augment = flip_augment
        self.random_state = random_state
        self.log_every = log_every

    def _make_config(self) -> CodecConfig:
        return CodecConfig(
            token_dim=self.token_dim,
            reduction=self.reduction,
            width=self.width,
            jscc_width=self.jscc_width,
            n_blocks=self.n_blocks,
            conditioning_dim=self.conditioning_dim,
            rate_set=tuple(self.rate_set),
            eta=self.eta,
            backbone=self.backbone,
            train_snr_db=self.train_snr_db,
        )

    def fit(self, X, y=None, cond=None):
        """Train on images ``X`` with per-image KB conditioning vectors ``cond``."""
        X = check_images(X, reduction=self.reduction)
        cfg = self._make_config()
        stream = core.rng_derive(self.random_state, (0xC0DEC,))
        torch.manual_seed(stream.torch_seed())
        model = JSCCModel(cfg)
        gen = torch.Generator().manual_seed(stream.child(1).torch_seed())
        opt = torch.optim.Adam(model.parameters(), lr=self.learning_rate)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, self.n_steps), eta_min=self.learning_rate * 0.05)
        rng = stream.generator
        cond = None if cond is None else np.asarray(cond, dtype=np.float32)
        spec = ChannelSpec(self.train_snr_db)
        n_rates = len(cfg.rate_set)
        self.history_ = []
        for step in range(self.n_steps):
            idx = rng.integers(0, len(X), size=min(self.batch_size, len(X)))
            batch = X[idx]
            if self.flip_augment:
                flips = rng.random(len(idx)) < 0.5
                batch = np.where(flips[:, None, None, None], batch[:, :, ::-1], batch)
            eta_scale = torch.as_tensor(2.0 ** rng.uniform(-self.eta_spread, self.eta_spread, len(idx)), dtype=model.dtype)
            uniform = rng.random(len(idx)) < self.uniform_rate_prob
            levels = np.where(uniform, rng.integers(1, n_rates, len(idx)), -1)
            d, r, t = train_step(
                model, opt, batch, spec, self.lambda_rd,
                cond=None if cond is None else cond[idx],
                generator=gen, eta_scale=eta_scale, auto_eta=self.auto_eta,
                uniform_levels=torch.as_tensor(levels),
            )
            sched.step()
            self.history_.append((d, r, t))
            if self.log_every and (step + 1) % self.log_every == 0:
                recent = np.mean(self.history_[-self.log_every:], axis=0)
                logger.info("step %d  mse %.5f  rate %.2f bits/token  loss %.5f", step + 1, *recent)
        model.eval()
        self.model_ = model
        self.config_ = cfg
        return self

    @classmethod
    def from_model(cls, model: JSCCModel, **params) -> "JSCCCodec":
        cfg = model.cfg
        est = cls(
            token_dim=cfg.token_dim, reduction=cfg.reduction, width=cfg.width, jscc_width=cfg.jscc_width,
            n_blocks=cfg.n_blocks, conditioning_dim=cfg.conditioning_dim, rate_set=cfg.rate_set,
            eta=cfg.eta, backbone=cfg.backbone, train_snr_db=cfg.train_snr_db, **params,
        )
        est.model_ = model.eval()
        est.config_ = cfg
        return est

    def transform(self, X):
        """Rounded latent feature maps ``(N, h, w, token_dim)``."""
        check_is_fitted(self, "model_")
        X = check_images(X, reduction=self.config_.reduction)
        out = []
        with torch.no_grad():
            for i in range(0, len(X), 64):
                f = self.model_.analysis(_to_tensor_images(X[i : i + 64], self.model_.dtype))
                out.append(torch.round(f).permute(0, 2, 3, 1).double().numpy())
        return np.concatenate(out)

    def entropy_maps(self, y_hat: np.ndarray) -> np.ndarray:
        """Per-token bits ``(N, h, w)`` for rounded features, evaluated in float64."""
        check_is_fitted(self, "model_")
        with torch.no_grad():
            mu, sigma = self.model_.entropy(torch.as_tensor(y_hat, dtype=self.model_.dtype).permute(0, 3, 1, 2))
        mu = mu.detach().permute(0, 2, 3, 1).double().numpy()
        sigma = sigma.detach().permute(0, 2, 3, 1).double().numpy()
        return token_entropy(y_hat, mu, sigma).sum(axis=-1)

    def rate_maps(self, X=None, *, y_hat=None, eta=None) -> np.ndarray:
        if y_hat is None:
            y_hat = self.transform(X)
        e = self.entropy_maps(y_hat)
        return rate_preset_map(e, self.config_.rate_set, self.config_.eta if eta is None else eta)

    def transmit(
        self,
        X,
        snr_db,
        rngs: list[RngStream],
        cond=None,
        kb_bits: list[np.ndarray] | None = None,
        rate_maps: np.ndarray | None = None,
        eta: float | None = None,
        y_hat: np.ndarray | None = None,
    ) -> TransmitResult:
        """Send each image over its own AWGN realisation and reconstruct it.

        ``snr_db`` may be a scalar or one value per image.  ``rate_maps``
        overrides the entropy-derived preset map (e.g. after an agent action).
        """
        check_is_fitted(self, "model_")
        X = check_images(X, reduction=self.config_.reduction)
        n = len(X)
        if len(rngs) != n:
            raise ValueError("need one RngStream per image")
        snr = np.broadcast_to(np.asarray(snr_db, dtype=np.float64), (n,))
        if y_hat is None:
            y_hat = self.transform(X)
        e = self.entropy_maps(y_hat)
        if rate_maps is None:
            rate_maps = rate_preset_map(e, self.config_.rate_set, self.config_.eta if eta is None else eta)
        frames = encode_batch(self.model_, y_hat, rate_maps, cond, image_shape=X.shape[1:])
        for i, fr in enumerate(frames):
            if kb_bits is not None:
                fr.side_bits = np.asarray(kb_bits[i], dtype=np.uint8)
            fr.payload = awgn(fr.payload, ChannelSpec(float(snr[i])), rngs[i])
        recon = decode_batch(self.model_, frames, snr, cond)
        psnrs = np.array([core.psnr(X[i], recon[i]) for i in range(n)])
        cbrs = np.array([fr.cbr() for fr in frames])
        return TransmitResult(recon, frames, psnrs, cbrs, e)

    def score(self, X, y=None, snr_db=10.0, cond=None, seed=0):
        """Mean PSNR over ``X`` at ``snr_db``."""
        rngs = [core.rng_derive(seed, (i,)) for i in range(len(X))]
        return float(self.transmit(X, snr_db, rngs, cond=cond).psnr.mean())
