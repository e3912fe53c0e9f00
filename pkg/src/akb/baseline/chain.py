"""JPEG -> LDPC -> 16-QAM -> AWGN and back, with mid-gray reconstruction on failure.

The JPEG header for a given (size, quality) does not depend on image content
with the encoder used here, so only the entropy-coded scan (plus EOI) is
transmitted and the receiver rebuilds the header locally.  ``send_header``
switches to sending the full stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..channel import ChannelSpec, awgn
from ..core import LinkReport, RngStream, psnr, source_symbols
from ..validation import check_image
from .jpeg import jpeg_decode, jpeg_encode, jpeg_header, split_header
from .ldpc import LdpcCode, default_code, ldpc_decode, ldpc_encode
from .qam import qam16_demod_llr, qam16_mod

MID_GRAY = 128
BITS_PER_SYMBOL = 4


@dataclass
class ChainTrace:
    payload_bytes: int
    n_blocks: int
    n_symbols: int
    blocks_failed: int
    jpeg_ok: bool
    reason: str = ""


def payload_for(img: np.ndarray, quality: int, send_header: bool = False) -> bytes:
    data = jpeg_encode(img, quality)
    if send_header:
        return data
    header, scan = split_header(data)
    if header != jpeg_header(img.shape[0], img.shape[1], quality):
        raise RuntimeError("JPEG header depends on content; use send_header=True")
    return scan


def symbols_for_payload(n_bytes: int, code: LdpcCode) -> int:
    """Complex symbols needed for ``n_bytes`` of payload (depends only on length, k and n)."""
    n_blocks = -(-8 * n_bytes // code.k)
    return n_blocks * code.n // BITS_PER_SYMBOL


def chain_cbr(img, quality: int, code: LdpcCode | None = None, send_header: bool = False) -> float:
    img = check_image(img)
    code = code or default_code()
    return symbols_for_payload(len(payload_for(img, quality, send_header)), code) / source_symbols(img)


def _to_blocks(payload: bytes, code: LdpcCode) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    n_blocks = -(-bits.size // code.k)
    padded = np.zeros(n_blocks * code.k, dtype=np.uint8)
    padded[: bits.size] = bits
    return padded.reshape(n_blocks, code.k)


def _transmit_symbols(symbols: np.ndarray, spec: ChannelSpec, rng: RngStream) -> tuple[np.ndarray, float]:
    # The transmit gain is known at the receiver, which scales it back out.
    gain = 1.0 / np.sqrt(np.mean(np.abs(symbols) ** 2))
    rx = awgn(symbols * gain, spec, rng) / gain
    return rx, spec.noise_var / gain**2


def classic_chain_batch(
    images,
    quality: int,
    specs,
    code: LdpcCode | None = None,
    rngs=None,
    send_header: bool = False,
    max_iters: int = 50,
    scheme: str = "jpeg_ldpc",
    seed: int = 0,
) -> tuple[list[np.ndarray], list[LinkReport], list[ChainTrace]]:
    """Run the chain on several images, decoding all LDPC blocks in one batch.

    ``specs`` and ``rngs`` are per-image sequences (or a single spec).
    """
    code = code or default_code()
    images = [check_image(im) for im in images]
    if isinstance(specs, ChannelSpec):
        specs = [specs] * len(images)
    if rngs is None:
        rngs = [RngStream(seed, (i,)) for i in range(len(images))]
    if not (len(images) == len(specs) == len(rngs)):
        raise ValueError("images, specs and rngs must have equal length")

    payloads, llrs, counts = [], [], []
    for img, spec, rng in zip(images, specs, rngs):
        payload = payload_for(img, quality, send_header)
        blocks = _to_blocks(payload, code)
        symbols = qam16_mod(ldpc_encode(blocks, code).reshape(-1))
        rx, nv = _transmit_symbols(symbols, spec, rng)
        llrs.append(qam16_demod_llr(rx, nv).reshape(-1, code.n))
        payloads.append(payload)
        counts.append(blocks.shape[0])
    res = ldpc_decode(np.concatenate(llrs), code, max_iters=max_iters)

    outs, reports, traces = [], [], []
    start = 0
    for img, spec, payload, nb in zip(images, specs, payloads, counts):
        ok_blocks = res.success[start : start + nb]
        msg = res.message[start : start + nb]
        start += nb
        n_sym = nb * code.n // BITS_PER_SYMBOL
        failed = int((~ok_blocks).sum())
        recon, jpeg_ok, reason = None, False, "ldpc failure" if failed else ""
        if not failed:
            received = np.packbits(msg.reshape(-1)).tobytes()
            stream = received if send_header else jpeg_header(img.shape[0], img.shape[1], quality) + received
            dec = jpeg_decode(stream)
            jpeg_ok, reason = dec.ok, dec.reason
            if dec.ok and dec.image.shape == img.shape:
                recon = dec.image
        if recon is None:
            recon = np.full_like(img, MID_GRAY)
        outs.append(recon)
        reports.append(
            LinkReport(scheme, float(spec.snr_db), n_sym / source_symbols(img), psnr(img, recon), 1, seed, failed=not jpeg_ok)
        )
        traces.append(ChainTrace(len(payload), nb, n_sym, failed, jpeg_ok, reason))
    return outs, reports, traces


def classic_chain(img, quality: int, spec: ChannelSpec, code: LdpcCode | None = None, rng: RngStream | None = None, **kw):
    """Single-image chain; returns ``(reconstruction, LinkReport)``."""
    rng = rng if rng is not None else RngStream(0)
    outs, reps, _ = classic_chain_batch([img], quality, [spec], code, [rng], **kw)
    return outs[0], reps[0]
