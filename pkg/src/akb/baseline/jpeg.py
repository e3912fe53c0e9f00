"""Baseline JPEG via Pillow/libjpeg, plus a strict entropy-coded-segment checker.

libjpeg decodes most corrupted streams without complaint, so every stream
is first walked marker by marker and Huffman-decoded block by block.  Any
inconsistency marks the stream as failed.
"""

from __future__ import annotations

import functools
import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, features

import PIL

from ..validation import check_image


class JpegFormatError(ValueError):
    pass


@dataclass
class JpegDecodeResult:
    image: np.ndarray | None
    ok: bool
    reason: str = ""


def encoder_identity() -> str:
    return f"Pillow {PIL.__version__} / libjpeg {features.version('jpg')}"


def jpeg_encode(img, quality: int) -> bytes:
    if not 1 <= int(quality) <= 100:
        raise ValueError("quality must be in 1..100")
    img = check_image(img)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="JPEG", quality=int(quality))
    return buf.getvalue()


def split_header(data: bytes) -> tuple[bytes, bytes]:
    """Split a stream into everything up to the end of the SOS segment and the scan data."""
    pos = 2
    if data[:2] != b"\xff\xd8":
        raise JpegFormatError("missing SOI")
    while pos + 4 <= len(data):
        if data[pos] != 0xFF:
            raise JpegFormatError(f"expected marker at {pos}")
        marker = data[pos + 1]
        length = int.from_bytes(data[pos + 2 : pos + 4], "big")
        end = pos + 2 + length
        if marker == 0xDA:
            return data[:end], data[end:]
        pos = end
    raise JpegFormatError("no SOS segment")


@functools.lru_cache(maxsize=64)
def jpeg_header(height: int, width: int, quality: int) -> bytes:
    """Header Pillow writes for any image of this size and quality (content independent)."""
    return split_header(jpeg_encode(np.zeros((height, width, 3), np.uint8), quality))[0]


# -- strict parsing ----------------------------------------------------------


class _Bits:
    def __init__(self, data: bytes):
        self.bits = "".join(f"{b:08b}" for b in data)
        self.pos = 0

    def read(self, n: int) -> int:
        if self.pos + n > len(self.bits):
            raise JpegFormatError("entropy-coded data ended early")
        v = int(self.bits[self.pos : self.pos + n], 2) if n else 0
        self.pos += n
        return v

    def decode(self, table: dict) -> int:
        code = 0
        for length in range(1, 17):
            code = (code << 1) | self.read(1)
            sym = table.get((length, code))
            if sym is not None:
                return sym
        raise JpegFormatError("invalid Huffman code")


def _huffman_table(counts: bytes, symbols: bytes) -> dict:
    table = {}
    code = 0
    k = 0
    for length in range(1, 17):
        for _ in range(counts[length - 1]):
            table[(length, code)] = symbols[k]
            code += 1
            k += 1
        code <<= 1
    return table


def _unstuff(data: bytes, start: int) -> tuple[bytes, int]:
    """Entropy-coded bytes from ``start`` up to the next marker; returns (bytes, marker position)."""
    out = bytearray()
    i = start
    while i < len(data):
        b = data[i]
        if b == 0xFF:
            if i + 1 >= len(data):
                raise JpegFormatError("dangling 0xFF at end of stream")
            nxt = data[i + 1]
            if nxt == 0x00:
                out.append(0xFF)
                i += 2
                continue
            return bytes(out), i
        out.append(b)
        i += 1
    raise JpegFormatError("scan not terminated by a marker")


def validate_jpeg(data: bytes, allow_trailing_zeros: bool = True) -> tuple[bool, str]:
    """Walk a baseline JPEG stream and Huffman-decode its single scan.

    Returns ``(ok, reason)``.  Trailing zero bytes after EOI are tolerated
    (block padding from the channel coder).
    """
    try:
        _walk(data, allow_trailing_zeros)
    except (JpegFormatError, IndexError, KeyError, ValueError) as exc:
        return False, str(exc)
    return True, ""


def _walk(data: bytes, allow_trailing_zeros: bool) -> None:
    if data[:2] != b"\xff\xd8":
        raise JpegFormatError("missing SOI")
    pos = 2
    dc_tables, ac_tables = {}, {}
    frame = None
    while True:
        if pos + 2 > len(data) or data[pos] != 0xFF:
            raise JpegFormatError(f"expected marker at byte {pos}")
        marker = data[pos + 1]
        if marker == 0xD9:
            raise JpegFormatError("EOI before scan")
        length = int.from_bytes(data[pos + 2 : pos + 4], "big")
        seg = data[pos + 4 : pos + 2 + length]
        if length < 2 or len(seg) != length - 2:
            raise JpegFormatError(f"truncated segment at byte {pos}")
        if marker == 0xC4:
            i = 0
            while i < len(seg):
                tc, th = seg[i] >> 4, seg[i] & 15
                counts = seg[i + 1 : i + 17]
                total = sum(counts)
                syms = seg[i + 17 : i + 17 + total]
                if len(counts) != 16 or len(syms) != total or tc > 1:
                    raise JpegFormatError("bad DHT segment")
                (dc_tables if tc == 0 else ac_tables)[th] = _huffman_table(counts, syms)
                i += 17 + total
        elif marker == 0xC0:
            if seg[0] != 8:
                raise JpegFormatError("only 8-bit baseline supported")
            h = int.from_bytes(seg[1:3], "big")
            w = int.from_bytes(seg[3:5], "big")
            nc = seg[5]
            comps = {}
            for c in range(nc):
                cid, hv = seg[6 + 3 * c], seg[7 + 3 * c]
                comps[cid] = (hv >> 4, hv & 15)
            if h == 0 or w == 0 or len(seg) != 6 + 3 * nc:
                raise JpegFormatError("bad SOF0 segment")
            frame = (h, w, comps)
        elif 0xC1 <= marker <= 0xCF and marker not in (0xC4, 0xC8, 0xCC):
            raise JpegFormatError(f"unsupported SOF marker 0x{marker:02X}")
        elif marker == 0xDD:
            raise JpegFormatError("restart intervals not supported")
        elif marker == 0xDA:
            if frame is None:
                raise JpegFormatError("SOS before SOF")
            ns = seg[0]
            sel = [(seg[1 + 2 * i], seg[2 + 2 * i] >> 4, seg[2 + 2 * i] & 15) for i in range(ns)]
            ss, se, a = seg[1 + 2 * ns], seg[2 + 2 * ns], seg[3 + 2 * ns]
            if (ss, se, a) != (0, 63, 0) or len(seg) != 4 + 2 * ns:
                raise JpegFormatError("not a baseline sequential scan")
            _scan(data, pos + 2 + length, frame, sel, dc_tables, ac_tables, allow_trailing_zeros)
            return
        pos += 2 + length


def _scan(data, start, frame, sel, dc_tables, ac_tables, allow_trailing_zeros):
    h, w, comps = frame
    hmax = max(v[0] for v in comps.values())
    vmax = max(v[1] for v in comps.values())
    if len(sel) == 1:
        hs, vs = comps[sel[0][0]]
        bw = math.ceil(math.ceil(w * hs / hmax) / 8)
        bh = math.ceil(math.ceil(h * vs / vmax) / 8)
        units = [[(sel[0], 1)]] * (bw * bh)
    else:
        n_mcu = math.ceil(w / (8 * hmax)) * math.ceil(h / (8 * vmax))
        mcu = [(s, comps[s[0]][0] * comps[s[0]][1]) for s in sel]
        units = [mcu] * n_mcu
    body, marker_pos = _unstuff(data, start)
    bits = _Bits(body)
    for mcu in units:
        for (cid, td, ta), nblocks in mcu:
            dct, act = dc_tables[td], ac_tables[ta]
            for _ in range(nblocks):
                s = bits.decode(dct)
                if s > 11:
                    raise JpegFormatError("DC magnitude category out of range")
                bits.read(s)
                k = 1
                while k < 64:
                    rs = bits.decode(act)
                    r, s = rs >> 4, rs & 15
                    if s == 0:
                        if r == 15:
                            k += 16
                            continue
                        if r == 0:
                            break
                        raise JpegFormatError("invalid AC run/size symbol")
                    k += r
                    if k > 63 or s > 10:
                        raise JpegFormatError("AC coefficient index out of range")
                    bits.read(s)
                    k += 1
                if k > 64:
                    raise JpegFormatError("AC run past end of block")
    rest = bits.bits[bits.pos :]
    if len(rest) >= 8 or set(rest) - {"1"}:
        raise JpegFormatError("unexpected data after last MCU")
    if data[marker_pos : marker_pos + 2] != b"\xff\xd9":
        raise JpegFormatError(f"expected EOI at byte {marker_pos}")
    tail = data[marker_pos + 2 :]
    if tail and not (allow_trailing_zeros and not any(tail)):
        raise JpegFormatError("data after EOI")


def jpeg_decode(data: bytes) -> JpegDecodeResult:
    """Decode a stream; corrupted or non-conforming data yields ``ok=False`` instead of raising."""
    ok, reason = validate_jpeg(data)
    if not ok:
        return JpegDecodeResult(None, False, reason)
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"))
    except Exception as exc:  # libjpeg can still reject a stream that parsed
        return JpegDecodeResult(None, False, f"decoder error: {exc}")
    return JpegDecodeResult(arr, True)
