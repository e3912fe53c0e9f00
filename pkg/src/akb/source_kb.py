"""Source knowledge base: caption -> text embedding -> exact nearest-neighbour lookup.

Captioning and embedding go through a small provider interface.  The
offline stub is deterministic and portable; the HTTP client talks to an
external captioning/embedding service.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import math
import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .validation import check_image, check_images, check_is_fitted

logger = logging.getLogger(__name__)

MAGIC = b"AKB1"
DEFAULT_PROMPT = "Describe the main content of this image in one sentence."


class ProviderError(RuntimeError):
    """A captioning/embedding request failed; ``retryable`` marks transient failures."""

    def __init__(self, msg: str, retryable: bool = True):
        super().__init__(msg)
        self.retryable = retryable


class KBFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


# -- providers ---------------------------------------------------------------


def _brightness(mean: float) -> str:
    if mean < 64:
        return "dark"
    if mean < 128:
        return "dim"
    if mean < 192:
        return "bright"
    return "very bright"


def _detail(img: np.ndarray) -> str:
    g = img.astype(np.float64).mean(axis=2)
    grad = (np.abs(np.diff(g, axis=0)).mean() if g.shape[0] > 1 else 0.0) + (
        np.abs(np.diff(g, axis=1)).mean() if g.shape[1] > 1 else 0.0
    )
    if grad < 8:
        return "low"
    if grad < 24:
        return "moderate"
    return "high"


def _dominant(img: np.ndarray) -> str:
    means = img.reshape(-1, 3).astype(np.float64).mean(axis=0)
    if means.max() - means.min() < 12:
        return "gray"
    return ("red", "green", "blue")[int(np.argmax(means))]


class StubProvider:
    """Deterministic offline captioner/embedder.

    Captions are a fixed template over coarse image statistics; embeddings
    are standard normals seeded by the sha256 of the text, scaled to unit norm.
    """

    name = "stub"

    def __init__(self, kb_dim: int = 512):
        self.kb_dim = kb_dim

    def caption(self, img, prompt: str = DEFAULT_PROMPT) -> str:
        img = check_image(img)
        mean = float(img.mean())
        return f"a {_brightness(mean)} scene, {_detail(img)} detail, {_dominant(img)} dominant"

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
        v = np.random.Generator(np.random.PCG64(seed)).standard_normal(self.kb_dim)
        return v / np.linalg.norm(v)


class HttpProvider:
    """Client for an external caption/embed service.

    ``POST {url}/caption`` with ``{"image": <base64 PNG>, "prompt": ...}`` returns
    ``{"text": ...}``; ``POST {url}/embed`` with ``{"text": ...}`` returns
    ``{"vector": [...]}``.  Non-200 responses and transport errors are retried
    with exponential backoff.
    """

    name = "http"

    def __init__(self, url: str, kb_dim: int = 512, timeout: float = 10.0, retries: int = 3, backoff: float = 0.5):
        self.url = url.rstrip("/")
        self.kb_dim = kb_dim
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _post(self, route: str, body: dict) -> dict:
        import httpx

        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = httpx.post(f"{self.url}/{route}", json=body, timeout=self.timeout)
            except httpx.HTTPError as exc:
                last = exc
                continue
            if resp.status_code == 200:
                return resp.json()
            last = ProviderError(f"{route}: HTTP {resp.status_code}")
        raise ProviderError(f"{route} failed after {self.retries + 1} attempts: {last}")

    def caption(self, img, prompt: str = DEFAULT_PROMPT) -> str:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(check_image(img)).save(buf, format="PNG")
        out = self._post("caption", {"image": base64.b64encode(buf.getvalue()).decode("ascii"), "prompt": prompt})
        text = out.get("text")
        if not isinstance(text, str) or not text:
            raise ProviderError("caption response has no text", retryable=False)
        return text

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        out = self._post("embed", {"text": text})
        v = np.asarray(out.get("vector", []), dtype=np.float64)
        if v.shape != (self.kb_dim,) or not np.all(np.isfinite(v)):
            raise ProviderError(f"embed response has bad vector shape {v.shape}", retryable=False)
        return v


class FallbackProvider:
    """Wraps a primary provider; on failure answers from the stub and sets ``fell_back``."""

    def __init__(self, primary, fallback: StubProvider):
        self.primary = primary
        self.fallback = fallback
        self.fell_back = False
        self.name = f"{primary.name}+fallback"

    def _call(self, method: str, *args):
        try:
            return getattr(self.primary, method)(*args)
        except ProviderError as exc:
            self.fell_back = True
            warnings.warn(f"{method} provider failed, using offline stub: {exc}", RuntimeWarning, stacklevel=3)
            return getattr(self.fallback, method)(*args)

    def caption(self, img, prompt: str = DEFAULT_PROMPT) -> str:
        return self._call("caption", img, prompt)

    def embed(self, text: str) -> np.ndarray:
        return self._call("embed", text)


def make_provider(kind: str = "stub", kb_dim: int = 512, url: str | None = None, fallback: str | None = "stub", **kw):
    if kind == "stub":
        return StubProvider(kb_dim)
    if kind == "http":
        if not url:
            raise ValueError("kb_provider_url is required for the http provider")
        client = HttpProvider(url, kb_dim, **kw)
        return FallbackProvider(client, StubProvider(kb_dim)) if fallback == "stub" else client
    raise ValueError(f"unknown provider {kind!r}")


def caption(img, prompt: str, provider) -> str:
    return provider.caption(img, prompt)


def embed(text: str, provider) -> np.ndarray:
    return provider.embed(text)


# -- store, search, persistence ----------------------------------------------


@dataclass
class KBStore:
    matrix: np.ndarray
    entry_ids: list | None = None
    provenance: str = ""

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float32)
        if m.ndim != 2:
            raise ValueError("KB matrix must be 2-D (N x d)")
        self.matrix = np.ascontiguousarray(m)
        if self.entry_ids is not None and len(self.entry_ids) != m.shape[0]:
            raise ValueError("entry_ids length must equal the number of rows")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, KBStore)
            and self.matrix.shape == other.matrix.shape
            and np.array_equal(self.matrix, other.matrix)
            and self.entry_ids == other.entry_ids
            and self.provenance == other.provenance
        )

    def metadata(self) -> dict:
        meta = {}
        if self.entry_ids is not None:
            meta["entry_ids"] = list(self.entry_ids)
        if self.provenance:
            meta["provenance"] = self.provenance
        return meta


@dataclass
class RetrievalResult:
    index: int
    vector: np.ndarray
    sq_distance: float


def kb_search(r, store: KBStore) -> RetrievalResult:
    """Exact linear scan for ``argmin_c ||r - c||^2``; ties go to the smallest index."""
    if store.n < 1:
        raise ValueError("cannot search an empty KB")
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (store.dim,):
        raise ValueError(f"query dimension {r.shape} does not match KB dimension {store.dim}")
    diff = store.matrix.astype(np.float64) - r
    d = np.einsum("ij,ij->i", diff, diff)
    i = int(np.argmin(d))
    return RetrievalResult(i, store.matrix[i].astype(np.float64), float(d[i]))


def kb_build(corpus, provider, prompt: str = DEFAULT_PROMPT, entry_ids=None, provenance: str = "") -> KBStore:
    imgs = check_images(corpus)
    rows = [provider.embed(provider.caption(img, prompt)) for img in imgs]
    ids = list(entry_ids) if entry_ids is not None else list(range(len(imgs)))
    return KBStore(np.stack(rows), ids, provenance or f"provider={provider.name}; prompt={prompt!r}")


def kb_to_bytes(store: KBStore) -> bytes:
    meta = json.dumps(store.metadata(), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<II", store.n, store.dim),
        store.matrix.astype("<f4").tobytes(order="C"),
        struct.pack("<I", len(meta)),
        meta,
    ]
    return b"".join(parts)


def kb_from_bytes(data: bytes) -> KBStore:
    if len(data) < 4 or data[:4] != MAGIC:
        raise KBFormatError("bad magic, expected b'AKB1'", 0)
    if len(data) < 12:
        raise KBFormatError("truncated header", len(data))
    n, d = struct.unpack_from("<II", data, 4)
    off = 12
    end = off + 4 * n * d
    if len(data) < end:
        raise KBFormatError(f"truncated matrix: need {4 * n * d} bytes", len(data))
    matrix = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32)
    if len(data) < end + 4:
        raise KBFormatError("truncated metadata length", len(data))
    (mlen,) = struct.unpack_from("<I", data, end)
    off = end + 4
    if len(data) < off + mlen:
        raise KBFormatError(f"truncated metadata: need {mlen} bytes", len(data))
    if len(data) > off + mlen:
        raise KBFormatError("trailing bytes after metadata", off + mlen)
    try:
        meta = json.loads(data[off : off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise KBFormatError(f"invalid metadata JSON: {exc}", off) from None
    return KBStore(matrix, meta.get("entry_ids"), meta.get("provenance", ""))


def kb_save(store: KBStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(kb_to_bytes(store))


def kb_load(path) -> KBStore:
    with open(path, "rb") as fh:
        return kb_from_bytes(fh.read())


def index_bits(n: int) -> int:
    return math.ceil(math.log2(n)) if n > 1 else 0


def side_info(result: RetrievalResult, store: KBStore) -> tuple[np.ndarray, int]:
    """KB index as ``ceil(log2 N)`` bits (MSB first) and its cost at 2 bits/symbol."""
    nbits = index_bits(store.n)
    bits = np.array([(result.index >> (nbits - 1 - b)) & 1 for b in range(nbits)], dtype=np.uint8)
    return bits, math.ceil(nbits / 2)


def index_from_bits(bits) -> int:
    out = 0
    for b in np.asarray(bits, dtype=np.uint8):
        out = (out << 1) | int(b)
    return out


# -- estimator ---------------------------------------------------------------


@dataclass
class Retrieval:
    """Per-image retrieval outcome: conditioning vectors plus their side bits."""

    vectors: np.ndarray
    indices: np.ndarray
    bits: list = field(default_factory=list)
    captions: list = field(default_factory=list)


class SourceKB(BaseEstimator):
    """Builds a KB from a corpus (``fit``) and retrieves conditioning vectors (``transform``)."""

    def __init__(self, kb_dim=512, provider="stub", provider_url=None, fallback="stub", prompt=DEFAULT_PROMPT):
        self.kb_dim = kb_dim
        self.provider = provider
        self.provider_url = provider_url
        self.fallback = fallback
        self.prompt = prompt

    def _provider(self):
        if not hasattr(self, "provider_") or self.provider_ is None:
            self.provider_ = make_provider(self.provider, self.kb_dim, self.provider_url, self.fallback)
        return self.provider_

    def fit(self, X, y=None, entry_ids=None):
        self.store_ = kb_build(X, self._provider(), self.prompt, entry_ids)
        return self

    @classmethod
    def from_store(cls, store: KBStore, **params) -> "SourceKB":
        est = cls(kb_dim=store.dim, **params)
        est.store_ = store
        return est

    def retrieve(self, X) -> Retrieval:
        check_is_fitted(self, "store_")
        imgs = check_images(X)
        prov = self._provider()
        vecs, idx, bits, caps = [], [], [], []
        cache: dict[str, tuple] = {}
        for img in imgs:
            text = prov.caption(img, self.prompt)
            if text not in cache:
                res = kb_search(prov.embed(text), self.store_)
                cache[text] = (res, side_info(res, self.store_)[0])
            res, b = cache[text]
            vecs.append(res.vector)
            idx.append(res.index)
            bits.append(b)
            caps.append(text)
        return Retrieval(np.stack(vecs), np.asarray(idx), bits, caps)

    def transform(self, X):
        return self.retrieve(X).vectors

    def lookup(self, bits) -> np.ndarray:
        """Receiver side: recover the conditioning vector from transmitted index bits."""
        check_is_fitted(self, "store_")
        i = index_from_bits(bits)
        if not 0 <= i < self.store_.n:
            raise ValueError(f"KB index {i} out of range")
        return self.store_.matrix[i].astype(np.float64)
