"""Image-directory ingestion, split manifests and a synthetic desk dataset."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..core import rng_derive

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff", ".webp"}
MANIFEST_FORMAT = "akb-manifest/1"


@dataclass
class ManifestEntry:
    image_id: str
    path: str
    split: str


@dataclass
class SplitManifest:
    root: str
    crop: int
    seed: int
    entries: list[ManifestEntry]
    skipped: list[dict] = field(default_factory=list)

    def ids(self, split: str) -> list[str]:
        return [e.image_id for e in self.entries if e.split == split]

    def paths(self, split: str) -> list[Path]:
        return [Path(self.root) / e.path for e in self.entries if e.split == split]

    def to_json(self) -> str:
        d = {"format": MANIFEST_FORMAT, **asdict(self)}
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        d = json.loads(Path(path).read_text())
        if d.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path}: not a split manifest")
        entries = [ManifestEntry(**e) for e in d["entries"]]
        return cls(d["root"], int(d["crop"]), int(d["seed"]), entries, d.get("skipped", []))


def center_crop_resize(im: Image.Image, crop: int) -> np.ndarray:
    """Largest centred square, resized to ``crop x crop`` RGB."""
    im = im.convert("RGB")
    w, h = im.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    im = im.crop((left, top, left + s, top + s))
    if s != crop:
        im = im.resize((crop, crop), Image.Resampling.BICUBIC)
    return np.asarray(im, dtype=np.uint8)


def _split_counts(n: int, fractions=None, counts=None) -> tuple[int, int]:
    if counts is not None:
        n_train, n_test = int(counts[0]), int(counts[1])
        if n_train < 0 or n_test < 0 or n_train + n_test > n:
            raise ValueError(f"split counts {counts} exceed the {n} usable images")
        return n_train, n_test
    fr = (0.8, 0.2) if fractions is None else tuple(float(f) for f in fractions)
    if len(fr) != 2 or min(fr) < 0 or sum(fr) > 1 + 1e-9:
        raise ValueError(f"bad split fractions {fr}")
    n_train = int(round(fr[0] * n))
    n_test = min(n - n_train, int(round(fr[1] * n)))
    return n_train, n_test


def ingest(dataset_dir, crop: int = 64, seed: int = 0, fractions=None, counts=None, manifest_path=None) -> SplitManifest:
    """Scan a directory, keep decodable images and assign a seeded train/test split.

    Files are sorted by id, then shuffled with a stream derived from ``seed``.
    ``counts=(n_train, n_test)`` overrides ``fractions``.
    """
    root = Path(dataset_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    good, skipped = [], []
    for p in files:
        rel = p.relative_to(root).as_posix()
        try:
            with Image.open(p) as im:
                im.verify()
            good.append(rel)
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            logger.warning("skipping undecodable image %s: %s", rel, exc)
            skipped.append({"path": rel, "reason": str(exc)})
    if len(good) < 2:
        raise ValueError(f"need at least 2 decodable images in {root}, found {len(good)}")
    ids = [os.path.splitext(r)[0] for r in good]
    order = np.argsort(ids, kind="stable")
    perm = rng_derive(seed, (0x5B117,)).generator.permutation(len(order))
    n_train, n_test = _split_counts(len(good), fractions, counts)
    entries = []
    for rank, j in enumerate(order[perm]):
        split = "train" if rank < n_train else "test" if rank < n_train + n_test else "unused"
        entries.append(ManifestEntry(ids[j], good[j], split))
    manifest = SplitManifest(str(root.resolve()), int(crop), int(seed), entries, skipped)
    if manifest_path is not None:
        manifest.save(manifest_path)
    return manifest


def load_images(manifest: SplitManifest, split: str, limit: int | None = None) -> np.ndarray:
    """``(N, crop, crop, 3)`` uint8 array for one split, in manifest order."""
    paths = manifest.paths(split)[:limit]
    if not paths:
        raise ValueError(f"split {split!r} is empty")
    out = np.empty((len(paths), manifest.crop, manifest.crop, 3), dtype=np.uint8)
    for i, p in enumerate(paths):
        with Image.open(p) as im:
            out[i] = center_crop_resize(im, manifest.crop)
    return out


# -- synthetic desk dataset ---------------------------------------------------

SOURCE_IMAGES = (
    "astronaut", "coffee", "chelsea", "rocket", "hubble_deep_field",
    "retina", "immunohistochemistry", "colorwheel", "cat", "motorcycle_left", "motorcycle_right",
)


def _source_images() -> list[np.ndarray]:
    from skimage import data

    out = []
    for name in SOURCE_IMAGES:
        fn = getattr(data, name, None)
        if fn is None:
            continue
        try:
            img = np.asarray(fn())
        except Exception as exc:  # some datasets are optional downloads
            logger.debug("source image %s unavailable: %s", name, exc)
            continue
        if img.ndim == 3 and img.shape[2] >= 3:
            out.append(img[..., :3].astype(np.uint8))
    if not out:
        raise RuntimeError("no bundled colour images available")
    return out


def synth_dataset(out_dir, n_images: int = 2200, crop: int = 64, seed: int = 0) -> list[Path]:
    """Write ``n_images`` random crops of bundled photographs as PNG files.

    Each crop picks a source image, a scale in [crop, min(H, W)] for the
    square window, a random position and an optional horizontal flip.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = _source_images()
    rng = rng_derive(seed, (0xDA7A,)).generator
    written = []
    for i in range(n_images):
        src = sources[rng.integers(len(sources))]
        h, w = src.shape[:2]
        size = int(rng.integers(crop, min(h, w) // 2 + 1)) if min(h, w) // 2 > crop else crop
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        patch = Image.fromarray(src[y : y + size, x : x + size])
        if size != crop:
            patch = patch.resize((crop, crop), Image.Resampling.BICUBIC)
        if rng.random() < 0.5:
            patch = patch.transpose(Image.Transpose.FLIP_LEFT_RIGHT)
        p = out / f"img_{i:05d}.png"
        patch.save(p, optimize=False)
        written.append(p)
    return written
