"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError


def check_image(img, *, reduction: int | None = None) -> np.ndarray:
    """Validate a single RGB image and return it as a ``(H, W, 3)`` uint8 array.

    Float inputs are accepted if they are integral and inside ``[0, 255]``.
    When ``reduction`` is given, both spatial dimensions must be divisible by it.
    """
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"image must be non-empty, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0 or arr.max() > 255 or np.any(arr != np.round(arr)):
            raise ValueError("image values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    if reduction is not None:
        _check_divisible(arr.shape[0], arr.shape[1], reduction)
    return arr


def check_images(X, *, reduction: int | None = None) -> np.ndarray:
    """Validate a batch of equally-sized images, returning ``(N, H, W, 3)`` uint8."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = X[None]
    if isinstance(X, np.ndarray) and X.ndim == 4:
        if X.shape[0] < 1:
            raise ValueError("need at least one image")
        check_image(X[0], reduction=reduction)
        if X.dtype != np.uint8:
            X = np.stack([check_image(x) for x in X])
        return X
    imgs = [check_image(x, reduction=reduction) for x in X]
    if not imgs:
        raise ValueError("need at least one image")
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ValueError(f"images must share one shape, got {sorted(shapes)}")
    return np.stack(imgs)


def _check_divisible(h: int, w: int, r: int) -> None:
    if h % r or w % r:
        raise ValueError(f"image size {h}x{w} is not divisible by the reduction factor {r}")


def check_is_fitted(estimator, attributes: str | list[str]) -> None:
    """Raise ``NotFittedError`` unless every named attribute is set."""
    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(getattr(estimator, a, None) is not None for a in attributes):
        name = type(estimator).__name__
        raise NotFittedError(f"This {name} instance is not fitted yet; call 'fit' first.")
