"""Input checks shared by the estimator wrappers."""

import numpy as np
from sklearn.utils.validation import column_or_1d

from .errors import ShapeMismatch
from .heatmap import Annotation


def check_images(X, input_dims=None):
    """Coerce an image batch to float32 (N, H, W, 3) with values in [0, 1].

    uint8 input is scaled by 1/255 and grayscale (N, H, W) is replicated to
    three channels.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = np.repeat(X[..., None], 3, axis=-1)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeMismatch(f"expected images shaped (N, H, W, 3), got {X.shape}")
    if len(X) == 0:
        raise ValueError("empty image batch")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / np.float32(255.0)
    else:
        X = X.astype(np.float32, copy=False)
        if not np.all(np.isfinite(X)):
            raise ValueError("images contain NaN or Inf")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("float images must lie in [0, 1]")
    if input_dims is not None and tuple(X.shape[1:3]) != tuple(input_dims):
        raise ShapeMismatch(f"images are {X.shape[1:3]}, model expects {tuple(input_dims)}")
    return X


def check_targets(y, n):
    y = column_or_1d(np.asarray(y, dtype=np.float64), warn=True)
    if len(y) != n:
        raise ShapeMismatch(f"{n} images but {len(y)} targets")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain NaN or Inf")
    if np.any(y < 0):
        raise ValueError("calorie/mass targets must be non-negative")
    return y


def check_saliency(hsm, n, cam_dims):
    maps = np.stack([np.asarray(getattr(h, "values", h), dtype=np.float64) for h in hsm])
    if maps.shape != (n, *cam_dims):
        raise ShapeMismatch(f"saliency maps shaped {maps.shape}, expected {(n, *cam_dims)}")
    if not np.all(np.isfinite(maps)) or maps.min() < 0 or maps.max() > 1:
        raise ValueError("saliency maps must be finite and inside [0, 1]")
    return maps


def check_annotations(X):
    out = list(X)
    for a in out:
        if not isinstance(a, Annotation):
            raise TypeError(f"expected Annotation objects, got {type(a).__name__}")
    return out

