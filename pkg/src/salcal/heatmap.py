"""Human saliency maps from bounding-box annotations.

The pipeline is ``boxes_to_mask -> gaussian_blur -> downsample ->
minmax_normalize``; :func:`build_hsm` is exactly that composition.
Borders are handled by half-sample symmetric reflection (the edge pixel is
repeated), which keeps constant maps constant under blurring.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError

from .errors import (
    BoxOutOfBounds,
    CorruptImage,
    EvenKernel,
    HeatmapError,
    NonFiniteInput,
    NonPositiveSigma,
    UnwritablePath,
    UpsampleRequested,
)

# Odd stand-in for the 250x250 blur kernel used on ~500 px photographs.
PAPER_KERNEL_SIZE = 251
HSM_SUFFIX = ".hsm.png"


@dataclass(frozen=True)
class Box:
    x: int
    y: int
    w: int
    h: int

    def to_dict(self):
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class Annotation:
    """Boxes (pixel units, origin top-left) over an image of ``image_dims``."""

    image_dims: tuple
    boxes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "image_dims", tuple(int(d) for d in self.image_dims))
        object.__setattr__(
            self,
            "boxes",
            tuple(b if isinstance(b, Box) else Box(**{k: int(b[k]) for k in "xywh"}) for b in self.boxes),
        )


def default_kernel_size(image_dims):
    """Largest odd integer not above half the smaller image side (min 3)."""
    k = int(min(image_dims)) // 2
    if k % 2 == 0:
        k -= 1
    return max(k, 3)


@dataclass(frozen=True)
class HeatmapConfig:
    kernel_size: int | None = None
    sigma: float | None = None
    cam_dims: tuple = (7, 7)
    border_policy: str = "reflect"

    def resolve(self, image_dims):
        """Concrete ``(kernel_size, sigma)`` for an image of ``image_dims``."""
        k = self.kernel_size if self.kernel_size is not None else default_kernel_size(image_dims)
        sigma = self.sigma if self.sigma is not None else k / 6.0
        return int(k), float(sigma)

    def to_dict(self):
        return {
            "kernel_size": self.kernel_size,
            "sigma": self.sigma,
            "cam_dims": list(self.cam_dims),
            "border_policy": self.border_policy,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "cam_dims" in d:
            d["cam_dims"] = tuple(d["cam_dims"])
        return cls(**d)


@dataclass
class SaliencyMap:
    values: np.ndarray
    provenance: str = "human"

    @property
    def shape(self):
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def _clamped(box, dims):
    h, w = dims
    x0, y0 = max(box.x, 0), max(box.y, 0)
    x1, y1 = min(box.x + box.w, w), min(box.y + box.h, h)
    if x1 <= x0 or y1 <= y0:
        raise BoxOutOfBounds(f"box {box.to_dict()} has no area inside a {h}x{w} image")
    return x0, y0, x1, y1


def boxes_to_mask(annotation):
    """1.0 inside the union of boxes, 0.0 elsewhere."""
    if not annotation.boxes:
        raise BoxOutOfBounds("annotation has no boxes")
    mask = np.zeros(annotation.image_dims, dtype=np.float64)
    for box in annotation.boxes:
        if box.w <= 0 or box.h <= 0:
            raise BoxOutOfBounds(f"box {box.to_dict()} has non-positive size")
        x0, y0, x1, y1 = _clamped(box, annotation.image_dims)
        mask[y0:y1, x0:x1] = 1.0
    return mask


def gaussian_kernel_1d(kernel_size, sigma):
    if kernel_size % 2 == 0 or kernel_size < 3:
        raise EvenKernel(f"kernel size must be odd and >= 3, got {kernel_size}")
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_kernel_2d(kernel_size, sigma):
    g = gaussian_kernel_1d(kernel_size, sigma)
    return np.outer(g, g)


def _blur_axis(m, g, axis):
    r = len(g) // 2
    pad = [(0, 0)] * m.ndim
    pad[axis] = (r, r)
    padded = np.pad(m, pad, mode="symmetric")
    return sliding_window_view(padded, len(g), axis=axis) @ g


def gaussian_blur(m, config=None, *, kernel_size=None, sigma=None):
    """Separable Gaussian blur with a unit-sum kernel and reflected borders.

    Explicit ``kernel_size``/``sigma`` override whatever ``config`` resolves to.
    """
    m = np.asarray(m, dtype=np.float64)
    config = config or HeatmapConfig()
    if config.border_policy != "reflect":
        raise HeatmapError(f"unsupported border policy {config.border_policy!r}")
    if kernel_size is None:
        kernel_size = config.resolve(m.shape)[0]
    if sigma is None:
        sigma = config.sigma if config.sigma is not None else kernel_size / 6.0
    g = gaussian_kernel_1d(kernel_size, sigma)
    return _blur_axis(_blur_axis(m, g, 0), g, 1)


def area_weights(n_in, n_out):
    """(n_out, n_in) matrix averaging fractional source intervals."""
    scale = n_in / n_out
    edges = np.arange(n_out + 1) * scale
    lo = np.arange(n_in)
    overlap = np.clip(
        np.minimum(edges[1:, None], lo[None, :] + 1) - np.maximum(edges[:-1, None], lo[None, :]),
        0.0,
        None,
    )
    return overlap / scale


def downsample(m, target_dims):
    """Area-average resample to ``target_dims`` (never upsamples)."""
    m = np.asarray(m, dtype=np.float64)
    th, tw = (int(d) for d in target_dims)
    if th > m.shape[0] or tw > m.shape[1] or th < 1 or tw < 1:
        raise UpsampleRequested(f"cannot resample {m.shape} to {(th, tw)}")
    return area_weights(m.shape[0], th) @ m @ area_weights(m.shape[1], tw).T


def minmax_normalize(m, provenance="human"):
    """Affine rescale to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NonFiniteInput("saliency map contains NaN or Inf")
    lo, hi = m.min(), m.max()
    if hi == lo:
        return SaliencyMap(np.zeros_like(m), provenance)
    return SaliencyMap((m - lo) / (hi - lo), provenance)


def build_hsm(annotation, config=None):
    config = config or HeatmapConfig()
    mask = boxes_to_mask(annotation)
    blurred = gaussian_blur(mask, config)
    return minmax_normalize(downsample(blurred, config.cam_dims), "human")


def hsm_path_for(image_path, out_dir):
    stem = os.path.splitext(os.path.basename(image_path))[0]
    return os.path.join(out_dir, stem + HSM_SUFFIX)


def write_heatmap(smap, path):
    values = np.asarray(getattr(smap, "values", smap), dtype=np.float64)
    if not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1:
        raise NonFiniteInput("heatmap values must be finite and inside [0, 1]")
    pixels = np.floor(values * 255.0 + 0.5).astype(np.uint8)
    try:
        Image.fromarray(pixels).save(path, format="PNG")
    except OSError as exc:
        raise UnwritablePath(f"cannot write heatmap to {path}: {exc}") from exc


def read_heatmap(path, provenance="human"):
    try:
        with Image.open(path) as im:
            if im.format != "PNG" or im.mode != "L":
                raise CorruptImage(f"{path} is not an 8-bit grayscale PNG")
            pixels = np.asarray(im, dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImage(f"cannot decode heatmap {path}: {exc}") from exc
    return SaliencyMap(pixels / 255.0, provenance)
