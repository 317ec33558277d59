"""A small convolutional regressor/classifier with CAM-style saliency.

Layout is NHWC throughout. The backbone is a stack of blocks::

    conv 3x3 (zero padding 1) -> ReLU -> 2x2 average pool

whose last output ``A`` (B, Hc, Wc, K) is kept as the final-conv feature map.
The head is a dense layer on the global average of ``A``. For a regression
head the model saliency map (MSM) of a sample is ``sum_k w_k * A[..., k]``,
min-max normalized; the head bias is left out because it is spatially
constant.

Regression heads carry a fixed output affine ``offset + scale * z`` so the
trainable layer works in standardized units while predictions are in kcal.
It is not trained and does not affect the MSM for ``scale > 0``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptCheckpoint,
    DimensionMismatch,
    HeadMismatch,
    NonFiniteLoss,
    ShapeMismatch,
    VersionMismatch,
)
from .heatmap import SaliencyMap, minmax_normalize
from .losses import LossSpec, LossValue, combine

CHECKPOINT_FORMAT = "salcal-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Head:
    kind: str  # "regression" | "classification"
    weights: np.ndarray  # (K, units)
    bias: np.ndarray  # (units,)
    offset: float = 0.0
    scale: float = 1.0
    classes: tuple = ()

    @property
    def units(self):
        return self.weights.shape[1]

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def calibrated(self):
        return not (self.offset == 0.0 and self.scale == 1.0)

    def copy(self):
        return Head(self.kind, self.weights.copy(), self.bias.copy(), self.offset, self.scale, tuple(self.classes))

    @classmethod
    def regression(cls, in_dim, seed=0, dtype=np.float32):
        return cls("regression", *_dense_init(in_dim, 1, np.random.default_rng(seed), dtype))

    @classmethod
    def classification(cls, in_dim, n_classes, seed=0, dtype=np.float32, classes=()):
        if n_classes < 2:
            raise ValueError("a classification head needs at least two classes")
        w, b = _dense_init(in_dim, n_classes, np.random.default_rng(seed), dtype)
        return cls("classification", w, b, classes=tuple(classes))


def _dense_init(fan_in, fan_out, rng, dtype):
    limit = np.sqrt(3.0 / fan_in)
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
    return w, np.zeros(fan_out, dtype=dtype)


@dataclass
class ModelGraph:
    input_dims: tuple
    channels: tuple
    conv: list  # [(weight (3, 3, Cin, Cout), bias (Cout,)), ...]
    head: Head
    metadata: dict = field(default_factory=dict)

    @property
    def cam_dims(self):
        f = 2 ** len(self.channels)
        return (self.input_dims[0] // f, self.input_dims[1] // f)

    @property
    def n_features(self):
        return self.channels[-1]

    @property
    def dtype(self):
        return self.conv[0][0].dtype

    def parameters(self):
        """Trainable arrays by name, in a fixed order."""
        out = {}
        for i, (w, b) in enumerate(self.conv):
            out[f"conv{i}.weight"] = w
            out[f"conv{i}.bias"] = b
        out["head.weight"] = self.head.weights
        out["head.bias"] = self.head.bias
        return out

    def backbone_parameters(self):
        return {k: v for k, v in self.parameters().items() if not k.startswith("head.")}

    def n_parameters(self):
        return sum(a.size for a in self.parameters().values())

    def copy(self):
        return ModelGraph(
            tuple(self.input_dims),
            tuple(self.channels),
            [(w.copy(), b.copy()) for w, b in self.conv],
            self.head.copy(),
            json.loads(json.dumps(self.metadata)),
        )

    def astype(self, dtype):
        m = self.copy()
        m.conv = [(w.astype(dtype), b.astype(dtype)) for w, b in m.conv]
        m.head.weights = m.head.weights.astype(dtype)
        m.head.bias = m.head.bias.astype(dtype)
        return m

    def backbone_checksum(self):
        h = hashlib.sha256()
        for name, arr in self.backbone_parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def tiny_cnn(input_dims=(64, 64), channels=(8, 16, 32), head="regression", n_classes=None,
             seed=0, dtype=np.float32, classes=()):
    """Reference backbone with He-uniform conv init and zero biases."""
    h, w = (int(d) for d in input_dims)
    f = 2 ** len(channels)
    if h % f or w % f:
        raise ShapeMismatch(f"input dims {input_dims} must be divisible by {f}")
    rng = np.random.default_rng(seed)
    conv = []
    c_in = 3
    for c_out in channels:
        limit = np.sqrt(6.0 / (9 * c_in))
        conv.append(
            (rng.uniform(-limit, limit, size=(3, 3, c_in, c_out)).astype(dtype), np.zeros(c_out, dtype=dtype))
        )
        c_in = c_out
    head_seed = int(rng.integers(2**31))
    if head == "regression":
        hd = Head.regression(c_in, head_seed, dtype)
    else:
        hd = Head.classification(c_in, n_classes or len(classes), head_seed, dtype, classes)
    return ModelGraph((h, w), tuple(int(c) for c in channels), conv, hd)


# -- layers -----------------------------------------------------------------

def _im2col(x):
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([xp[:, i:i + H, j:j + W, :] for i in range(3) for j in range(3)], axis=-1)


def _conv_forward(x, w, b):
    B, H, W, C = x.shape
    cols = _im2col(x)
    out = cols.reshape(-1, 9 * C) @ w.reshape(9 * C, -1) + b
    return cols, out.reshape(B, H, W, -1)


def _conv_backward(cols, x_shape, w, dout, need_dx=True):
    B, H, W, C = x_shape
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = (cols.reshape(-1, 9 * C).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return dw, db, None
    dcols = (d2 @ w.reshape(9 * C, -1).T).reshape(B, H, W, 9, C)
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dout.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + H, j:j + W, :] += dcols[:, :, :, k, :]
            k += 1
    return dw, db, dxp[:, 1:-1, 1:-1, :]


def _pool(x):
    B, H, W, C = x.shape
    return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def _unpool(d):
    return np.repeat(np.repeat(d, 2, axis=1), 2, axis=2) * d.dtype.type(0.25)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ForwardResult:
    prediction: np.ndarray  # (B, units): kcal/grams or class probabilities
    feature_maps: np.ndarray  # (B, Hc, Wc, K)
    logits: np.ndarray  # (B, units) raw head output before any affine/softmax
    cache: list | None = field(default=None, repr=False)


def _check_batch(model, batch):
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (*model.input_dims, 3):
        raise ShapeMismatch(f"expected batch of shape (B, {model.input_dims[0]}, {model.input_dims[1]}, 3), got {x.shape}")
    return x.astype(model.dtype, copy=False)


def forward(model, batch, keep_cache=False):
    x = _check_batch(model, batch)
    cache = [] if keep_cache else None
    for w, b in model.conv:
        cols, z = _conv_forward(x, w, b)
        r = np.maximum(z, 0)
        if keep_cache:
            cache.append((cols, x.shape, z))
        x = _pool(r)
    pooled = x.mean(axis=(1, 2))
    logits = pooled @ model.head.weights + model.head.bias
    if model.head.kind == "regression":
        pred = model.head.offset + model.head.scale * logits.astype(np.float64)
    else:
        pred = softmax(logits.astype(np.float64))
    return ForwardResult(pred, x, logits, cache)


def predict(model, images, batch_size=64):
    """Forward in chunks; regression returns (N,), classification (N, n)."""
    out = [forward(model, images[i:i + batch_size]).prediction for i in range(0, len(images), batch_size)]
    pred = np.concatenate(out, axis=0)
    return pred[:, 0] if model.head.kind == "regression" else pred


def raw_saliency(feature_maps, weights):
    """Head-weighted sum of feature maps: (..., Hc, Wc, K) x (K,) -> (..., Hc, Wc)."""
    return np.asarray(feature_maps, dtype=np.float64) @ np.asarray(weights, dtype=np.float64)


def _check_regression_head(head, k):
    if head.kind != "regression" or head.units != 1:
        raise HeadMismatch("saliency maps need a single-unit regression head")
    if head.in_dim != k:
        raise HeadMismatch(f"head expects {head.in_dim} feature maps, got {k}")


def extract_msm(feature_maps, head):
    """Normalized MSM of one sample's (Hc, Wc, K) feature maps."""
    a = np.asarray(feature_maps)
    _check_regression_head(head, a.shape[-1])
    return minmax_normalize(raw_saliency(a, head.weights[:, 0]), provenance="model")


def batch_msm(feature_maps, head):
    """(B, Hc, Wc) normalized MSMs."""
    a = np.asarray(feature_maps)
    _check_regression_head(head, a.shape[-1])
    raw = raw_saliency(a, head.weights[:, 0])
    return _batch_minmax(raw)[0]


def _batch_minmax(raw):
    B = raw.shape[0]
    flat = raw.reshape(B, -1)
    lo_idx = flat.argmin(axis=1)
    hi_idx = flat.argmax(axis=1)
    lo = flat[np.arange(B), lo_idx]
    hi = flat[np.arange(B), hi_idx]
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    s = np.where(span[:, None] > 0, (flat - lo[:, None]) / safe[:, None], 0.0)
    return s.reshape(raw.shape), lo_idx, hi_idx, span


def _minmax_backward(ds, s, lo_idx, hi_idx, span):
    """Gradient of min-max normalization w.r.t. the raw map (zero for constant maps)."""
    B = ds.shape[0]
    g = ds.reshape(B, -1)
    sf = s.reshape(B, -1)
    safe = np.where(span > 0, span, 1.0)
    draw = g / safe[:, None]
    rows = np.arange(B)
    # S = (R - lo) / (hi - lo): dS/dlo = (S - 1) / span, dS/dhi = -S / span
    np.add.at(draw, (rows, lo_idx), (g * (sf - 1.0)).sum(axis=1) / safe)
    np.add.at(draw, (rows, hi_idx), -(g * sf).sum(axis=1) / safe)
    draw[span <= 0] = 0.0
    return draw.reshape(ds.shape)


def loss_and_gradients(model, batch, targets, loss_spec=None, hsms=None):
    """Total loss and exact gradients of every trainable array.

    ``targets`` are kcal/grams for regression heads and class indices for
    classification heads. ``hsms`` (B, Hc, Wc) are required by CYBORG losses;
    for the plain MSE loss they are only used to report ``L_m``.
    Returns ``(grads, LossValue, ForwardResult)``.
    """
    loss_spec = loss_spec or LossSpec()
    fr = forward(model, batch, keep_cache=True)
    B = fr.prediction.shape[0]
    head = model.head
    A = fr.feature_maps
    dt = model.dtype

    if head.kind == "regression":
        if loss_spec.kind == "cross_entropy":
            raise HeadMismatch("cross-entropy needs a classification head")
        y = np.asarray(targets, dtype=np.float64).reshape(B, 1)
        err = fr.prediction - y
        l_c = float(np.mean(err**2))
        dlogits = 2.0 * err / B * head.scale
    else:
        if loss_spec.kind != "cross_entropy":
            raise HeadMismatch(f"loss {loss_spec.kind!r} needs a regression head")
        labels = np.asarray(targets, dtype=np.int64)
        p = fr.prediction
        l_c = float(-np.mean(np.log(np.clip(p[np.arange(B), labels], 1e-300, None))))
        onehot = np.zeros_like(p)
        onehot[np.arange(B), labels] = 1.0
        dlogits = (p - onehot) / B

    l_m = None
    ds = None
    if hsms is not None and head.kind == "regression":
        h = np.asarray(hsms, dtype=np.float64)
        if h.shape != (B, *model.cam_dims):
            raise ShapeMismatch(f"HSM batch {h.shape} does not match (B, {model.cam_dims})")
        raw = raw_saliency(A, head.weights[:, 0])
        s, lo_idx, hi_idx, span = _batch_minmax(raw)
        l_m = float(np.mean((s - h) ** 2))
        ds = 2.0 * (s - h) / s.size
    if loss_spec.uses_saliency and l_m is None:
        raise ShapeMismatch(f"{loss_spec.kind} needs human saliency maps for the batch")

    total, c_m, c_c = combine(loss_spec, l_m if l_m is not None else 0.0, l_c)
    if not np.isfinite(total):
        raise NonFiniteLoss(f"total loss is {total}")

    grads = {}
    dlogits = (c_c * dlogits).astype(dt)
    pooled = A.mean(axis=(1, 2))
    d_head_w = pooled.T @ dlogits
    d_head_b = dlogits.sum(axis=0)
    dA = np.broadcast_to(
        (dlogits @ head.weights.T)[:, None, None, :] / (A.shape[1] * A.shape[2]), A.shape
    ).copy()

    if loss_spec.uses_saliency and c_m != 0.0:
        draw = c_m * _minmax_backward(ds, s, lo_idx, hi_idx, span)
        w = head.weights[:, 0].astype(np.float64)
        dA += (draw[..., None] * w).astype(dt)
        d_head_w[:, 0] += (np.tensordot(draw, A.astype(np.float64), axes=([0, 1, 2], [0, 1, 2]))).astype(dt)

    d = dA
    for i in range(len(model.conv) - 1, -1, -1):
        cols, x_shape, z = fr.cache[i]
        dz = _unpool(d) * (z > 0)
        dw, db, d = _conv_backward(cols, x_shape, model.conv[i][0], dz, need_dx=i > 0)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    grads["head.weight"] = d_head_w
    grads["head.bias"] = d_head_b
    ordered = {k: grads[k] for k in model.parameters()}
    fr.cache = None
    return ordered, LossValue(float(total), l_c, l_m), fr


def backward(model, batch, targets, loss_spec=None, hsms=None):
    """Gradients of the selected total loss, keyed like ``model.parameters()``."""
    return loss_and_gradients(model, batch, targets, loss_spec, hsms)[0]


def total_loss(model, batch, targets, loss_spec=None, hsms=None):
    """Loss only (same definition as :func:`loss_and_gradients`)."""
    return loss_and_gradients(model, batch, targets, loss_spec, hsms)[1]


# -- head surgery -----------------------------------------------------------

def swap_head(model, new_head):
    """Copy of ``model`` with ``new_head``; backbone arrays are copied verbatim."""
    if new_head.in_dim != model.n_features:
        raise DimensionMismatch(
            f"head takes {new_head.in_dim} inputs but the backbone emits {model.n_features} channels"
        )
    out = model.copy()
    out.head = new_head.copy()
    out.head.weights = out.head.weights.astype(model.dtype)
    out.head.bias = out.head.bias.astype(model.dtype)
    out.metadata = {}
    return out


# -- checkpoints ------------------------------------------------------------

def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def pack(header, arrays):
    """Serialize ``header`` + named float32 arrays into the checkpoint layout.

    Layout: little-endian uint64 header length, UTF-8 JSON header, then the
    little-endian float32 blob of all arrays in header order.
    """
    tensors, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size * 4
    blob = b"".join(chunks)
    header = dict(header)
    header.update(
        format=CHECKPOINT_FORMAT,
        format_version=CHECKPOINT_VERSION,
        tensors=tensors,
        blob_bytes=len(blob),
        blob_sha256=hashlib.sha256(blob).hexdigest(),
    )
    hb = _dumps(header).encode("utf-8")
    return struct.pack("<Q", len(hb)) + hb + blob


def unpack(data):
    """Inverse of :func:`pack`: ``(header, {name: float32 array})``."""
    if len(data) < 8:
        raise CorruptCheckpoint("file too short for a checkpoint header")
    (n,) = struct.unpack("<Q", data[:8])
    if n > len(data) - 8:
        raise CorruptCheckpoint("header length exceeds file size")
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpoint(f"unreadable checkpoint header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint("not a salcal checkpoint")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"checkpoint format version {header.get('format_version')} != supported {CHECKPOINT_VERSION}"
        )
    blob = data[8 + n:]
    if len(blob) != header.get("blob_bytes") or hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise CorruptCheckpoint("checkpoint blob is truncated or damaged")
    arrays = {}
    for t in header["tensors"]:
        start = t["offset"]
        a = np.frombuffer(blob, dtype="<f4", count=t["count"], offset=start)
        arrays[t["name"]] = a.astype(np.float32).reshape(t["shape"])
    return header, arrays


def model_header(model, kind="model"):
    head = model.head
    return {
        "kind": kind,
        "architecture": {
            "backbone": "tinycnn",
            "input_dims": list(model.input_dims),
            "channels": list(model.channels),
            "head": {
                "kind": head.kind,
                "units": head.units,
                "offset": float(head.offset),
                "scale": float(head.scale),
                "classes": list(head.classes),
            },
        },
        "metadata": model.metadata,
    }


def checkpoint_bytes(model):
    return pack(model_header(model), model.parameters())


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def model_from_parts(header, arrays):
    try:
        arch = header["architecture"]
        channels = tuple(arch["channels"])
        conv = [(arrays[f"conv{i}.weight"], arrays[f"conv{i}.bias"]) for i in range(len(channels))]
        hd = arch["head"]
        head = Head(hd["kind"], arrays["head.weight"], arrays["head.bias"], float(hd["offset"]),
                    float(hd["scale"]), tuple(hd.get("classes", ())))
        model = ModelGraph(tuple(arch["input_dims"]), channels, conv, head, dict(header.get("metadata", {})))
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"checkpoint is missing {exc}") from exc
    c_in = 3
    for (w, b), c_out in zip(conv, channels):
        if w.shape != (3, 3, c_in, c_out) or b.shape != (c_out,):
            raise CorruptCheckpoint("tensor shapes disagree with the architecture")
        c_in = c_out
    if head.weights.shape != (c_in, hd["units"]):
        raise CorruptCheckpoint("head shape disagrees with the architecture")
    return model


def load_checkpoint_bytes(data):
    header, arrays = unpack(data)
    if header.get("kind") != "model":
        raise CorruptCheckpoint(f"expected a model checkpoint, found {header.get('kind')!r}")
    return model_from_parts(header, arrays)


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise CorruptCheckpoint(f"checkpoint not found: {path}") from None
    return load_checkpoint_bytes(data)
