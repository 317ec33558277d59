"""Training losses and evaluation metrics.

Scalar entry points (``mse``, ``mae``, ``rmse``, ``categorical_crossentropy``,
``saliency_loss``) validate their inputs and return Python floats. The two
CYBORG combinations take already-reduced component losses:

* ``cyborg_weighted``: ``(1 - alpha) * L_m + alpha * L_c``
* ``cyborg_multiplied``: ``L_m * L_c``

where ``L_m`` is the saliency-map MSE and ``L_c`` the calorie MSE.

The weighted form is sometimes printed with a minus in front of the calorie
term. That would reward calorie error, so the sum is used here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    AlphaOutOfRange,
    DimMismatch,
    EmptyInput,
    IndexOutOfRange,
    LengthMismatch,
    NonFiniteInput,
    NonPositiveBaseline,
    NotASimplex,
)

PROB_FLOOR = 1e-12

LOSS_KINDS = ("mse", "cyborg_weighted", "cyborg_multiplied", "cross_entropy")


@dataclass(frozen=True)
class LossSpec:
    """Which total loss a trainer optimizes.

    ``alpha`` only matters for ``cyborg_weighted``.
    """

    kind: str = "mse"
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.kind == "cyborg_weighted":
            _check_alpha(self.alpha)

    @property
    def uses_saliency(self):
        return self.kind.startswith("cyborg")

    @classmethod
    def baseline(cls):
        return cls("mse")

    @classmethod
    def weighted(cls, alpha=0.5):
        return cls("cyborg_weighted", alpha)

    @classmethod
    def multiplied(cls):
        return cls("cyborg_multiplied")

    def to_dict(self):
        return {"kind": self.kind, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "mse"), float(d.get("alpha", 0.5)))


@dataclass(frozen=True)
class LossValue:
    total: float
    calorie: float
    saliency: float | None = None


def _check_alpha(alpha):
    if not (0.0 <= alpha <= 1.0):
        raise AlphaOutOfRange(f"alpha must lie in [0, 1], got {alpha}")


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise LengthMismatch(f"lengths differ: {p.size} vs {t.size}")
    if p.size == 0:
        raise EmptyInput("metrics need at least one sample")
    return p, t


def mse(pred, target):
    p, t = _pair(pred, target)
    return float(np.mean((p - t) ** 2))


def mae(pred, target):
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, target):
    return math.sqrt(mse(pred, target))


def categorical_crossentropy(probabilities, true_class):
    """Negative log-probability of ``true_class``, floored at ``PROB_FLOOR``."""
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    if p.size == 0:
        raise EmptyInput("empty probability vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-6:
        raise NotASimplex("probabilities must be non-negative and sum to 1")
    if not (0 <= int(true_class) < p.size) or int(true_class) != true_class:
        raise IndexOutOfRange(f"class index {true_class} outside [0, {p.size})")
    return float(-math.log(max(p[int(true_class)], PROB_FLOOR)))


def log_loss(probabilities, labels):
    """Mean cross-entropy over a batch of probability rows."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) != len(labels):
        raise LengthMismatch("need one probability row per label")
    if len(labels) == 0:
        raise EmptyInput("empty batch")
    picked = np.clip(probs[np.arange(len(labels)), labels], PROB_FLOOR, None)
    return float(-np.mean(np.log(picked)))


def saliency_loss(msm, hsm):
    """Mean squared difference between two saliency maps of equal shape."""
    m = np.asarray(getattr(msm, "values", msm), dtype=np.float64)
    h = np.asarray(getattr(hsm, "values", hsm), dtype=np.float64)
    if m.shape != h.shape:
        raise DimMismatch(f"saliency map shapes differ: {m.shape} vs {h.shape}")
    if m.size == 0:
        raise EmptyInput("empty saliency map")
    return float(np.mean((m - h) ** 2))


def _check_component(name, value):
    if not math.isfinite(value):
        raise NonFiniteInput(f"{name} is not finite")
    if value < 0:
        raise ValueError(f"{name} must be non-negative, got {value}")


def cyborg_weighted(l_m, l_c, alpha=0.5):
    _check_alpha(alpha)
    _check_component("L_m", l_m)
    _check_component("L_c", l_c)
    if alpha == 1.0:
        return float(l_c)
    if alpha == 0.0:
        return float(l_m)
    return (1.0 - alpha) * l_m + alpha * l_c


def cyborg_multiplied(l_m, l_c):
    # Zero whenever L_m is zero, however large the calorie error.
    _check_component("L_m", l_m)
    _check_component("L_c", l_c)
    return l_m * l_c


def combine(spec, l_m, l_c):
    """Total loss and its partials ``(d total/d L_m, d total/d L_c)``."""
    if spec.kind == "cyborg_weighted":
        return cyborg_weighted(l_m, l_c, spec.alpha), 1.0 - spec.alpha, spec.alpha
    if spec.kind == "cyborg_multiplied":
        return cyborg_multiplied(l_m, l_c), l_c, l_m
    return l_c, 0.0, 1.0


def relative_improvement(baseline_mae, mae_value):
    """Percent reduction of ``mae_value`` relative to ``baseline_mae``."""
    if not baseline_mae > 0:
        raise NonPositiveBaseline(f"baseline MAE must be positive, got {baseline_mae}")
    return 100.0 * (baseline_mae - mae_value) / baseline_mae


def pearson(a, b):
    """Pearson correlation of two equally shaped maps; 0 when either is constant."""
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    x = x - x.mean()
    y = y - y.mean()
    denom = math.sqrt(float(x @ x) * float(y @ y))
    if denom == 0.0:
        return 0.0
    return float(x @ y) / denom
