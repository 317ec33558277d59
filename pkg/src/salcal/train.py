"""Mini-batch training, best-epoch model selection and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TASKS
from .errors import (
    DivergedLoss,
    EmptyDataset,
    HeadSwapMismatch,
    InvalidConfig,
    MissingHsm,
    NonFiniteLoss,
    TaskMismatch,
)
from .losses import LossSpec, log_loss, mae, pearson, relative_improvement, rmse
from .nn import Head, batch_msm, forward, load_checkpoint, loss_and_gradients, predict, swap_head

log = logging.getLogger(__name__)

SELECT_METRICS = ("val_mae", "val_rmse", "val_logloss")
HISTORY_COLUMNS = ("epoch", "total_loss", "l_m", "l_c", "val_metric")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "calories"
    loss: LossSpec = field(default_factory=LossSpec)
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    init_checkpoint: str | None = None
    select_metric: str | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidConfig(f"task must be one of {TASKS}, got {self.task!r}")
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossSpec.from_dict(self.loss))
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidConfig(f"unknown optimizer {self.optimizer!r}")
        if self.loss.uses_saliency and self.task != "calories":
            raise InvalidConfig("CYBORG losses apply only to the calorie task")
        if (self.task == "classification") != (self.loss.kind == "cross_entropy"):
            raise InvalidConfig("classification trains with cross_entropy and only classification does")
        if self.select_metric is not None and self.select_metric not in SELECT_METRICS:
            raise InvalidConfig(f"select_metric must be one of {SELECT_METRICS}")
        if self.select_metric == "val_logloss" and self.task != "classification":
            raise InvalidConfig("val_logloss applies to classification only")

    @property
    def metric(self):
        if self.select_metric:
            return self.select_metric
        return "val_logloss" if self.task == "classification" else "val_mae"

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossSpec.from_dict(d["loss"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    total_loss: float
    l_m: float | None
    l_c: float
    val_metric: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    metric: str = "val_mae"

    def __len__(self):
        return len(self.records)

    @property
    def best(self):
        return self.records[self.best_epoch - 1]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.total_loss), "" if r.l_m is None else repr(r.l_m), repr(r.l_c),
                        repr(r.val_metric)])
        return buf.getvalue()


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    n_samples: int
    improvement_vs_baseline: float | None = None

    def with_baseline(self, baseline_mae):
        return replace(self, improvement_vs_baseline=relative_improvement(baseline_mae, self.mae))


@dataclass(frozen=True)
class ClassificationReport:
    log_loss: float
    accuracy: float
    n_samples: int


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params, lr=1e-3, **_):
        self.lr = lr

    def step(self, params, grads):
        for k, p in params.items():
            p -= (self.lr * grads[k]).astype(p.dtype)


def make_optimizer(config, params):
    cls = Adam if config.optimizer == "adam" else SGD
    return cls(params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps)


def check_task(model, dataset):
    if len(dataset) == 0:
        raise EmptyDataset("dataset has no samples")
    if dataset.task == "classification":
        if model.head.kind != "classification":
            raise TaskMismatch("classification data needs a classification head")
        if dataset.classes and model.head.units != len(dataset.classes):
            raise TaskMismatch(f"head has {model.head.units} classes, data has {len(dataset.classes)}")
    elif model.head.kind != "regression":
        raise TaskMismatch(f"{dataset.task} data needs a regression head")
    if model.input_dims != tuple(dataset.images.shape[1:3]):
        raise TaskMismatch(f"model expects {model.input_dims} images, data has {dataset.images.shape[1:3]}")


def evaluate(model, dataset):
    """MAE/RMSE of a regression model over ``dataset`` in order."""
    check_task(model, dataset)
    if dataset.task == "classification":
        raise TaskMismatch("use evaluate_classifier for classification data")
    pred = predict(model, dataset.images)
    return MetricsReport(mae(pred, dataset.targets), rmse(pred, dataset.targets), len(dataset))


def evaluate_classifier(model, dataset):
    check_task(model, dataset)
    probs = predict(model, dataset.images)
    acc = float(np.mean(probs.argmax(axis=1) == dataset.targets))
    return ClassificationReport(log_loss(probs, dataset.targets), acc, len(dataset))


def validation_metric(model, dataset, metric):
    if metric == "val_logloss":
        return evaluate_classifier(model, dataset).log_loss
    report = evaluate(model, dataset)
    return report.mae if metric == "val_mae" else report.rmse


def saliency_agreement(model, dataset, batch_size=64):
    """Per-sample (Pearson r, MSE) between model and human saliency maps."""
    if dataset.hsms is None or not dataset.has_hsm.all():
        raise MissingHsm(dataset.missing_hsm())
    corr, err = [], []
    for i in range(0, len(dataset), batch_size):
        fm = forward(model, dataset.images[i:i + batch_size]).feature_maps
        msm = batch_msm(fm, model.head)
        for m, h in zip(msm, dataset.hsms[i:i + batch_size]):
            corr.append(pearson(m, h))
            err.append(float(np.mean((m - h) ** 2)))
    return np.array(corr), np.array(err)


def calibrate_head(model, targets):
    """Set the fixed output affine of an uncalibrated regression head."""
    if model.head.kind != "regression" or model.head.calibrated:
        return
    y = np.asarray(targets, dtype=np.float64)
    std = float(y.std())
    model.head.offset = float(y.mean())
    model.head.scale = std if std > 0 else 1.0


def _prepare(config, train_set, model):
    if model is None:
        if not config.init_checkpoint:
            raise InvalidConfig("train needs a model or an init_checkpoint")
        model = load_checkpoint(config.init_checkpoint)
    model = model.copy()
    model.metadata = {}
    if train_set is None or len(train_set) == 0:
        raise EmptyDataset("training set is empty")
    if train_set.task != config.task:
        raise TaskMismatch(f"config task {config.task!r} but dataset task {train_set.task!r}")
    check_task(model, train_set)
    if config.loss.uses_saliency:
        missing = train_set.missing_hsm()
        if missing is not None:
            raise MissingHsm(missing)
        if train_set.hsms.shape[1:] != model.cam_dims:
            raise TaskMismatch(f"HSMs are {train_set.hsms.shape[1:]}, model CAMs are {model.cam_dims}")
    return model


def train(config, train_set, val_set, model=None):
    """Train and return ``(best_model, history)``.

    The returned model is a copy of the parameters at the epoch with the
    lowest validation metric (earliest on ties); its ``metadata`` records
    task, epoch and metric value.
    """
    model = _prepare(config, train_set, model)
    if val_set is None or len(val_set) == 0:
        raise EmptyDataset("validation set is empty")
    if config.task != "classification":
        calibrate_head(model, train_set.targets)
    params = model.parameters()
    opt = make_optimizer(config, params)
    rng = np.random.default_rng(config.seed)
    track_saliency = (
        model.head.kind == "regression"
        and train_set.hsms is not None
        and train_set.has_hsm.all()
        and train_set.hsms.shape[1:] == model.cam_dims
    )
    history = TrainHistory(metric=config.metric)
    best_value, best_model = math.inf, None
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            hsms = train_set.hsms[idx] if track_saliency else None
            try:
                grads, lv, _ = loss_and_gradients(model, train_set.images[idx], train_set.targets[idx],
                                                  config.loss, hsms)
            except NonFiniteLoss as exc:
                raise DivergedLoss(f"epoch {epoch}: {exc}") from exc
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergedLoss(f"epoch {epoch}: non-finite gradient")
            opt.step(params, grads)
            sums += len(idx) * np.array([lv.total, lv.saliency or 0.0, lv.calorie])
        sums /= n
        value = validation_metric(model, val_set, config.metric)
        if not math.isfinite(value):
            raise DivergedLoss(f"epoch {epoch}: validation metric is {value}")
        history.records.append(
            EpochRecord(epoch, float(sums[0]), float(sums[1]) if track_saliency else None, float(sums[2]), value)
        )
        log.debug("epoch %d loss %.6g val %s %.6g", epoch, sums[0], config.metric, value)
        if value < best_value:
            best_value, best_model = value, model.copy()
            history.best_epoch = epoch
    best_model.metadata = {
        "task": config.task,
        "epoch": history.best_epoch,
        "validation_metric": best_value,
        "select_metric": config.metric,
        "loss": config.loss.to_dict(),
    }
    return best_model, history


def pretrain_then_finetune(pre_config, fine_config, pre_train, pre_val, fine_train, fine_val, model=None):
    """Pretrain on classification/mass, swap in a regression head, train calories.

    Returns ``(best_calorie_model, (pre_history, fine_history), handoff)``
    where ``handoff`` is the backbone checksum shared by the best pretraining
    model and the fine-tuning start.
    """
    if pre_config.task not in ("classification", "mass"):
        raise InvalidConfig("pretraining task must be classification or mass")
    if fine_config.task != "calories":
        raise InvalidConfig("fine-tuning task must be calories")
    pre_model, pre_hist = train(pre_config, pre_train, pre_val, model)
    start = swap_head(pre_model, Head.regression(pre_model.n_features, seed=fine_config.seed, dtype=pre_model.dtype))
    handoff = pre_model.backbone_checksum()
    if start.backbone_checksum() != handoff:
        raise HeadSwapMismatch("backbone changed during the head swap")
    fine_model, fine_hist = train(fine_config, fine_train, fine_val, start)
    fine_model.metadata["pretrain"] = {"task": pre_config.task, "backbone_sha256": handoff}
    return fine_model, (pre_hist, fine_hist), handoff
