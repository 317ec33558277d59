"""Two-or-more model ensembles with a small dense combiner.

Member predictions are concatenated and fed through
``dense(M -> 100) -> ReLU -> dense(100 -> 1)``. Members are frozen; only
the combiner is trained. The combiner works on standardized inputs and
outputs (fixed affines fitted at training start), in float64.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptCheckpoint,
    DivergedLoss,
    EmptyDataset,
    InvalidConfig,
    NonRegressionMember,
    ShapeMismatch,
    TooFewMembers,
)
from .nn import checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, pack, predict, unpack
from .train import SGD, Adam, EpochRecord, MetricsReport, TrainHistory, check_task
from .losses import mae, rmse

HIDDEN_UNITS = 100


@dataclass
class Combiner:
    w1: np.ndarray  # (M, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, 1)
    b2: np.ndarray  # (1,)
    in_offset: np.ndarray = None  # (M,)
    in_scale: np.ndarray = None  # (M,)
    out_offset: float = 0.0
    out_scale: float = 1.0

    def __post_init__(self):
        m = self.w1.shape[0]
        if self.in_offset is None:
            self.in_offset = np.zeros(m)
        if self.in_scale is None:
            self.in_scale = np.ones(m)

    def parameters(self):
        return {"combiner.w1": self.w1, "combiner.b1": self.b1, "combiner.w2": self.w2, "combiner.b2": self.b2}

    def copy(self):
        return Combiner(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.in_offset.copy(),
                        self.in_scale.copy(), self.out_offset, self.out_scale)

    def __call__(self, member_outputs):
        return self._forward(np.asarray(member_outputs, dtype=np.float64))[0]

    def _forward(self, x):
        z = (x - self.in_offset) / self.in_scale
        pre = z @ self.w1 + self.b1
        h = np.maximum(pre, 0.0)
        out = self.out_offset + self.out_scale * (h @ self.w2 + self.b2)
        return out[:, 0], (z, pre, h)


def random_combiner(n_inputs, seed=0, hidden=HIDDEN_UNITS):
    rng = np.random.default_rng(seed)
    l1 = math.sqrt(6.0 / n_inputs)
    l2 = math.sqrt(3.0 / hidden)
    return Combiner(
        rng.uniform(-l1, l1, (n_inputs, hidden)),
        np.zeros(hidden),
        rng.uniform(-l2, l2, (hidden, 1)),
        np.zeros(1),
    )


def identity_combiner(n_inputs, member=0, hidden=HIDDEN_UNITS):
    """Combiner wired to pass member ``member`` through unchanged.

    Uses two hidden units ``relu(x)`` and ``relu(-x)`` so negative inputs
    survive the ReLU.
    """
    w1 = np.zeros((n_inputs, hidden))
    w2 = np.zeros((hidden, 1))
    w1[member, 0], w1[member, 1] = 1.0, -1.0
    w2[0, 0], w2[1, 0] = 1.0, -1.0
    return Combiner(w1, np.zeros(hidden), w2, np.zeros(1))


@dataclass
class EnsembleModel:
    members: list
    combiner: Combiner
    frozen: bool = True
    metadata: dict = field(default_factory=dict)

    @property
    def input_dims(self):
        return self.members[0].input_dims

    def member_outputs(self, images):
        return np.stack([predict(m, images) for m in self.members], axis=1)


def build_ensemble(members, seed=0, init="random", identity_member=0):
    """Ensemble of loaded models (or checkpoint paths), members frozen."""
    members = [load_checkpoint(m) if isinstance(m, (str, os.PathLike)) else m for m in members]
    if len(members) < 2:
        raise TooFewMembers(f"an ensemble needs at least 2 members, got {len(members)}")
    for i, m in enumerate(members):
        if m.head.kind != "regression" or m.head.units != 1:
            raise NonRegressionMember(f"member {i} does not have a single-unit regression head")
        if m.input_dims != members[0].input_dims:
            raise ShapeMismatch("all members must take the same input size")
    if init == "identity":
        comb = identity_combiner(len(members), identity_member)
    elif init == "random":
        comb = random_combiner(len(members), seed)
    else:
        raise InvalidConfig(f"unknown combiner init {init!r}")
    return EnsembleModel(list(members), comb, metadata={"init": init})


def ensemble_predict(ensemble, batch):
    x = np.asarray(batch)
    if x.ndim != 4 or x.shape[1:3] != tuple(ensemble.input_dims):
        raise ShapeMismatch(f"batch shape {x.shape} does not fit members expecting {ensemble.input_dims}")
    return ensemble.combiner(ensemble.member_outputs(x))


def _combiner_grads(comb, x, y):
    out, (z, pre, h) = comb._forward(x)
    B = len(y)
    err = out - y
    loss = float(np.mean(err**2))
    dout = (2.0 * err / B * comb.out_scale)[:, None]
    grads = {
        "combiner.w2": h.T @ dout,
        "combiner.b2": dout.sum(axis=0),
    }
    dpre = (dout @ comb.w2.T) * (pre > 0)
    grads["combiner.w1"] = z.T @ dpre
    grads["combiner.b1"] = dpre.sum(axis=0)
    return loss, grads


def calibrate_combiner(comb, member_outputs, targets):
    x = np.asarray(member_outputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    comb.in_offset = x.mean(axis=0)
    s = x.std(axis=0)
    comb.in_scale = np.where(s > 0, s, 1.0)
    comb.out_offset = float(y.mean())
    comb.out_scale = float(y.std()) or 1.0


def member_digests(ensemble):
    return [hashlib.sha256(checkpoint_bytes(m)).hexdigest() for m in ensemble.members]


def train_combiner(ensemble, config, train_set, val_set, calibrate=None):
    """Fit the combiner by mini-batch MSE; members are never touched.

    Returns ``(best_ensemble, history)``. By default the combiner's
    input/output affines are fitted only for random inits, so an identity
    wired combiner starts as an exact copy of its member.
    """
    if config.task != "calories" or config.loss.kind != "mse":
        raise InvalidConfig("ensembles are trained on calories with the plain MSE loss")
    if not ensemble.frozen:
        raise InvalidConfig("end-to-end ensemble training is not supported")
    for ds, name in ((train_set, "train"), (val_set, "validation")):
        if ds is None or len(ds) == 0:
            raise EmptyDataset(f"{name} set is empty")
        for m in ensemble.members:
            check_task(m, ds)
    x_train = ensemble.member_outputs(train_set.images)
    x_val = ensemble.member_outputs(val_set.images)
    y_train = np.asarray(train_set.targets, dtype=np.float64)
    y_val = np.asarray(val_set.targets, dtype=np.float64)
    comb = ensemble.combiner.copy()
    if calibrate is None:
        calibrate = ensemble.metadata.get("init") == "random"
    if calibrate:
        calibrate_combiner(comb, x_train, y_train)
    params = comb.parameters()
    opt_cls = Adam if config.optimizer == "adam" else SGD
    opt = opt_cls(params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    metric = config.metric
    history = TrainHistory(metric=metric)
    best_value, best = math.inf, None
    n = len(y_train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = _combiner_grads(comb, x_train[idx], y_train[idx])
            if not math.isfinite(loss):
                raise DivergedLoss(f"epoch {epoch}: combiner loss is {loss}")
            opt.step(params, grads)
            total += loss * len(idx)
        val_pred = comb(x_val)
        value = mae(val_pred, y_val) if metric == "val_mae" else rmse(val_pred, y_val)
        history.records.append(EpochRecord(epoch, total / n, None, total / n, value))
        if value < best_value:
            best_value, best = value, comb.copy()
            history.best_epoch = epoch
    out = EnsembleModel(ensemble.members, best, True, {
        "task": "calories",
        "epoch": history.best_epoch,
        "validation_metric": best_value,
        "select_metric": metric,
    })
    return out, history


def evaluate_ensemble(ensemble, dataset):
    if len(dataset) == 0:
        raise EmptyDataset("dataset has no samples")
    pred = ensemble_predict(ensemble, dataset.images)
    return MetricsReport(mae(pred, dataset.targets), rmse(pred, dataset.targets), len(dataset))


# -- persistence ------------------------------------------------------------

def save_ensemble(ensemble, path):
    """Write the combiner container plus ``<stem>.memberN.ckpt`` files beside it."""
    stem = os.path.splitext(path)[0]
    listing = []
    for i, m in enumerate(ensemble.members):
        data = checkpoint_bytes(m)
        name = f"{os.path.basename(stem)}.member{i}.ckpt"
        with open(os.path.join(os.path.dirname(path) or ".", name), "wb") as fh:
            fh.write(data)
        listing.append({"file": name, "sha256": hashlib.sha256(data).hexdigest()})
    c = ensemble.combiner
    header = {
        "kind": "ensemble",
        "members": listing,
        "combiner": {
            "hidden": int(c.w1.shape[1]),
            "in_offset": [float(v) for v in c.in_offset],
            "in_scale": [float(v) for v in c.in_scale],
            "out_offset": float(c.out_offset),
            "out_scale": float(c.out_scale),
        },
        "metadata": ensemble.metadata,
    }
    data = pack(header, c.parameters())
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_ensemble(path):
    with open(path, "rb") as fh:
        header, arrays = unpack(fh.read())
    if header.get("kind") != "ensemble":
        raise CorruptCheckpoint(f"{path} is not an ensemble checkpoint")
    members = []
    for entry in header["members"]:
        member_path = os.path.join(os.path.dirname(path) or ".", entry["file"])
        with open(member_path, "rb") as fh:
            data = fh.read()
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise CorruptCheckpoint(f"member {entry['file']} does not match its recorded digest")
        members.append(load_checkpoint_bytes(data))
    c = header["combiner"]
    comb = Combiner(
        arrays["combiner.w1"].astype(np.float64),
        arrays["combiner.b1"].astype(np.float64),
        arrays["combiner.w2"].astype(np.float64),
        arrays["combiner.b2"].astype(np.float64),
        np.array(c["in_offset"]),
        np.array(c["in_scale"]),
        c["out_offset"],
        c["out_scale"],
    )
    return EnsembleModel(members, comb, True, header.get("metadata", {}))
