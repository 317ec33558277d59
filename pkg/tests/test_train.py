import numpy as np
import pytest

from salcal.data import Dataset, synthetic_dataset
from salcal.errors import DivergedLoss, EmptyDataset, InvalidConfig, MissingHsm, TaskMismatch
from salcal.losses import LossSpec
from salcal.nn import checkpoint_bytes, tiny_cnn
from salcal.train import (
    HISTORY_COLUMNS,
    TrainConfig,
    calibrate_head,
    evaluate,
    pretrain_then_finetune,
    saliency_agreement,
    train,
)

DIMS = (16, 16)
CH = (4, 8)


@pytest.fixture(scope="module")
def data():
    tr = synthetic_dataset(32, DIMS, 1, "cue", cam_dims=(4, 4))
    va = synthetic_dataset(12, DIMS, 2, "cue", cam_dims=(4, 4))
    return tr, va


def _model(seed=0, **kw):
    return tiny_cnn(DIMS, CH, seed=seed, **kw)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidConfig):
        TrainConfig(task="mass", loss=LossSpec.multiplied())
    with pytest.raises(InvalidConfig):
        TrainConfig(task="classification")
    with pytest.raises(InvalidConfig):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(InvalidConfig):
        TrainConfig(select_metric="val_logloss")
    with pytest.raises(InvalidConfig):
        TrainConfig.from_dict({"epochs": 2, "momentum": 0.9})
    cfg = TrainConfig(loss=LossSpec.weighted(0.3), epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.metric == "val_mae"


def test_history_and_best_epoch(data):
    tr, va = data
    best, hist = train(TrainConfig(loss=LossSpec.multiplied(), epochs=4), tr, va, _model())
    assert len(hist) == 4
    vals = [r.val_metric for r in hist.records]
    assert hist.best_epoch == int(np.argmin(vals)) + 1  # argmin is the earliest on ties
    assert best.metadata["epoch"] == hist.best_epoch
    assert evaluate(best, va).mae == pytest.approx(hist.best.val_metric)
    lines = hist.to_csv().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS) and len(lines) == 5
    assert all(r.l_m is not None for r in hist.records)


def test_mse_run_tracks_saliency_without_using_it(data):
    tr, va = data
    _, hist = train(TrainConfig(epochs=1), tr, va, _model())
    assert hist.records[0].l_m is not None
    assert hist.records[0].total_loss == pytest.approx(hist.records[0].l_c)


def test_training_is_deterministic(data):
    tr, va = data
    cfg = TrainConfig(loss=LossSpec.multiplied(), epochs=2, seed=5)
    a, ha = train(cfg, tr, va, _model())
    b, hb = train(cfg, tr, va, _model())
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert ha.to_csv() == hb.to_csv()


def test_training_reduces_loss(data):
    tr, va = data
    _, hist = train(TrainConfig(epochs=6, learning_rate=3e-3), tr, va, _model())
    assert hist.records[-1].l_c < hist.records[0].l_c


def test_input_model_untouched(data):
    tr, va = data
    m = _model()
    before = checkpoint_bytes(m)
    train(TrainConfig(epochs=1), tr, va, m)
    assert checkpoint_bytes(m) == before


def test_missing_hsm(data):
    tr, va = data
    bare = Dataset(tr.images, tr.targets, ids=[f"img{i}" for i in range(len(tr))])
    with pytest.raises(MissingHsm) as e:
        train(TrainConfig(loss=LossSpec.multiplied(), epochs=1), bare, va, _model())
    assert "img0" in str(e.value)
    partial = tr.subset(range(len(tr)))
    partial.has_hsm = partial.has_hsm.copy()
    partial.has_hsm[3] = False
    with pytest.raises(MissingHsm):
        train(TrainConfig(loss=LossSpec.weighted(), epochs=1), partial, va, _model())
    with pytest.raises(MissingHsm):
        saliency_agreement(_model(), bare)


def test_task_and_empty_checks(data):
    tr, va = data
    with pytest.raises(TaskMismatch):
        train(TrainConfig(epochs=1), tr, va, tiny_cnn(DIMS, CH, "classification", 5))
    with pytest.raises(EmptyDataset):
        train(TrainConfig(epochs=1), tr.subset([]), va, _model())
    with pytest.raises(EmptyDataset):
        train(TrainConfig(epochs=1), tr, va.subset([]), _model())
    with pytest.raises(InvalidConfig):
        train(TrainConfig(epochs=1), tr, va)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(data):
    tr, va = data
    with pytest.raises(DivergedLoss):
        train(TrainConfig(epochs=3, learning_rate=1e30, optimizer="sgd"), tr, va, _model())


def test_calibrate_head():
    m = _model()
    calibrate_head(m, [10.0, 30.0])
    assert (m.head.offset, m.head.scale) == (20.0, 10.0)
    calibrate_head(m, [1000.0, 1.0])  # already calibrated: left alone
    assert m.head.offset == 20.0


def test_pretrain_then_finetune(data):
    tr, va = data
    pre_tr = synthetic_dataset(30, DIMS, 3, "cue", task="classification")
    pre_va = synthetic_dataset(10, DIMS, 4, "cue", task="classification")
    start = tiny_cnn(DIMS, CH, "classification", 5)
    model, (ph, fh), handoff = pretrain_then_finetune(
        TrainConfig(task="classification", loss=LossSpec("cross_entropy"), epochs=2),
        TrainConfig(loss=LossSpec.multiplied(), epochs=2),
        pre_tr, pre_va, tr, va, start,
    )
    assert len(ph) == len(fh) == 2
    assert model.head.kind == "regression"
    assert model.metadata["pretrain"]["backbone_sha256"] == handoff
    with pytest.raises(InvalidConfig):
        pretrain_then_finetune(TrainConfig(epochs=1), TrainConfig(epochs=1), tr, va, tr, va, _model())


def test_mass_task():
    tr = synthetic_dataset(16, DIMS, 5, task="mass")
    va = synthetic_dataset(8, DIMS, 6, task="mass")
    best, hist = train(TrainConfig(task="mass", epochs=1), tr, va, _model())
    assert best.metadata["task"] == "mass"
    assert hist.records[0].l_m is None
