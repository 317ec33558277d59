"""scikit-learn compatible wrappers around the training functions.

Images are passed as arrays shaped (N, H, W, 3) (float in [0, 1] or uint8).
Human saliency maps travel as a fit parameter (``hsm=``) rather than inside
``X`` so the estimators stay usable with ``clone`` and ``get_params``::

    hsm = HumanSaliencyTransformer(cam_dims=(8, 8)).transform(annotations)
    reg = SaliencyGuidedRegressor(loss="cyborg_multiplied").fit(X, y, hsm=hsm)
    reg.predict(X_test)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import ensemble as ens
from ._validation import check_annotations, check_images, check_saliency, check_targets
from .data import Dataset, SplitSpec, split_indices
from .heatmap import HeatmapConfig, build_hsm
from .losses import LossSpec
from .nn import batch_msm, forward, load_checkpoint, predict, tiny_cnn
from .train import TrainConfig, pretrain_then_finetune, saliency_agreement, train


class HumanSaliencyTransformer(TransformerMixin, BaseEstimator):
    """Compile bounding-box annotations into human saliency maps.

    Stateless; ``fit`` only validates. ``transform`` returns an array of
    shape (n_annotations, *cam_dims).
    """

    def __init__(self, kernel_size=None, sigma=None, cam_dims=(7, 7)):
        self.kernel_size = kernel_size
        self.sigma = sigma
        self.cam_dims = cam_dims

    def fit(self, X, y=None):
        check_annotations(X)
        self.config_ = HeatmapConfig(self.kernel_size, self.sigma, tuple(self.cam_dims))
        return self

    def transform(self, X):
        config = HeatmapConfig(self.kernel_size, self.sigma, tuple(self.cam_dims))
        return np.stack([build_hsm(a, config).values for a in check_annotations(X)])


def _split(n, validation_fraction, seed):
    if n < 2:
        raise ValueError("need at least two samples to carve out a validation set")
    train_idx, val_idx = split_indices(n, SplitSpec(1.0 - validation_fraction, seed))
    if len(train_idx) == 0:
        train_idx, val_idx = val_idx[:-1], val_idx[-1:]
    return train_idx, val_idx


class _ConvEstimator(BaseEstimator):
    _task = "calories"

    def _initial_model(self, input_dims, n_classes=None):
        if self.warm_start_checkpoint is not None:
            return load_checkpoint(self.warm_start_checkpoint)
        head = "classification" if self._task == "classification" else "regression"
        return tiny_cnn(input_dims, tuple(self.channels), head, n_classes, seed=self.random_state)

    def _config(self, loss):
        return TrainConfig(
            task=self._task,
            loss=loss,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            seed=self.random_state,
            select_metric=self.select_metric,
        )

    def _datasets(self, X, targets, hsm, X_val, y_val, hsm_val, cam_dims, classes=()):
        full = Dataset(X, targets, self._task, hsm, None, [], tuple(classes))
        if X_val is None:
            tr, va = _split(len(X), self.validation_fraction, self.random_state)
            return full.subset(tr), full.subset(va)
        X_val = check_images(X_val, X.shape[1:3])
        if self._task == "classification":
            yv = np.searchsorted(self.classes_, y_val)
        else:
            yv = check_targets(y_val, len(X_val))
        hv = None if hsm_val is None else check_saliency(hsm_val, len(X_val), cam_dims)
        return full, Dataset(X_val, yv, self._task, hv, None, [], tuple(classes))


class SaliencyGuidedRegressor(RegressorMixin, _ConvEstimator):
    """Calorie (or mass) regressor optionally steered by human saliency maps.

    Parameters
    ----------
    loss : {"mse", "cyborg_weighted", "cyborg_multiplied"}
        ``mse`` ignores ``hsm``; the CYBORG variants need one map per image.
    alpha : float
        Weight of the calorie term for ``cyborg_weighted``.
    channels : tuple of int
        Output channels of the three conv blocks.
    validation_fraction : float
        Held-out share used for best-epoch selection when no explicit
        validation set is passed to ``fit``.
    warm_start_checkpoint : path or None
        Start from a saved model instead of a fresh TinyCNN.
    """

    def __init__(self, loss="cyborg_multiplied", alpha=0.5, channels=(8, 16, 32), epochs=30, batch_size=16,
                 learning_rate=1e-3, optimizer="adam", validation_fraction=0.2, select_metric=None,
                 random_state=0, warm_start_checkpoint=None, task="calories"):
        self.loss = loss
        self.alpha = alpha
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.validation_fraction = validation_fraction
        self.select_metric = select_metric
        self.random_state = random_state
        self.warm_start_checkpoint = warm_start_checkpoint
        self.task = task

    def fit(self, X, y, hsm=None, X_val=None, y_val=None, hsm_val=None):
        if self.task not in ("calories", "mass"):
            raise ValueError("task must be 'calories' or 'mass'")
        self._task = self.task
        X = check_images(X)
        y = check_targets(y, len(X))
        model = self._initial_model(X.shape[1:3])
        cam_dims = model.cam_dims
        maps = None if hsm is None else check_saliency(hsm, len(X), cam_dims)
        train_set, val_set = self._datasets(X, y, maps, X_val, y_val, hsm_val, cam_dims)
        config = self._config(LossSpec(self.loss, self.alpha))
        self.model_, self.history_ = train(config, train_set, val_set, model)
        self.best_epoch_ = self.history_.best_epoch
        self.cam_dims_ = cam_dims
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_images(X, self.model_.input_dims))

    def saliency_maps(self, X):
        """Normalized model saliency maps, shape (N, *cam_dims)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.input_dims)
        return np.concatenate(
            [batch_msm(forward(self.model_, X[i:i + 64]).feature_maps, self.model_.head) for i in range(0, len(X), 64)]
        )

    def saliency_agreement(self, X, hsm):
        """Per-image Pearson correlation between model and human maps."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.input_dims)
        maps = check_saliency(hsm, len(X), self.model_.cam_dims)
        ds = Dataset(X, np.zeros(len(X)), "calories", maps)
        return saliency_agreement(self.model_, ds)[0]


class FoodCategoryClassifier(ClassifierMixin, _ConvEstimator):
    """TinyCNN food classifier, mainly used as a pretraining stage."""

    _task = "classification"

    def __init__(self, channels=(8, 16, 32), epochs=30, batch_size=16, learning_rate=1e-3, optimizer="adam",
                 validation_fraction=0.2, select_metric=None, random_state=0, warm_start_checkpoint=None):
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.validation_fraction = validation_fraction
        self.select_metric = select_metric
        self.random_state = random_state
        self.warm_start_checkpoint = warm_start_checkpoint

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        labels = np.searchsorted(self.classes_, y)
        model = self._initial_model(X.shape[1:3], len(self.classes_))
        classes = tuple(str(c) for c in self.classes_)
        model.head.classes = classes
        train_set, val_set = self._datasets(X, labels, None, X_val, y_val, None, None, classes)
        self.model_, self.history_ = train(self._config(LossSpec("cross_entropy")), train_set, val_set, model)
        self.best_epoch_ = self.history_.best_epoch
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_images(X, self.model_.input_dims))

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]


class StackedEnsembleRegressor(RegressorMixin, BaseEstimator):
    """Frozen member regressors feeding a 100-unit dense combiner.

    ``members`` may hold fitted :class:`SaliencyGuidedRegressor` instances,
    model objects or checkpoint paths.
    """

    def __init__(self, members=(), init="random", epochs=30, batch_size=16, learning_rate=1e-3,
                 validation_fraction=0.2, random_state=0):
        self.members = members
        self.init = init
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _members(self):
        return [getattr(m, "model_", m) for m in self.members]

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_targets(y, len(X))
        built = ens.build_ensemble(self._members(), seed=self.random_state, init=self.init)
        full = Dataset(X, y, "calories")
        if X_val is None:
            tr, va = _split(len(X), self.validation_fraction, self.random_state)
            train_set, val_set = full.subset(tr), full.subset(va)
        else:
            X_val = check_images(X_val, X.shape[1:3])
            train_set, val_set = full, Dataset(X_val, check_targets(y_val, len(X_val)), "calories")
        config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                             seed=self.random_state)
        self.ensemble_, self.history_ = ens.train_combiner(built, config, train_set, val_set)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict(self, X):
        check_is_fitted(self, "ensemble_")
        return ens.ensemble_predict(self.ensemble_, check_images(X, self.ensemble_.input_dims))


def pretrain_and_finetune(X_pre, y_pre, X, y, hsm=None, pre_task="classification", loss="cyborg_multiplied",
                          epochs=(10, 10), channels=(8, 16, 32), random_state=0, validation_fraction=0.2):
    """Functional shortcut for the pretrain -> head swap -> fine-tune recipe.

    Returns ``(model, (pre_history, fine_history), backbone_sha256)``.
    """
    X_pre = check_images(X_pre)
    X = check_images(X, X_pre.shape[1:3])
    y = check_targets(y, len(X))
    if pre_task == "classification":
        classes = np.unique(np.asarray(y_pre))
        pre_targets = np.searchsorted(classes, y_pre)
        model = tiny_cnn(X_pre.shape[1:3], channels, "classification", len(classes), seed=random_state,
                         classes=tuple(str(c) for c in classes))
        pre_loss = LossSpec("cross_entropy")
    else:
        pre_targets = check_targets(y_pre, len(X_pre))
        model = tiny_cnn(X_pre.shape[1:3], channels, seed=random_state)
        pre_loss = LossSpec("mse")
    pre = Dataset(X_pre, pre_targets, pre_task, classes=tuple(str(c) for c in classes) if pre_task == "classification" else ())
    maps = None if hsm is None else check_saliency(hsm, len(X), model.cam_dims)
    fine = Dataset(X, y, "calories", maps)
    ptr, pva = _split(len(X_pre), validation_fraction, random_state)
    ftr, fva = _split(len(X), validation_fraction, random_state)
    pre_cfg = TrainConfig(task=pre_task, loss=pre_loss, epochs=epochs[0], seed=random_state)
    fine_cfg = TrainConfig(task="calories", loss=LossSpec(loss), epochs=epochs[1], seed=random_state)
    return pretrain_then_finetune(pre_cfg, fine_cfg, pre.subset(ptr), pre.subset(pva), fine.subset(ftr),
                                  fine.subset(fva), model)
