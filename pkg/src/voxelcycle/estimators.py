"""Scikit-learn style estimators over the translation/segmentation system.

These wrap the trainer so the algorithms compose with the wider ecosystem
(get_params/set_params, clone, pipelines operating on volume stacks).
Volumes are passed as (n, D, H, W) float arrays in [-1, 1]; labels as
(n, D, H, W) integer arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .engine import Tensor, no_grad
from .errors import ShapeError
from .evaluation import mean_dice_over
from .phantom import Dataset, PhantomSpec
from .trainer import (TrainConfig, TrainState, joint_train, pretrain_generators,
                      pretrain_segmentors, train_segmentor)
from .validation import check_fitted, check_label_array, check_volume_array


def _as_dataset(volumes: np.ndarray, labels: np.ndarray | None,
                modality: str) -> Dataset:
    if labels is None:
        labels = np.zeros(volumes.shape, dtype=np.uint8)
    samples = [(volumes[i], labels[i].astype(np.uint8)) for i in range(len(volumes))]
    return Dataset(samples=samples, modality=modality,
                   anatomy_seeds=list(range(len(samples))), spec=PhantomSpec())


class VolumeSegmenter(BaseEstimator):
    """Voxelwise multi-class segmentation with a norm-free 3D U-Net."""

    def __init__(self, class_count=4, base_filters=16, epochs=50, batch_size=2,
                 learning_rate=2e-4, patience=5, validation_fraction=0.2, seed=0):
        self.class_count = class_count
        self.base_filters = base_filters
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(base_filters=self.base_filters,
                           class_count=self.class_count,
                           epochs_pretrain_seg=self.epochs,
                           batch_size=self.batch_size,
                           lr_seg=self.learning_rate,
                           early_stop_patience=self.patience,
                           validation_fraction=self.validation_fraction,
                           seed=self.seed)

    def fit(self, X, y):
        volumes = check_volume_array(X)
        labels = check_label_array(y, self.class_count, volumes)
        state = TrainState(self._config())
        self.history_ = train_segmentor(state, "seg_a",
                                        _as_dataset(volumes, labels, "A"))
        self.network_ = state.seg_a
        return self

    def predict(self, X):
        check_fitted(self, "network_")
        volumes = check_volume_array(X)
        from .networks import predict_labels
        return predict_labels(self.network_, Tensor(volumes[:, None]))

    def score(self, X, y):
        """Mean foreground Dice over the given volumes."""
        check_fitted(self, "network_")
        volumes = check_volume_array(X)
        labels = check_label_array(y, self.class_count, volumes)
        return mean_dice_over(self.network_, _as_dataset(volumes, labels, "A"))


class UnpairedVolumeTranslator(BaseEstimator):
    """Bidirectional volume translator trained on unpaired modality stacks.

    With labels supplied and shape_weight > 0, segmentors are pretrained and
    joint training adds the shape-consistency supervision; otherwise the
    translator trains with adversarial + cycle losses only.
    """

    def __init__(self, base_filters=16, cycle_weight=10.0, shape_weight=1.0,
                 class_count=4, epochs_pretrain_seg=50, epochs_pretrain_gan=30,
                 epochs_joint=25, epochs_decay=25, batch_size=2,
                 learning_rate=2e-4, validation_fraction=0.2, seed=0):
        self.base_filters = base_filters
        self.cycle_weight = cycle_weight
        self.shape_weight = shape_weight
        self.class_count = class_count
        self.epochs_pretrain_seg = epochs_pretrain_seg
        self.epochs_pretrain_gan = epochs_pretrain_gan
        self.epochs_joint = epochs_joint
        self.epochs_decay = epochs_decay
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _config(self, shape_on: bool) -> TrainConfig:
        return TrainConfig(base_filters=self.base_filters,
                           cycle_weight=self.cycle_weight,
                           shape_weight=self.shape_weight if shape_on else 0.0,
                           class_count=self.class_count,
                           epochs_pretrain_seg=self.epochs_pretrain_seg,
                           epochs_pretrain_gan=self.epochs_pretrain_gan,
                           epochs_joint=self.epochs_joint,
                           epochs_decay=self.epochs_decay,
                           batch_size=self.batch_size,
                           lr_gan=self.learning_rate,
                           lr_seg=self.learning_rate,
                           validation_fraction=self.validation_fraction,
                           seed=self.seed)

    def fit(self, X_a, X_b, y_a=None, y_b=None):
        vols_a = check_volume_array(X_a, "X_a")
        vols_b = check_volume_array(X_b, "X_b")
        labeled = y_a is not None and y_b is not None
        if labeled:
            labs_a = check_label_array(y_a, self.class_count, vols_a, "y_a")
            labs_b = check_label_array(y_b, self.class_count, vols_b, "y_b")
        else:
            labs_a = labs_b = None
        shape_on = labeled and self.shape_weight > 0
        data_a = _as_dataset(vols_a, labs_a, "A")
        data_b = _as_dataset(vols_b, labs_b, "B")
        state = TrainState(self._config(shape_on))
        if shape_on:
            pretrain_segmentors(state, data_a, data_b)
        pretrain_generators(state, data_a, data_b)
        if shape_on:
            joint_train(state, data_a, data_b)
        else:
            # same generator-update budget without shape supervision
            pretrain_generators(state, data_a, data_b,
                                epochs=self.epochs_joint + self.epochs_decay)
        self.state_ = state
        return self

    def transform(self, X, direction: str = "a2b"):
        check_fitted(self, "state_")
        if direction not in ("a2b", "b2a"):
            raise ShapeError(f"direction must be 'a2b' or 'b2a', got {direction!r}")
        volumes = check_volume_array(X)
        generator = self.state_.gen_ab if direction == "a2b" else self.state_.gen_ba
        with no_grad():
            return generator(Tensor(volumes[:, None])).data[:, 0]

    def inverse_transform(self, X):
        return self.transform(X, direction="b2a")
