"""Scikit-learn style estimator around the multi-view prompt pipeline.

``MultiViewPromptClassifier`` exposes the few-shot classifier through the
familiar fit/predict/predict_proba/score surface so it composes with
pipelines, grid search, and cross-validation; ``get_params``/``set_params``
come from ``BaseEstimator``. Inputs are batches of point clouds, either a
(B, N, 3) array or a sequence of (N_i, 3) arrays; clouds are resampled to
``n_points`` and normalized internally.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .data import resample_points
from .errors import ValidationError
from .geometry import PointCloud, normalize_cloud
from .training import build_network, predict_tta, run_training
from .validation import check_clouds, check_labels


class MultiViewPromptClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot point-cloud classifier prompting a frozen 2D backbone.

    Parameters mirror the training protocol: AdamW with decoupled weight
    decay, cosine-annealed learning rate, per-epoch rotation augmentation,
    and TTA plurality voting at predict time. Defaults follow the
    full-scale protocol; desk-scale runs want smaller ``image_size``,
    ``epochs``, and channel widths.
    """

    def __init__(
        self,
        n_views: int = 4,
        mode: str = "full",
        backbone: str = "tiny-cnn",
        weights_path=None,
        image_size: int = 224,
        c1: int = 64,
        c2: int = 256,
        k_neighbors: int = 32,
        token_stride: int = 16,
        n_points: int = 1024,
        lr: float = 5e-4,
        weight_decay: float = 5e-2,
        epochs: int = 300,
        batch_size: int = 16,
        seed: int = 0,
        alpha_range: tuple = (-math.pi, math.pi),
        beta_range: tuple = (-0.4 * math.pi, -0.2 * math.pi),
        augment: bool = True,
        tta_votes: int = 10,
    ):
        self.n_views = n_views
        self.mode = mode
        self.backbone = backbone
        self.weights_path = weights_path
        self.image_size = image_size
        self.c1 = c1
        self.c2 = c2
        self.k_neighbors = k_neighbors
        self.token_stride = token_stride
        self.n_points = n_points
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.alpha_range = alpha_range
        self.beta_range = beta_range
        self.augment = augment
        self.tta_votes = tta_votes

    def _config(self) -> TrainConfig:
        return TrainConfig(
            n_points=self.n_points,
            n_views=self.n_views,
            mode=self.mode,
            backbone=self.backbone,
            weights_path=self.weights_path,
            image_size=self.image_size,
            c1=self.c1,
            c2=self.c2,
            k_neighbors=self.k_neighbors,
            token_stride=self.token_stride,
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            alpha_range=tuple(self.alpha_range),
            beta_range=tuple(self.beta_range),
            augment=self.augment,
            tta_votes=self.tta_votes,
        ).validate()

    def _prepare(self, X, rng: np.random.Generator) -> list[np.ndarray]:
        clouds = check_clouds(X)
        prepared = []
        for coords in clouds:
            if coords.shape[0] <= self.k_neighbors:
                raise ValidationError(
                    f"clouds need more than k_neighbors={self.k_neighbors} points, "
                    f"got {coords.shape[0]}"
                )
            if coords.shape[0] != self.n_points:
                coords = resample_points(coords, self.n_points, rng)
            prepared.append(normalize_cloud(PointCloud(coords)).coords)
        return prepared

    def fit(self, X, y):
        """Train on point clouds X with class labels y; returns self."""
        config = self._config()
        y = check_labels(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValidationError("fit needs at least two classes")
        torch.manual_seed(config.seed)
        rng = np.random.default_rng(config.seed)
        clouds = self._prepare(X, rng)
        if len(clouds) != y_enc.size:
            raise ValidationError(
                f"{len(clouds)} clouds but {y_enc.size} labels"
            )
        network = build_network(config, self.classes_.size)
        metrics, best_state, _, _ = run_training(
            network,
            clouds,
            y_enc.astype(np.int64),
            np.arange(len(clouds)),
            config,
        )
        network.load_state_dict(best_state)
        network.eval()
        self.network_ = network
        self.history_ = metrics
        return self

    def _tta(self, X):
        check_is_fitted(self, "network_")
        config = self._config()
        rng = np.random.default_rng(config.seed)
        clouds = self._prepare(X, rng)
        return predict_tta(
            self.network_,
            clouds,
            config.k_neighbors,
            config.tta_votes,
            rng,
            config.alpha_range,
            config.beta_range,
            num_classes=self.classes_.size,
        )

    def predict(self, X):
        """Plurality-vote class per cloud over ``tta_votes`` rotated passes."""
        preds, _, _ = self._tta(X)
        return self.classes_[preds]

    def predict_proba(self, X):
        """Mean softmax probabilities across the TTA votes."""
        _, probs, _ = self._tta(X)
        return probs
