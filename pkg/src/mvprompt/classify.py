"""Multi-view classification head, cross-entropy loss, and overall accuracy."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError


class ClassScores(NamedTuple):
    logits: torch.Tensor        # (B?, num_classes)
    probabilities: torch.Tensor  # softmax of logits, rows sum to 1


class ClassificationHead(nn.Module):
    """Adaptive 1x1 average pool, flatten views and channels, one FC layer.

    features (B?, M, C3, H1, W1) -> logits (B?, num_classes).
    """

    def __init__(self, m_views: int, c3: int, num_classes: int, seed: int = 0):
        super().__init__()
        if num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
        self.m_views = m_views
        self.c3 = c3
        self.num_classes = num_classes
        self.fc = nn.Linear(m_views * c3, num_classes)
        gen = torch.Generator()
        gen.manual_seed(seed)
        bound = 1.0 / math.sqrt(self.fc.in_features)
        with torch.no_grad():
            self.fc.weight.uniform_(-bound, bound, generator=gen)
            self.fc.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        squeeze = features.ndim == 4
        if squeeze:
            features = features[None]
        if features.shape[1] != self.m_views or features.shape[2] != self.c3:
            raise ValidationError(
                f"features {tuple(features.shape)} do not match M={self.m_views}, "
                f"C3={self.c3}"
            )
        pooled = features.mean(dim=(-2, -1))  # adaptive average pool to 1x1
        logits = self.fc(pooled.reshape(pooled.shape[0], -1))
        return logits[0] if squeeze else logits

    def scores(self, features: torch.Tensor) -> ClassScores:
        logits = self.forward(features)
        return ClassScores(logits, torch.softmax(logits, dim=-1))


def xent_loss(scores, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true classes.

    ``scores`` may be raw logits or a ClassScores tuple; computed from
    logits in log-sum-exp form for numerical stability.
    """
    logits = scores.logits if isinstance(scores, ClassScores) else scores
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValidationError(
            f"labels must lie in [0, {logits.shape[-1]}), got "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels)


def overall_accuracy(predictions, labels) -> float:
    """oAcc: exact fraction of samples whose predicted class matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0 or labels.size == 0:
        raise ValidationError("overall_accuracy needs at least one sample")
    if predictions.shape != labels.shape:
        raise ValidationError(
            f"predictions {predictions.shape} and labels {labels.shape} differ in length"
        )
    return float(np.count_nonzero(predictions == labels)) / predictions.size
