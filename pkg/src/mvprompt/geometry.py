"""Point-cloud domain types and the per-point feature encoders.

Covers cloud normalization, seeded rotation sampling for augmentation,
k-nearest-neighbor graph construction, the pointwise coordinate lift, and
the neighborhood edge embedding (concat(e_i, e_j - e_i) -> shared MLP ->
max over neighbors) that turns raw geometry into per-point features.

Dataset-space objects (clouds, graphs, rotations) are numpy; the learnable
encoders are torch modules operating on (..., N, C) tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import ValidationError
from .validation import check_coords

DEFAULT_ALPHA_RANGE = (-math.pi, math.pi)
DEFAULT_BETA_RANGE = (-0.4 * math.pi, -0.2 * math.pi)


@dataclass
class PointCloud:
    """One object's (N, 3) coordinate matrix plus an optional class label."""

    coords: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.coords = check_coords(self.coords)

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class RotationSpec:
    """Closed angle intervals (radians) and the seed for one rotation draw."""

    alpha_range: Tuple[float, float] = DEFAULT_ALPHA_RANGE
    beta_range: Tuple[float, float] = DEFAULT_BETA_RANGE
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha_range", "beta_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValidationError(
                    f"{name} must be a non-empty closed interval, got ({lo}, {hi})"
                )
            if lo < -math.pi - 1e-12 or hi > math.pi + 1e-12:
                raise ValidationError(f"{name} must lie within [-pi, pi], got ({lo}, {hi})")


@dataclass
class KnnGraph:
    """(N, k) neighbor indices into the same cloud; a point never lists itself."""

    indices: np.ndarray
    k: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2 or self.indices.shape[1] != self.k:
            raise ValidationError(
                f"indices must have shape (N, k={self.k}), got {self.indices.shape}"
            )


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center the cloud at its centroid and scale the farthest point to norm 1.

    A fully degenerate cloud (all points coincident) is only centered.
    Idempotent up to float rounding.
    """
    coords = cloud.coords - cloud.coords.mean(axis=0, keepdims=True)
    radius = float(np.linalg.norm(coords, axis=1).max())
    if radius > 0.0:
        coords = coords / radius
    return PointCloud(coords, cloud.label)


def rotation_matrix(alpha: float, beta: float) -> np.ndarray:
    """Proper rotation R = Rz(alpha) @ Rx(beta), applied to rows as coords @ R.T."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cb, -sb], [0.0, sb, cb]])
    return rz @ rx


def sample_rotation(spec: RotationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw a rotation with alpha ~ U(alpha_range), beta ~ U(beta_range).

    Without an explicit generator the draw is seeded from ``spec.seed``, so
    the same spec always yields the same matrix.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    alpha = float(rng.uniform(*spec.alpha_range))
    beta = float(rng.uniform(*spec.beta_range))
    return rotation_matrix(alpha, beta)


def rotate_cloud(cloud: PointCloud, rotation: np.ndarray) -> PointCloud:
    return PointCloud(cloud.coords @ rotation.T, cloud.label)


def knn(cloud: PointCloud, k: int) -> KnnGraph:
    """Euclidean k-nearest neighbors over raw 3D coordinates.

    Each row lists the k nearest other points (self excluded), ties broken
    by lower index. Requires N > k >= 1.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    n = cloud.n_points
    if k >= n:
        raise ValidationError(f"k={k} must be smaller than the cloud size N={n}")
    diff = cloud.coords[:, None, :] - cloud.coords[None, :, :]  # (N, N, 3)
    dist = np.sqrt((diff * diff).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")  # stable sort => lower index wins ties
    return KnnGraph(order[:, :k], k)


def _seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    # fan-in scaled uniform, seedable
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.uniform_(-bound, bound, generator=gen)


class PointLift(nn.Module):
    """Pointwise two-layer map lifting xyz coordinates to C1-dim features.

    3 -> C1/2 -> C1 with GELU in between; applied independently per point,
    so permuting input rows permutes output rows identically.
    """

    def __init__(self, c1: int = 64, seed: int = 0):
        super().__init__()
        if c1 < 2:
            raise ValidationError(f"c1 must be >= 2, got {c1}")
        self.c1 = c1
        hidden = c1 // 2
        self.fc1 = nn.Linear(3, hidden)
        self.fc2 = nn.Linear(hidden, c1)
        self.act = nn.GELU()
        gen = _seeded_generator(seed)
        _init_linear(self.fc1, gen)
        _init_linear(self.fc2, gen)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        # (..., N, 3) -> (..., N, C1)
        return self.fc2(self.act(self.fc1(coords)))


def gather_neighbors(feats: torch.Tensor, neighbor_idx: torch.Tensor) -> torch.Tensor:
    """Gather neighbor feature vectors.

    feats: (..., N, C); neighbor_idx: (..., N, k) -> (..., N, k, C).
    """
    if feats.shape[-2] != neighbor_idx.shape[-2]:
        raise ValidationError(
            f"graph covers {neighbor_idx.shape[-2]} points but features cover "
            f"{feats.shape[-2]}"
        )
    n, c = feats.shape[-2], feats.shape[-1]
    k = neighbor_idx.shape[-1]
    flat_idx = neighbor_idx.reshape(*neighbor_idx.shape[:-2], n * k, 1).expand(
        *neighbor_idx.shape[:-2], n * k, c
    )
    gathered = torch.gather(feats, -2, flat_idx)
    return gathered.reshape(*neighbor_idx.shape[:-2], n, k, c)


class EdgeFeatureNet(nn.Module):
    """Neighborhood edge embedding with a shared two-layer pointwise net.

    For every point i with neighbors j: concat(e_i, e_j - e_i) -> phi
    (2*C1 -> C1 -> C1, GELU between layers) -> max over the k neighbors.
    """

    def __init__(self, c1: int = 64, seed: int = 0):
        super().__init__()
        self.c1 = c1
        self.fc1 = nn.Linear(2 * c1, c1)
        self.fc2 = nn.Linear(c1, c1)
        self.act = nn.GELU()
        gen = _seeded_generator(seed)
        _init_linear(self.fc1, gen)
        _init_linear(self.fc2, gen)

    def forward(self, feats: torch.Tensor, neighbor_idx: torch.Tensor) -> torch.Tensor:
        # feats (..., N, C1), neighbor_idx (..., N, k) -> (..., N, C1)
        if feats.shape[-1] != self.c1:
            raise ValidationError(
                f"features have {feats.shape[-1]} channels, expected {self.c1}"
            )
        e_j = gather_neighbors(feats, neighbor_idx)  # (..., N, k, C1)
        e_i = feats.unsqueeze(-2).expand_as(e_j)
        pair = torch.cat([e_i, e_j - e_i], dim=-1)  # (..., N, k, 2*C1)
        embedded = self.fc2(self.act(self.fc1(pair)))
        return embedded.max(dim=-2).values
