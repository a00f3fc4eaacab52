"""End-to-end network: point encoder -> projection -> fusion -> frozen trunk -> head.

The trainable surface is the point encoders, the fusion module, the head,
and the trunk's batch-normalization parameters; everything else in the
trunk stays frozen. Neighbor graphs are computed outside the forward pass
(they depend only on coordinates) and passed in as index tensors.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import FrozenBackbone
from .classify import ClassificationHead
from .errors import ValidationError
from .fusion import MODES, PromptFusion
from .geometry import EdgeFeatureNet, PointLift
from .projection import densify_shift, grid_project, make_view_set


class MultiViewPromptNetwork(nn.Module):
    """Few-shot point-cloud classifier over a frozen 2D image backbone."""

    def __init__(
        self,
        num_classes: int,
        n_views: int = 4,
        mode: str = "full",
        backbone: str = "tiny-cnn",
        weights_path=None,
        c1: int = 64,
        c2: int = 256,
        k_neighbors: int = 32,
        image_size: int = 224,
        token_stride: int = 16,
        densify: bool = True,
        seed: int = 0,
    ):
        super().__init__()
        if mode not in MODES:
            raise ValidationError(f"unknown mode {mode!r}; choose from {MODES}")
        self.mode = mode
        self.n_views = n_views
        self.k_neighbors = k_neighbors
        self.image_size = image_size
        self.densify = densify
        self.views = make_view_set(n_views)
        self.lift = PointLift(c1, seed=seed)
        self.edge = EdgeFeatureNet(c1, seed=seed + 1)
        self.fusion = PromptFusion(c1, c2, token_stride=token_stride, seed=seed + 2)
        self.backbone = FrozenBackbone(backbone, weights_path, seed=seed + 3)
        if image_size < self.backbone.min_input:
            raise ValidationError(
                f"image_size {image_size} is below the {backbone} minimum "
                f"{self.backbone.min_input}"
            )
        self.head = ClassificationHead(
            n_views, self.backbone.out_channels, num_classes, seed=seed + 4
        )

    def encode_maps(self, coords: torch.Tensor, neighbor_idx: torch.Tensor) -> torch.Tensor:
        """coords (B, N, 3), neighbor_idx (B, N, k) -> maps (B, M, C1, H, W)."""
        lifted = self.lift(coords)
        edge_feats = self.edge(lifted, neighbor_idx)
        maps = grid_project(coords, edge_feats, self.views, self.image_size, self.image_size)
        if self.densify:
            maps = densify_shift(maps)
        return maps

    def prompts(self, coords: torch.Tensor, neighbor_idx: torch.Tensor) -> torch.Tensor:
        """coords (B, N, 3) -> prompt images (B, M, 3, H, W)."""
        return self.fusion(self.encode_maps(coords, neighbor_idx), self.mode)

    def forward(self, coords: torch.Tensor, neighbor_idx: torch.Tensor) -> torch.Tensor:
        prompts = self.prompts(coords, neighbor_idx)
        features = self.backbone.extract(prompts, train_mode=self.training)
        return self.head(features)

    def trainable_parameters(self):
        return (p for p in self.parameters() if p.requires_grad)

    def parameter_counts(self) -> dict:
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        total = sum(p.numel() for p in self.parameters())
        return {"trainable": trainable, "total": total, "fraction": trainable / total}
