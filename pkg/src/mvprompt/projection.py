"""Geometry-preserved projection of per-point features into 2D view grids.

Each view rotates the cloud, min-max normalizes the view-space (x, y) over
that view's own bounding box, bins every point into an H x W cell by floor,
and sums the feature vectors sharing a cell. A single densification pass
then propagates features into empty cells adjacent to occupied ones.

View convention: the camera looks along view-space +z and the image plane
is view-space (x, y); the object's up axis is +y, so azimuth view rotations
are about +y and the identity view is a side view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError

DEFAULT_IMAGE_SIZE = 224


def _rot_x(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class ViewSet:
    """M proper rotation matrices (world -> view), stacked as (M, 3, 3)."""

    rotations: np.ndarray

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if self.rotations.ndim != 3 or self.rotations.shape[1:] != (3, 3):
            raise ValidationError(
                f"rotations must have shape (M, 3, 3), got {self.rotations.shape}"
            )
        if self.rotations.shape[0] < 1:
            raise ValidationError("a view set needs at least one view")
        for i, r in enumerate(self.rotations):
            if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or not math.isclose(
                float(np.linalg.det(r)), 1.0, abs_tol=1e-6
            ):
                raise ValidationError(f"view {i} is not a proper rotation")

    @property
    def m_views(self) -> int:
        return self.rotations.shape[0]


def make_view_set(n_views: int) -> ViewSet:
    """Canonical deterministic view sets.

    1: identity. 2: azimuths {0, 180} deg about +y. 4: quarter-turn
    azimuths. 6: the 4 azimuths plus top and bottom (rotations about x by
    -90/+90 deg). 8: the 4 azimuths at elevations +30 and -30 deg. Other
    counts >= 1 fall back to uniform azimuths.
    """
    if n_views < 1:
        raise ValidationError(f"n_views must be >= 1, got {n_views}")
    quarter = [_rot_y(i * math.pi / 2.0) for i in range(4)]
    if n_views == 1:
        rots = [np.eye(3)]
    elif n_views == 2:
        rots = [_rot_y(0.0), _rot_y(math.pi)]
    elif n_views == 4:
        rots = quarter
    elif n_views == 6:
        rots = quarter + [_rot_x(-math.pi / 2.0), _rot_x(math.pi / 2.0)]
    elif n_views == 8:
        rots = [_rot_x(s * math.pi / 6.0) @ q for s in (1, -1) for q in quarter]
    else:
        rots = [_rot_y(i * 2.0 * math.pi / n_views) for i in range(n_views)]
    return ViewSet(np.stack(rots))


def _axis_cells(values: torch.Tensor, n_cells: int) -> torch.Tensor:
    """Map coordinates to cell indices along one axis.

    values: (B, N). Per sample, min-max normalize over the sample's own
    extent and floor-scale into [0, n_cells); a collapsed extent places all
    points in the centered cell n_cells // 2.
    """
    vmin = values.min(dim=1, keepdim=True).values
    vmax = values.max(dim=1, keepdim=True).values
    span = vmax - vmin
    degenerate = span <= 0
    safe_span = torch.where(degenerate, torch.ones_like(span), span)
    unit = (values - vmin) / safe_span
    cells = torch.clamp(torch.floor(unit * n_cells).long(), max=n_cells - 1)
    center = torch.full_like(cells, n_cells // 2)
    return torch.where(degenerate, center, cells)


def grid_project(
    coords: torch.Tensor,
    feats: torch.Tensor,
    views: ViewSet,
    h: int = DEFAULT_IMAGE_SIZE,
    w: int = DEFAULT_IMAGE_SIZE,
) -> torch.Tensor:
    """Sum per-point features into M view grids.

    coords: (N, 3) or (B, N, 3); feats: (N, C) or (B, N, C), aligned with
    coords. Returns (M, C, H, W) or (B, M, C, H, W). Rows index view-space
    y, columns view-space x. Empty cells are zero; gradients flow to feats.
    """
    if h < 1 or w < 1:
        raise ValidationError(f"grid dims must be positive, got ({h}, {w})")
    squeeze = coords.ndim == 2
    if squeeze:
        coords, feats = coords[None], feats[None]
    if coords.shape[:2] != feats.shape[:2]:
        raise ValidationError(
            f"coords {tuple(coords.shape)} and feats {tuple(feats.shape)} are misaligned"
        )
    b, n, _ = coords.shape
    c = feats.shape[-1]
    rot = torch.as_tensor(views.rotations, dtype=coords.dtype, device=coords.device)
    per_view = []
    flat_feats = feats.reshape(b * n, c)
    batch_offset = torch.arange(b, device=coords.device).repeat_interleave(n) * (h * w)
    for m in range(views.m_views):
        view_xy = coords @ rot[m].T  # (B, N, 3) in view space
        col = _axis_cells(view_xy[..., 0], w)
        row = _axis_cells(view_xy[..., 1], h)
        flat_cell = (row * w + col).reshape(b * n) + batch_offset
        grid = torch.zeros(b * h * w, c, dtype=feats.dtype, device=feats.device)
        grid = grid.index_add(0, flat_cell, flat_feats)
        per_view.append(grid.reshape(b, h, w, c).permute(0, 3, 1, 2))
    maps = torch.stack(per_view, dim=1)  # (B, M, C, H, W)
    return maps[0] if squeeze else maps


def densify_shift(maps: torch.Tensor) -> torch.Tensor:
    """One 8-neighborhood densification pass.

    Every empty cell (all channels zero) that touches at least one occupied
    cell receives the mean feature of its occupied neighbors; occupied
    cells are never modified. maps: (..., C, H, W).
    """
    c, h, w = maps.shape[-3:]
    flat = maps.reshape(-1, c, h, w)
    occupied = (flat != 0).any(dim=1, keepdim=True)  # (B', 1, H, W)
    occ = occupied.to(flat.dtype)
    padded_feat = F.pad(flat * occ, (1, 1, 1, 1))
    padded_occ = F.pad(occ, (1, 1, 1, 1))
    neigh_sum = torch.zeros_like(flat)
    neigh_count = torch.zeros_like(occ)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            neigh_sum = neigh_sum + padded_feat[..., 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            neigh_count = neigh_count + padded_occ[..., 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    fill = neigh_sum / neigh_count.clamp(min=1.0)
    filled = torch.where((~occupied) & (neigh_count > 0), fill, flat)
    return filled.reshape(maps.shape)
