"""Frozen 2D backbone adapter.

Wraps a pretrained image trunk so that every parameter is frozen except
batch-normalization scale/shift (running statistics stay updatable in train
mode). The registry ships two architectures:

* ``tiny-cnn``: four conv/BN/ReLU blocks (~100K params), for desk-scale
  tests and CPU experiments.
* ``resnet18-like``: a torchvision ResNet-18 trunk with the classification
  head removed (C3=512, downsample factor 32).

Weight files are flat key -> array ``.npz`` archives with an embedded JSON
manifest under the reserved key ``__manifest__`` listing (name, shape,
dtype) for every entry; the loader validates the file against the
architecture's own manifest and reports missing/extra names.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict

import numpy as np
import torch
import torch.nn as nn

from .errors import LoadError, ValidationError

MANIFEST_KEY = "__manifest__"


class TinyCnn(nn.Module):
    """Four stride-2 conv/BN/ReLU blocks; downsample factor 16, C3=128."""

    def __init__(self):
        super().__init__()
        channels = [3, 16, 32, 64, 128]
        blocks = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            blocks += [
                nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            ]
        self.features = nn.Sequential(*blocks)

    def forward(self, x):
        return self.features(x)


def _build_tiny_cnn() -> nn.Module:
    return TinyCnn()


def _build_resnet18_trunk() -> nn.Module:
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    return nn.Sequential(
        net.conv1,
        net.bn1,
        net.relu,
        net.maxpool,
        net.layer1,
        net.layer2,
        net.layer3,
        net.layer4,
    )


@dataclass(frozen=True)
class ArchSpec:
    name: str
    builder: Callable[[], nn.Module]
    out_channels: int
    reduction: int
    min_input: int


ARCHITECTURES: Dict[str, ArchSpec] = {
    "tiny-cnn": ArchSpec("tiny-cnn", _build_tiny_cnn, 128, 16, 16),
    "resnet18-like": ArchSpec("resnet18-like", _build_resnet18_trunk, 512, 32, 32),
}


def weight_manifest(module: nn.Module) -> list[dict]:
    """(name, shape, dtype) for every state-dict entry, in state-dict order."""
    return [
        {"name": name, "shape": list(tensor.shape), "dtype": str(tensor.numpy().dtype)}
        for name, tensor in module.state_dict().items()
    ]


def save_weights(module: nn.Module, path) -> None:
    """Serialize a module's state dict to the documented npz format."""
    path = Path(path)
    arrays = {name: tensor.numpy() for name, tensor in module.state_dict().items()}
    if MANIFEST_KEY in arrays:
        raise ValidationError(f"parameter name {MANIFEST_KEY!r} is reserved")
    arrays[MANIFEST_KEY] = np.array(json.dumps(weight_manifest(module)))
    np.savez(path, **arrays)


def load_weights(module: nn.Module, path) -> None:
    """Load an npz weight file, validating it against the module's manifest."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"weight file not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise LoadError(f"cannot read weight file {path}: {exc}") from exc
    with archive:
        names = set(archive.files)
        if MANIFEST_KEY not in names:
            raise LoadError(f"weight file {path} has no {MANIFEST_KEY} entry")
        manifest = {entry["name"]: entry for entry in json.loads(str(archive[MANIFEST_KEY][()]))}
        names.discard(MANIFEST_KEY)
        if set(manifest) != names:
            raise LoadError(
                f"weight file {path} is inconsistent with its own manifest: "
                f"manifest-only={sorted(set(manifest) - names)}, "
                f"file-only={sorted(names - set(manifest))}"
            )
        expected = module.state_dict()
        missing = sorted(set(expected) - names)
        extra = sorted(names - set(expected))
        if missing or extra:
            raise LoadError(
                f"weight file {path} does not match the architecture manifest: "
                f"missing={missing}, extra={extra}"
            )
        state = {}
        for name, tensor in expected.items():
            arr = archive[name]
            if list(arr.shape) != list(tensor.shape):
                raise LoadError(
                    f"parameter {name} has shape {list(arr.shape)}, "
                    f"expected {list(tensor.shape)}"
                )
            state[name] = torch.from_numpy(arr.copy())
        module.load_state_dict(state)


class FrozenBackbone(nn.Module):
    """Feature trunk with everything frozen except batch normalization.

    ``extract`` runs each view image through the trunk; train mode only
    controls whether BN running statistics update. Missing ``weights_path``
    means random (seeded) initialization, intended for desk-scale tests.
    """

    def __init__(self, arch: str, weights_path=None, seed: int = 0):
        super().__init__()
        if arch not in ARCHITECTURES:
            raise LoadError(
                f"unknown architecture {arch!r}; available: {sorted(ARCHITECTURES)}"
            )
        spec = ARCHITECTURES[arch]
        torch.manual_seed(seed)
        self.trunk = spec.builder()
        if weights_path is not None:
            load_weights(self.trunk, weights_path)
        self.arch = spec.name
        self.out_channels = spec.out_channels
        self.reduction = spec.reduction
        self.min_input = spec.min_input
        self._freeze()

    def _freeze(self):
        bn_param_ids = set()
        for module in self.trunk.modules():
            if isinstance(module, nn.modules.batchnorm._BatchNorm):
                bn_param_ids.update(id(p) for p in module.parameters(recurse=False))
        for param in self.trunk.parameters():
            param.requires_grad = id(param) in bn_param_ids

    def frozen_parameters(self):
        return (p for p in self.trunk.parameters() if not p.requires_grad)

    def trainable_parameters(self):
        return (p for p in self.trunk.parameters() if p.requires_grad)

    def output_shape(self, h: int, w: int) -> tuple[int, int, int]:
        return (self.out_channels, h // self.reduction, w // self.reduction)

    def extract(self, prompts: torch.Tensor, train_mode: bool = False) -> torch.Tensor:
        """Per-view forward pass through the trunk.

        prompts: (M, 3, H, W) or (B, M, 3, H, W) -> features
        (M, C3, H1, W1) or (B, M, C3, H1, W1).
        """
        squeeze = prompts.ndim == 4
        if squeeze:
            prompts = prompts[None]
        if prompts.ndim != 5 or prompts.shape[2] != 3:
            raise ValidationError(
                f"prompts must have shape (B, M, 3, H, W), got {tuple(prompts.shape)}"
            )
        b, m, _, h, w = prompts.shape
        if h < self.min_input or w < self.min_input:
            raise ValidationError(
                f"{self.arch} needs inputs of at least {self.min_input}px, got ({h}, {w})"
            )
        self.trunk.train(train_mode)
        feats = self.trunk(prompts.reshape(b * m, 3, h, w))
        feats = feats.reshape(b, m, *feats.shape[1:])
        return feats[0] if squeeze else feats

    def forward(self, prompts: torch.Tensor) -> torch.Tensor:
        return self.extract(prompts, train_mode=self.training)
