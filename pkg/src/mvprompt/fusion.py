"""Multi-view prompt fusion.

Turns M view feature maps into three-channel prompt images for a frozen 2D
backbone. The full path tokenizes each view with a strided 7x7 convolution,
lets all M*P^2 tokens interact through one single-head self-attention layer
(cross-view), upsamples the attended tokens back to map resolution, fuses
them with the original maps through a 1x1 convolution, and projects to
3 channels with a 3x3 convolution. Ablation modes skip parts of that path:

* ``baseline``: prompts straight from the input maps.
* ``attention_only``: attended complement added to the maps, then prompts.
* ``full``: concatenation + 1x1 conv fusion, then prompts.

Prompts are standardized per view and channel to the backbone's expected
input statistics (zero mean, unit variance by default, matching trunks that
consume pre-normalized images).
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

MODES = ("baseline", "attention_only", "full")
DEFAULT_C2 = 256
DEFAULT_TOKEN_KERNEL = 7
DEFAULT_TOKEN_STRIDE = 16


class TokenSequence(NamedTuple):
    """Flattened multi-view token sequence.

    tokens: (M*P^2, C2) or (B, M*P^2, C2), view-major then row-major.
    """

    tokens: torch.Tensor
    patch_side: int
    m_views: int


def _seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


def _init_fan_in(module: nn.Module, gen: torch.Generator) -> None:
    for layer in module.modules():
        if isinstance(layer, (nn.Linear, nn.Conv2d)):
            fan_in = layer.weight.shape[1:].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=gen)
                if layer.bias is not None:
                    layer.bias.uniform_(-bound, bound, generator=gen)


def standardize_prompts(
    prompts: torch.Tensor,
    mean: torch.Tensor | float = 0.0,
    std: torch.Tensor | float = 1.0,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Standardize each (view, channel) slice over its spatial extent.

    prompts: (..., 3, H, W). mean/std are scalars or per-channel (3,)
    targets; a constant slice maps to the target mean.
    """
    mu = prompts.mean(dim=(-2, -1), keepdim=True)
    sigma = prompts.std(dim=(-2, -1), keepdim=True, unbiased=False)
    unit = (prompts - mu) / (sigma + eps)
    if isinstance(mean, torch.Tensor):
        mean = mean.reshape(3, 1, 1).to(prompts.dtype)
    if isinstance(std, torch.Tensor):
        std = std.reshape(3, 1, 1).to(prompts.dtype)
    return unit * std + mean


class PromptFusion(nn.Module):
    """View tokenizer, cross-view self-attention, and prompt projection."""

    def __init__(
        self,
        c1: int = 64,
        c2: int = DEFAULT_C2,
        token_kernel: int = DEFAULT_TOKEN_KERNEL,
        token_stride: int = DEFAULT_TOKEN_STRIDE,
        residual: bool = True,
        standardize: bool = True,
        prompt_mean: tuple[float, float, float] = (0.0, 0.0, 0.0),
        prompt_std: tuple[float, float, float] = (1.0, 1.0, 1.0),
        seed: int = 0,
    ):
        super().__init__()
        self.c1 = c1
        self.c2 = c2
        self.token_kernel = token_kernel
        self.token_stride = token_stride
        self.residual = residual
        self.standardize = standardize
        self.tokenizer = nn.Conv2d(c1, c2, token_kernel, stride=token_stride)
        self.norm = nn.LayerNorm(c2)
        self.to_q = nn.Linear(c2, c2)
        self.to_k = nn.Linear(c2, c2)
        self.to_v = nn.Linear(c2, c2)
        self.upsample_conv = nn.Conv2d(c2, c1, 3, padding=1)
        self.fuse_conv = nn.Conv2d(2 * c1, c1, 1)
        self.prompt_conv = nn.Conv2d(c1, 3, 3, padding=1)
        self.act = nn.GELU()
        self.register_buffer("prompt_mean", torch.tensor(prompt_mean).reshape(3, 1, 1))
        self.register_buffer("prompt_std", torch.tensor(prompt_std).reshape(3, 1, 1))
        _init_fan_in(self, _seeded_generator(seed))

    @staticmethod
    def _batched(maps: torch.Tensor):
        if maps.ndim == 4:
            return maps[None], True
        if maps.ndim == 5:
            return maps, False
        raise ValidationError(f"expected (M, C, H, W) or (B, M, C, H, W), got {tuple(maps.shape)}")

    def tokenize(self, maps: torch.Tensor) -> TokenSequence:
        """Strided convolution per view, flattened into one token sequence.

        maps: (B?, M, C1, H, W) -> tokens (B?, M*P^2, C2), view-major then
        row-major over the P x P patch grid.
        """
        maps, squeeze = self._batched(maps)
        b, m, c, h, w = maps.shape
        if c != self.c1:
            raise ValidationError(f"maps have {c} channels, expected {self.c1}")
        if h < self.token_kernel or w < self.token_kernel:
            raise ValidationError(
                f"spatial dims ({h}, {w}) are smaller than the {self.token_kernel}x"
                f"{self.token_kernel} tokenizer kernel"
            )
        patches = self.tokenizer(maps.reshape(b * m, c, h, w))  # (B*M, C2, Ph, Pw)
        ph, pw = patches.shape[-2:]
        if ph != pw:
            raise ValidationError(
                f"tokenizer produced a non-square {ph}x{pw} patch grid; use square inputs"
            )
        tokens = patches.permute(0, 2, 3, 1).reshape(b, m * ph * pw, self.c2)
        tokens = tokens[0] if squeeze else tokens
        return TokenSequence(tokens, ph, m)

    def attention_weights(self, seq: TokenSequence) -> torch.Tensor:
        """Softmax attention matrix over the joint token sequence."""
        tokens = seq.tokens if seq.tokens.ndim == 3 else seq.tokens[None]
        normed = self.norm(tokens)
        q, k = self.to_q(normed), self.to_k(normed)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.c2)
        weights = torch.softmax(logits, dim=-1)
        return weights if seq.tokens.ndim == 3 else weights[0]

    def attend(self, seq: TokenSequence) -> TokenSequence:
        """Single-head scaled dot-product attention across all views' tokens.

        Every output token is a weighted sum of all M*P^2 value projections;
        with ``residual`` the input sequence is added back.
        """
        tokens = seq.tokens
        if tokens.shape[-2] < 1:
            raise ValidationError("token sequence is empty")
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens[None]
        normed = self.norm(tokens)
        q, k, v = self.to_q(normed), self.to_k(normed), self.to_v(normed)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.c2)
        attended = torch.softmax(logits, dim=-1) @ v
        out = tokens + attended if self.residual else attended
        return TokenSequence(out[0] if squeeze else out, seq.patch_side, seq.m_views)

    def detokenize_upsample(self, seq: TokenSequence, h: int, w: int) -> torch.Tensor:
        """Reshape tokens to view grids, bilinear-upsample, 3x3 conv to C1.

        Returns the complement maps (B?, M, C1, H, W). Corner-aligned
        bilinear sampling; no activation after the convolution.
        """
        tokens = seq.tokens
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens[None]
        b, length, c2 = tokens.shape
        p, m = seq.patch_side, seq.m_views
        if length != m * p * p or c2 != self.c2:
            raise ValidationError(
                f"token sequence {tuple(tokens.shape[-2:])} does not match "
                f"M={m}, P={p}, C2={self.c2}"
            )
        patches = tokens.reshape(b * m, p, p, c2).permute(0, 3, 1, 2)  # (B*M, C2, P, P)
        upsampled = F.interpolate(patches, size=(h, w), mode="bilinear", align_corners=True)
        complement = self.upsample_conv(upsampled).reshape(b, m, self.c1, h, w)
        return complement[0] if squeeze else complement

    def conv_fuse(self, original: torch.Tensor, complement: torch.Tensor) -> torch.Tensor:
        """Channel-concatenate the two map stacks, 1x1 conv to C1, GELU."""
        if original.shape != complement.shape:
            raise ValidationError(
                f"original {tuple(original.shape)} and complement "
                f"{tuple(complement.shape)} differ in shape"
            )
        original, squeeze = self._batched(original)
        complement, _ = self._batched(complement)
        b, m, c, h, w = original.shape
        stacked = torch.cat([original, complement], dim=2).reshape(b * m, 2 * c, h, w)
        fused = self.act(self.fuse_conv(stacked)).reshape(b, m, c, h, w)
        return fused[0] if squeeze else fused

    def generate_prompts(self, fused: torch.Tensor, standardize: bool | None = None) -> torch.Tensor:
        """3x3 conv to 3 channels, GELU, then per-channel standardization."""
        fused, squeeze = self._batched(fused)
        b, m, c, h, w = fused.shape
        prompts = self.act(self.prompt_conv(fused.reshape(b * m, c, h, w)))
        prompts = prompts.reshape(b, m, 3, h, w)
        if self.standardize if standardize is None else standardize:
            prompts = standardize_prompts(prompts, self.prompt_mean, self.prompt_std)
        return prompts[0] if squeeze else prompts

    def forward(self, maps: torch.Tensor, mode: str = "full") -> torch.Tensor:
        """Run one ablation configuration end to end.

        maps: (B?, M, C1, H, W) -> prompts (B?, M, 3, H, W).
        """
        if mode not in MODES:
            raise ValidationError(f"unknown mode {mode!r}; choose from {MODES}")
        if mode == "baseline":
            return self.generate_prompts(maps)
        h, w = maps.shape[-2:]
        seq = self.attend(self.tokenize(maps))
        complement = self.detokenize_upsample(seq, h, w)
        if mode == "attention_only":
            return self.generate_prompts(maps + complement)
        return self.generate_prompts(self.conv_fuse(maps, complement))
