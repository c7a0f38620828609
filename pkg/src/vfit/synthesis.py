"""Multi-scale frame synthesis from deformable kernels and blending masks."""
from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .deform import DeformableKernel, deform_aggregate


def downsample(frames: torch.Tensor, factor: int) -> torch.Tensor:
    """Bilinear resize of ``[..., H, W]`` by ``1/factor`` (no antialiasing)."""
    if factor == 1:
        return frames
    H, W = frames.shape[-2:]
    if H % factor or W % factor:
        raise ValueError(f"frame size {H}x{W} is not divisible by {factor}")
    lead = frames.shape[:-2]
    x = frames.reshape(-1, 1, H, W)
    x = F.interpolate(x, size=(H // factor, W // factor), mode="bilinear", align_corners=False)
    return x.reshape(*lead, H // factor, W // factor)


def build_pyramid(frames: torch.Tensor, levels: int = 3) -> list[torch.Tensor]:
    """Frames downsampled by ``2**l`` for ``l < levels``; level 0 is the input itself."""
    H, W = frames.shape[-2:]
    f = 2 ** (levels - 1)
    if H % f or W % f:
        raise ValueError(f"frame size {H}x{W} must be divisible by {f}")
    return [frames if l == 0 else downsample(frames, 2 ** l) for l in range(levels)]


def upsample2(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def fuse_multiscale(outputs: Sequence[Optional[torch.Tensor]]) -> list[torch.Tensor]:
    """Coarse-to-fine accumulation ``I^l = up(I^{l+1}) + O^l`` starting from zero.

    ``outputs`` is ``[O0, O1, O2]`` (fine to coarse, ``[B,3,h,w]``); ``None``
    entries are skipped. Returns the estimates ``[I0, I1, ...]`` for the levels
    that were computed; ``I0`` is the interpolated frame.
    """
    est: Optional[torch.Tensor] = None
    chain = []
    for o in reversed(list(outputs)):
        if o is None:
            if est is not None:
                est = upsample2(est)
            continue
        if est is not None:
            if est.shape[-2] * 2 != o.shape[-2] or est.shape[-1] * 2 != o.shape[-1]:
                raise ValueError(f"scale chain mismatch: {tuple(est.shape)} -> {tuple(o.shape)}")
            est = upsample2(est) + o
        else:
            est = o
        chain.append(est)
    if est is None:
        raise ValueError("no synthesis outputs to fuse")
    return chain[::-1]


class _SmallCNN(nn.Sequential):
    def __init__(self, cin: int, hidden: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, hidden, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, cout, 3, padding=1),
        )


class SynBlock(nn.Module):
    """Kernel/offset/mask prediction and blending at one scale."""

    def __init__(self, channels: int, frames: int, K: int = 25):
        super().__init__()
        self.frames = frames
        self.K = K
        self.weight_head = _SmallCNN(channels, channels, K)
        self.alpha_head = _SmallCNN(channels, channels, K)
        self.beta_head = _SmallCNN(channels, channels, K)
        self.mask_head = _SmallCNN(channels * frames, channels, frames)
        for head in (self.alpha_head, self.beta_head):
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)

    def predict_kernels(self, feat: torch.Tensor) -> DeformableKernel:
        """Per-frame features ``[N, C, H, W]`` -> kernels ``[N, K, H, W]``."""
        return DeformableKernel(self.weight_head(feat), self.alpha_head(feat), self.beta_head(feat))

    def predict_masks(self, feat: torch.Tensor) -> torch.Tensor:
        """Features ``[B, C, T, H, W]`` -> masks ``[B, T, H, W]`` summing to 1 over T."""
        B, C, T, H, W = feat.shape
        stacked = feat.transpose(1, 2).reshape(B, T * C, H, W)
        return self.mask_head(stacked).softmax(dim=1)

    def forward(self, feat: torch.Tensor, frames: torch.Tensor, return_parts: bool = False):
        B, C, T, H, W = feat.shape
        if frames.shape[0] != B or frames.shape[1] != T or frames.shape[-2:] != (H, W):
            raise ValueError(f"features {tuple(feat.shape)} and frames {tuple(frames.shape)} are not aligned")
        per_frame = feat.transpose(1, 2).reshape(B * T, C, H, W)
        kern = self.predict_kernels(per_frame)
        agg = deform_aggregate(frames.reshape(B * T, 3, H, W).to(feat.dtype), kern.weight, kern.alpha, kern.beta)
        agg = agg.view(B, T, 3, H, W)
        masks = self.predict_masks(feat)
        out = (masks.unsqueeze(2) * agg).sum(1)
        if return_parts:
            return out, {"kernel": kern, "masks": masks, "per_frame": agg}
        return out


def synthesize_scale(feat: torch.Tensor, frames: torch.Tensor, block: SynBlock) -> torch.Tensor:
    """``O = sum_t B_t * aggregate(I_t, kernels(F_t))`` at one scale."""
    return block(feat, frames)
