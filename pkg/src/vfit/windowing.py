"""Partition math for windowed attention.

Feature maps are ``[C, T, H, W]`` or batched ``[B, C, T, H, W]``. Every
partition returns a :class:`TokenGroups` whose ``data`` is ``[G, N, C]``
and whose ``layout`` is enough to put the tokens back where they came from.

The ``*_cl`` helpers operate on channels-last ``[B, T, H, W, C]`` tensors and
are what the attention blocks use internally to avoid repeated permutes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch

PartitionKind = Literal["cube", "window", "temporal"]

# exp(-1e4) underflows to exactly 0 in float32 and float64
MASK_VALUE = -1e4


class DivisibilityError(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    kind: PartitionKind
    window: int
    shape: tuple[int, int, int, int, int]  # B, C, T, H, W
    batched: bool


@dataclass
class TokenGroups:
    data: torch.Tensor  # [G, N, C]
    layout: Layout

    @property
    def num_groups(self) -> int:
        return self.data.shape[0]

    @property
    def group_size(self) -> int:
        return self.data.shape[1]


def _check_divisible(H: int, W: int, M: int) -> None:
    if M < 1:
        raise ValueError(f"window size must be positive, got {M}")
    if H % M:
        raise DivisibilityError(f"height {H} is not divisible by window size {M}")
    if W % M:
        raise DivisibilityError(f"width {W} is not divisible by window size {M}")


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 4:
        return x.unsqueeze(0), False
    if x.dim() == 5:
        return x, True
    raise ValueError(f"expected [C,T,H,W] or [B,C,T,H,W], got shape {tuple(x.shape)}")


# channels-last core -------------------------------------------------------

def cubes_cl(x: torch.Tensor, M: int) -> torch.Tensor:
    """[B,T,H,W,C] -> [B*(H/M)*(W/M), T*M*M, C]"""
    B, T, H, W, C = x.shape
    _check_divisible(H, W, M)
    x = x.view(B, T, H // M, M, W // M, M, C)
    x = x.permute(0, 2, 4, 1, 3, 5, 6)
    return x.reshape(-1, T * M * M, C)


def merge_cubes_cl(g: torch.Tensor, M: int, B: int, T: int, H: int, W: int) -> torch.Tensor:
    C = g.shape[-1]
    x = g.view(B, H // M, W // M, T, M, M, C)
    x = x.permute(0, 3, 1, 4, 2, 5, 6)
    return x.reshape(B, T, H, W, C)


def windows_cl(x: torch.Tensor, M: int) -> torch.Tensor:
    """[B,T,H,W,C] -> [B*T*(H/M)*(W/M), M*M, C]"""
    B, T, H, W, C = x.shape
    _check_divisible(H, W, M)
    x = x.view(B, T, H // M, M, W // M, M, C)
    x = x.permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(-1, M * M, C)


def merge_windows_cl(g: torch.Tensor, M: int, B: int, T: int, H: int, W: int) -> torch.Tensor:
    C = g.shape[-1]
    x = g.view(B, T, H // M, W // M, M, M, C)
    x = x.permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, T, H, W, C)


def temporal_cl(x: torch.Tensor) -> torch.Tensor:
    """[B,T,H,W,C] -> [B*H*W, T, C]"""
    B, T, H, W, C = x.shape
    return x.permute(0, 2, 3, 1, 4).reshape(-1, T, C)


def merge_temporal_cl(g: torch.Tensor, B: int, T: int, H: int, W: int) -> torch.Tensor:
    C = g.shape[-1]
    return g.view(B, H, W, T, C).permute(0, 3, 1, 2, 4)


# public FeatureMap API ------------------------------------------------------

def _partition(x: torch.Tensor, kind: PartitionKind, M: int) -> TokenGroups:
    xb, batched = _as_batched(x)
    B, C, T, H, W = xb.shape
    cl = xb.permute(0, 2, 3, 4, 1)
    if kind == "cube":
        data = cubes_cl(cl, M)
    elif kind == "window":
        data = windows_cl(cl, M)
    else:
        data = temporal_cl(cl)
    return TokenGroups(data, Layout(kind, M, (B, C, T, H, W), batched))


def partition_cubes(x: torch.Tensor, M: int) -> TokenGroups:
    """Split into ``HW/M^2`` cubes of ``T x M x M`` tokens each (per batch item)."""
    return _partition(x, "cube", M)


def partition_windows(x: torch.Tensor, M: int) -> TokenGroups:
    """Split every frame into ``M x M`` windows; ``G = T*HW/M^2`` per batch item."""
    return _partition(x, "window", M)


def partition_temporal(x: torch.Tensor) -> TokenGroups:
    """One group per pixel holding its ``T`` feature vectors in time order."""
    return _partition(x, "temporal", 1)


def merge(groups: TokenGroups) -> torch.Tensor:
    """Inverse of any of the partition functions."""
    lay = groups.layout
    B, C, T, H, W = lay.shape
    g = groups.data
    if lay.kind == "cube":
        cl = merge_cubes_cl(g, lay.window, B, T, H, W)
    elif lay.kind == "window":
        cl = merge_windows_cl(g, lay.window, B, T, H, W)
    else:
        cl = merge_temporal_cl(g, B, T, H, W)
    out = cl.permute(0, 4, 1, 2, 3).contiguous()
    return out if lay.batched else out[0]


def cyclic_shift(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Roll the two trailing spatial axes of a FeatureMap; time is untouched."""
    if dy == 0 and dx == 0:
        return x
    return torch.roll(x, shifts=(dy, dx), dims=(-2, -1))


def region_labels(H: int, W: int, M: int, shift: int) -> torch.Tensor:
    """Label every position of the shifted ``H x W`` grid with its pre-shift region.

    Positions that were contiguous before the top-left cyclic shift share a
    label; the wrap seam introduced by the roll separates labels.
    """
    labels = torch.zeros(H, W, dtype=torch.long)
    if shift == 0:
        return labels
    spans = (slice(0, -M), slice(-M, -shift), slice(-shift, None))
    n = 0
    for hs in spans:
        for ws in spans:
            labels[hs, ws] = n
            n += 1
    return labels


def shift_mask(H: int, W: int, M: int, shift: int, kind: str = "window", T: int = 1) -> torch.Tensor:
    """Additive attention mask for a shifted partition.

    Returns ``[nW, N, N]`` with ``nW = HW/M^2`` windows per frame; the same
    mask applies to every (batch, time) slice in window mode. ``N`` is
    ``M*M`` for windows and ``T*M*M`` for cubes.
    """
    if shift < 0 or shift >= M:
        raise ValueError(f"invalid shift {shift} for window size {M}")
    _check_divisible(H, W, M)
    labels = region_labels(H, W, M, shift)
    lab = labels.view(H // M, M, W // M, M).permute(0, 2, 1, 3).reshape(-1, M * M)
    if kind == "cube":
        lab = lab.repeat(1, T)
    elif kind != "window":
        raise ValueError(f"unknown mask kind {kind!r}")
    same = lab[:, :, None] == lab[:, None, :]
    mask = torch.zeros(same.shape, dtype=torch.float32)
    mask.masked_fill_(~same, MASK_VALUE)
    return mask
