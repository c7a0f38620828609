"""Windowed multi-head self-attention and the backbone block variants."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import windowing as win
from .config import ConfigError


def heads_for(channels: int, per_head: int = 32) -> int:
    return max(1, channels // per_head)


# instrumentation ------------------------------------------------------------

@dataclass
class PairCounter:
    pairs: int = 0
    score_entries: int = 0


_counters: list[PairCounter] = []


@contextlib.contextmanager
def count_attention_pairs() -> Iterator[PairCounter]:
    """Count query-key pairs evaluated by every ``window_msa`` call in scope."""
    c = PairCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


def _record(G: int, N: int, heads: int) -> None:
    for c in _counters:
        c.pairs += G * N * N
        c.score_entries += G * heads * N * N


# core -------------------------------------------------------------------------

def window_msa(
    x: torch.Tensor,
    qkv_weight: torch.Tensor,
    qkv_bias: Optional[torch.Tensor],
    proj_weight: torch.Tensor,
    proj_bias: Optional[torch.Tensor],
    heads: int,
    pos_bias: Optional[torch.Tensor] = None,
    mask: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """Multi-head self-attention inside each token group.

    x: [G, N, C]. ``pos_bias`` is [heads, N, N]. ``mask`` is additive with shape
    [nW, N, N] where ``G`` is a multiple of ``nW`` (group ``g`` uses mask
    ``g % nW``).
    """
    G, N, C = x.shape
    if C % heads:
        raise ConfigError(f"{C} channels not divisible by {heads} heads")
    d = C // heads
    qkv = F.linear(x, qkv_weight, qkv_bias).view(G, N, 3, heads, d).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q * d ** -0.5) @ k.transpose(-2, -1)  # [G, h, N, N]
    if pos_bias is not None:
        scores = scores + pos_bias.unsqueeze(0)
    if mask is not None:
        nW = mask.shape[0]
        if mask.shape[1:] != (N, N) or G % nW:
            raise ValueError(f"mask {tuple(mask.shape)} does not match groups [{G},{N},{N}]")
        scores = scores.view(G // nW, nW, heads, N, N) + mask.to(scores.dtype).unsqueeze(1).unsqueeze(0)
        scores = scores.view(G, heads, N, N)
    attn = scores.softmax(dim=-1)
    _record(G, N, heads)
    out = (attn @ v).transpose(1, 2).reshape(G, N, C)
    out = F.linear(out, proj_weight, proj_bias)
    if return_weights:
        return out, attn
    return out


def relative_position_index(extent: Sequence[int]) -> torch.Tensor:
    """[N, N] index into a bias table of size prod(2*e-1) for a token grid."""
    grids = torch.meshgrid(*[torch.arange(e) for e in extent], indexing="ij")
    coords = torch.stack([g.flatten() for g in grids])  # [D, N]
    rel = coords[:, :, None] - coords[:, None, :]
    index = torch.zeros(rel.shape[1:], dtype=torch.long)
    for axis, e in enumerate(extent):
        index = index * (2 * e - 1) + rel[axis] + (e - 1)
    return index


class WindowAttention(nn.Module):
    """MSA over token groups laid out on a fixed grid ``extent``.

    ``extent`` is the per-group token grid, e.g. ``(M, M)`` for spatial windows,
    ``(T,)`` for temporal vectors or ``(T, M, M)`` for cubes. It is only used
    for the learned relative-position bias.
    """

    def __init__(self, dim: int, heads: int, extent: Sequence[int] = (), rel_bias: bool = True):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"{dim} channels not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.extent = tuple(extent)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        if rel_bias and self.extent:
            size = math.prod(2 * e - 1 for e in self.extent)
            self.bias_table = nn.Parameter(torch.zeros(size, heads))
            nn.init.trunc_normal_(self.bias_table, std=0.02)
            self.register_buffer("bias_index", relative_position_index(self.extent), persistent=False)
        else:
            self.bias_table = None

    def pos_bias(self, N: int) -> Optional[torch.Tensor]:
        if self.bias_table is None:
            return None
        if N != self.bias_index.shape[0]:
            raise ConfigError(f"group size {N} does not match attention extent {self.extent}")
        return self.bias_table[self.bias_index.view(-1)].view(N, N, -1).permute(2, 0, 1)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None, return_weights: bool = False):
        return window_msa(
            x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
            self.heads, self.pos_bias(x.shape[1]), mask, return_weights,
        )


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def _init_transformer(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _pad_amount(n: int, m: int) -> int:
    return (-n) % m


def pad_spatial_cl(x: torch.Tensor, m: int) -> tuple[torch.Tensor, int, int]:
    """Pad a channels-last [B,T,H,W,C] tensor so H and W are multiples of ``m``.

    Reflect padding where it is defined (pad < size), replicate otherwise.
    """
    B, T, H, W, C = x.shape
    ph, pw = _pad_amount(H, m), _pad_amount(W, m)
    if ph == 0 and pw == 0:
        return x, H, W
    mode = "reflect" if ph < H and pw < W else "replicate"
    y = x.permute(0, 4, 1, 2, 3)
    y = F.pad(y, (0, pw, 0, ph, 0, 0), mode=mode)
    return y.permute(0, 2, 3, 4, 1), H, W


class _Block(nn.Module):
    """Blocks take FeatureMaps [B,C,T,H,W]; stages chain ``forward_cl`` instead."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        unbatched = x.dim() == 4
        if unbatched:
            x = x.unsqueeze(0)
        y = self.forward_cl(x.permute(0, 2, 3, 4, 1)).permute(0, 4, 1, 2, 3).contiguous()
        return y[0] if unbatched else y

    def forward_cl(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class SepSTSBlock(_Block):
    """Spatial window MSA, then temporal MSA per pixel, then MLP.

    Each sub-layer is pre-normalized and residual. With ``shifted`` the spatial
    windows are displaced by ``M // 2`` towards the top-left.
    """

    def __init__(self, dim: int, heads: int, window: int, frames: int, shifted: bool = False,
                 rel_bias: bool = True, mlp_ratio: int = 4, temporal_first: bool = False):
        super().__init__()
        self.window = window
        self.frames = frames
        self.shift = window // 2 if shifted else 0
        self.temporal_first = temporal_first
        self.norm1 = nn.LayerNorm(dim)
        self.spatial_attn = WindowAttention(dim, heads, (window, window), rel_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.temporal_attn = WindowAttention(dim, heads, (frames,), rel_bias)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        _init_transformer(self)

    def _spatial(self, x: torch.Tensor) -> torch.Tensor:
        B, T, H, W, C = x.shape
        M = self.window
        h = self.norm1(x)
        shift = self.shift if max(H, W) > M else 0
        mask = None
        if shift:
            h = torch.roll(h, (-shift, -shift), dims=(2, 3))
            mask = win.shift_mask(H, W, M, shift, "window").to(x.device)
        g = self.spatial_attn(win.windows_cl(h, M), mask)
        h = win.merge_windows_cl(g, M, B, T, H, W)
        if shift:
            h = torch.roll(h, (shift, shift), dims=(2, 3))
        return x + h

    def _temporal(self, x: torch.Tensor) -> torch.Tensor:
        B, T, H, W, C = x.shape
        g = self.temporal_attn(win.temporal_cl(self.norm2(x)))
        return x + win.merge_temporal_cl(g, B, T, H, W)

    def forward_cl(self, x: torch.Tensor) -> torch.Tensor:
        x, H, W = pad_spatial_cl(x, self.window)
        if self.temporal_first:
            x = self._spatial(self._temporal(x))
        else:
            x = self._temporal(self._spatial(x))
        x = x + self.mlp(self.norm3(x))
        return x[:, :, :H, :W].contiguous()


class STSBlock(_Block):
    """Joint MSA over ``T x M x M`` cubes followed by an MLP."""

    def __init__(self, dim: int, heads: int, window: int, frames: int, shifted: bool = False,
                 rel_bias: bool = True, mlp_ratio: int = 4):
        super().__init__()
        self.window = window
        self.frames = frames
        self.shift = window // 2 if shifted else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, (frames, window, window), rel_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        _init_transformer(self)

    def forward_cl(self, x: torch.Tensor) -> torch.Tensor:
        x, H0, W0 = pad_spatial_cl(x, self.window)
        B, T, H, W, C = x.shape
        M = self.window
        h = self.norm1(x)
        shift = self.shift if max(H, W) > M else 0
        mask = None
        if shift:
            h = torch.roll(h, (-shift, -shift), dims=(2, 3))
            mask = win.shift_mask(H, W, M, shift, "cube", T).to(x.device)
        g = self.attn(win.cubes_cl(h, M), mask)
        h = win.merge_cubes_cl(g, M, B, T, H, W)
        if shift:
            h = torch.roll(h, (shift, shift), dims=(2, 3))
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x[:, :, :H0, :W0].contiguous()


class GlobalPatchBlock(_Block):
    """Global MSA where every ``P x P`` patch of one frame is a single token."""

    def __init__(self, dim: int, patch: int, heads: Optional[int] = None, mlp_ratio: int = 4):
        super().__init__()
        self.patch = patch
        token_dim = dim * patch * patch
        self.norm1 = nn.LayerNorm(token_dim)
        self.attn = WindowAttention(token_dim, heads or heads_for(token_dim), (), rel_bias=False)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        _init_transformer(self)

    def fold(self, x: torch.Tensor) -> torch.Tensor:
        """[B,T,H,W,C] -> [B, T*(H/P)*(W/P), P*P*C]"""
        B, T, H, W, C = x.shape
        P = self.patch
        x = x.view(B, T, H // P, P, W // P, P, C).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, T * (H // P) * (W // P), P * P * C)

    def unfold(self, t: torch.Tensor, T: int, H: int, W: int) -> torch.Tensor:
        B = t.shape[0]
        P = self.patch
        C = t.shape[-1] // (P * P)
        x = t.view(B, T, H // P, W // P, P, P, C).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, T, H, W, C)

    def forward_cl(self, x: torch.Tensor) -> torch.Tensor:
        x, H0, W0 = pad_spatial_cl(x, self.patch)
        B, T, H, W, C = x.shape
        x = x + self.unfold(self.attn(self.norm1(self.fold(x))), T, H, W)
        x = x + self.mlp(self.norm2(x))
        return x[:, :, :H0, :W0].contiguous()


class ConvResBlock3d(_Block):
    """Two 3x3x3 convolutions with a ReLU between them, plus identity skip."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv3d(dim, dim, 3, padding=1)
        self.act = nn.ReLU()
        self.conv2 = nn.Conv3d(dim, dim, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        unbatched = x.dim() == 4
        if unbatched:
            x = x.unsqueeze(0)
        y = x + self.conv2(self.act(self.conv1(x)))
        return y[0] if unbatched else y

    def forward_cl(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x.permute(0, 4, 1, 2, 3)).permute(0, 2, 3, 4, 1)


BLOCK_KINDS = ("sepsts", "sts", "global", "conv3d")


def make_block(kind: str, dim: int, window: int, frames: int, shifted: bool,
               rel_bias: bool = True, mlp_ratio: int = 4, patch: int = 4,
               temporal_first: bool = False) -> _Block:
    heads = heads_for(dim)
    if kind == "sepsts":
        return SepSTSBlock(dim, heads, window, frames, shifted, rel_bias, mlp_ratio, temporal_first)
    if kind == "sts":
        return STSBlock(dim, heads, window, frames, shifted, rel_bias, mlp_ratio)
    if kind == "global":
        return GlobalPatchBlock(dim, patch, mlp_ratio=mlp_ratio)
    if kind == "conv3d":
        return ConvResBlock3d(dim)
    raise ConfigError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")


# cost model -------------------------------------------------------------------

@dataclass(frozen=True)
class CostReport:
    mode: str
    pair_count: int
    score_memory: int


def attention_cost(T: int, M: int, H: int, W: int, mode: str, P: int = 4, heads: int = 1) -> CostReport:
    """Exact query-key pair counts of one attention layer on a ``T x H x W`` map.

    ``mode`` is ``"sts"``, ``"sepsts"`` or ``"global"`` (patch size ``P``).
    ``score_memory`` is the number of stored softmax entries over ``heads``.
    """
    mode = mode.lower()
    if mode == "global":
        win._check_divisible(H, W, P)
        pairs = (T * H * W // (P * P)) ** 2
    else:
        win._check_divisible(H, W, M)
        if mode == "sts":
            pairs = (H * W // (M * M)) * (T * M * M) ** 2
        elif mode == "sepsts":
            pairs = (T * H * W // (M * M)) * (M * M) ** 2 + H * W * T * T
        else:
            raise ValueError(f"unknown attention mode {mode!r}")
    return CostReport(mode, pairs, pairs * heads)


def per_element_interactions(T: int, M: int, mode: str) -> int:
    """Keys each query attends to: ``T*M*M`` for STS, ``T + M*M`` for Sep-STS."""
    mode = mode.lower()
    if mode == "sts":
        return T * M * M
    if mode == "sepsts":
        return T + M * M
    raise ValueError(f"unknown attention mode {mode!r}")
