"""Shallow embedding and the encoder-decoder that produces the feature pyramid."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .attention import make_block
from .config import ModelConfig


class FeaturePyramid(NamedTuple):
    f0: torch.Tensor  # [B, C0, T, H, W]
    f1: torch.Tensor  # [B, C1, T, H/2, W/2]
    f2: torch.Tensor  # [B, C2, T, H/4, W/4]


class Embedding(nn.Module):
    """3x3x3 convolution over (time, height, width) on RGB frames."""

    def __init__(self, channels: int, frames: int):
        super().__init__()
        self.frames = frames
        self.conv = nn.Conv3d(3, channels, 3, padding=1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: [B, T, 3, H, W]
        if frames.dim() != 5 or frames.shape[2] != 3:
            raise ValueError(f"expected frames [B,T,3,H,W], got {tuple(frames.shape)}")
        if frames.shape[1] != self.frames:
            raise ValueError(f"expected {self.frames} frames, got {frames.shape[1]}")
        return self.conv(frames.transpose(1, 2))


class EncoderStage(nn.Module):
    def __init__(self, cin: int, cout: int, depth: int, cfg: ModelConfig):
        super().__init__()
        self.down = nn.Conv3d(cin, cout, 3, stride=(1, 2, 2), padding=1)
        self.blocks = nn.ModuleList(
            make_block(cfg.block_kind, cout, cfg.window, cfg.frames, shifted=bool(i % 2),
                       rel_bias=cfg.rel_bias, mlp_ratio=cfg.mlp_ratio, patch=cfg.patch_size,
                       temporal_first=cfg.temporal_first)
            for i in range(depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.down(x)
        if not self.blocks:
            return x
        h = x.permute(0, 2, 3, 4, 1)
        for blk in self.blocks:
            h = blk.forward_cl(h)
        return h.permute(0, 4, 1, 2, 3).contiguous()


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = (cfg.embed_channels,) + tuple(cfg.stage_channels)
        self.stages = nn.ModuleList(
            EncoderStage(chans[i], chans[i + 1], cfg.stage_blocks[i], cfg) for i in range(4)
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        H, W = x.shape[-2:]
        if H % 16 or W % 16:
            raise ValueError(f"encoder input {H}x{W} is not divisible by 16")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    @property
    def num_blocks(self) -> int:
        return sum(len(s.blocks) for s in self.stages)


class UpFuse(nn.Module):
    """Spatial x2 deconvolution, concatenation with the skip, 1x1x1 fusion."""

    def __init__(self, cin: int, cskip: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cskip, (3, 4, 4), stride=(1, 2, 2), padding=1)
        self.fuse = nn.Conv3d(2 * cskip, cskip, 1)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.act(self.up(x))
        if x.shape[2:] != skip.shape[2:]:
            raise ValueError(f"upsampled {tuple(x.shape)} does not match skip {tuple(skip.shape)}")
        return self.act(self.fuse(torch.cat([x, skip], dim=1)))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0 = cfg.embed_channels
        c1, c2, c3, c4 = cfg.stage_channels
        self.up3 = UpFuse(c4, c3)
        self.up2 = UpFuse(c3, c2)
        self.up1 = UpFuse(c2, c1)
        # fourth upsampling brings F0 back to full resolution next to the embedding
        self.up0 = UpFuse(c1, c0)

    def forward(self, emb: torch.Tensor, enc: list[torch.Tensor]) -> FeaturePyramid:
        e1, e2, e3, e4 = enc
        d3 = self.up3(e4, e3)
        f2 = self.up2(d3, e2)
        f1 = self.up1(f2, e1)
        f0 = self.up0(f1, emb)
        return FeaturePyramid(f0, f1, f2)


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = Embedding(cfg.embed_channels, cfg.frames)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self._init_convs()

    def _init_convs(self):
        # variance-preserving init; the default shrinks activations at every
        # conv and leaves full-resolution features nearly flat
        # (attention/residual blocks keep their own init)
        convs = [self.embed.conv] + [s.down for s in self.encoder.stages] + list(self.decoder.modules())
        for m in convs:
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                mode = "fan_out" if isinstance(m, nn.ConvTranspose3d) else "fan_in"
                nn.init.kaiming_normal_(m.weight, mode=mode, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, frames: torch.Tensor) -> FeaturePyramid:
        emb = self.embed(frames)
        return self.decoder(emb, self.encoder(emb))
