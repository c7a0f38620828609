"""The full interpolation network: embedding, backbone, three SynBlocks."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone
from .config import ModelConfig
from .synthesis import SynBlock, build_pyramid, fuse_multiscale


def pad_to_multiple(frames: torch.Tensor, m: int = 16) -> tuple[torch.Tensor, int, int]:
    """Reflect-pad the trailing H, W of ``frames`` up to multiples of ``m``."""
    H, W = frames.shape[-2:]
    ph, pw = (-H) % m, (-W) % m
    if ph == 0 and pw == 0:
        return frames, H, W
    lead = frames.shape[:-3]
    x = frames.reshape(-1, *frames.shape[-3:])
    mode = "reflect" if ph < H and pw < W else "replicate"
    x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x.reshape(*lead, *x.shape[-3:]), H, W


class VFIT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        chans = (cfg.embed_channels, cfg.stage_channels[0], cfg.stage_channels[1])
        n = 1 if cfg.single_scale else 3
        self.synblocks = nn.ModuleList(SynBlock(chans[l], cfg.frames, cfg.kernel_points) for l in range(n))

    def forward(self, frames: torch.Tensor, return_all: bool = False):
        """frames ``[B, T, 3, H, W]`` in [0, 1] -> middle frame ``[B, 3, H, W]``.

        With ``return_all`` also returns the per-level estimates (fine to
        coarse) and SynBlock internals.
        """
        x, H, W = pad_to_multiple(frames, 16)
        feats = self.backbone(x)
        pyr = build_pyramid(x, 3)
        outs, parts = [], []
        for l, blk in enumerate(self.synblocks):
            o, p = blk(feats[l], pyr[l], return_parts=True)
            outs.append(o)
            parts.append(p)
        chain = fuse_multiscale(outs + [None] * (3 - len(outs)))
        pred = chain[0][..., :H, :W]
        if return_all:
            levels = [c[..., : -(-H // 2 ** l), : -(-W // 2 ** l)] for l, c in enumerate(chain)]
            return pred, {"levels": levels, "synthesis": parts, "outputs": outs}
        return pred


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
