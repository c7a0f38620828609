"""Pure torch deformable aggregation; autograd supplies the backward pass."""
from __future__ import annotations

import torch


def deform_aggregate(img: torch.Tensor, weight: torch.Tensor, alpha: torch.Tensor,
                     beta: torch.Tensor, base_x: torch.Tensor, base_y: torch.Tensor) -> torch.Tensor:
    B, C, H, W = img.shape
    K = weight.shape[1]
    dt = img.dtype
    xs = torch.arange(W, dtype=dt, device=img.device).view(1, 1, 1, W) + base_x.to(dt).view(1, K, 1, 1) + alpha
    ys = torch.arange(H, dtype=dt, device=img.device).view(1, 1, H, 1) + base_y.to(dt).view(1, K, 1, 1) + beta
    x0f = torch.floor(xs)
    y0f = torch.floor(ys)
    fx = (xs - x0f).unsqueeze(1)
    fy = (ys - y0f).unsqueeze(1)
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(0, W - 1)
    y1 = (y0 + 1).clamp(0, H - 1)
    x0 = x0.clamp(0, W - 1)
    y0 = y0.clamp(0, H - 1)

    flat = img.reshape(B, C, H * W)

    def tap(yi, xi):
        idx = (yi * W + xi).view(B, 1, K * H * W).expand(B, C, K * H * W)
        return flat.gather(2, idx).view(B, C, K, H, W)

    val = ((1 - fx) * (1 - fy) * tap(y0, x0) + fx * (1 - fy) * tap(y0, x1)
           + (1 - fx) * fy * tap(y1, x0) + fx * fy * tap(y1, x1))
    return (val * weight.unsqueeze(1)).sum(2)
