"""Deformable kernel aggregation with a compiled core and a torch fallback.

The compiled extension is used when it imports and ``VFIT_PURE_PYTHON`` is
unset; otherwise the vectorised torch version runs. Both compute

    O(x, y) = sum_k W[k, y, x] * I(x + bx[k] + alpha[k, y, x], y + by[k] + beta[k, y, x])

with bilinear interpolation and border-clamped neighbour reads. ``bx, by`` is
the centred ``ceil(sqrt(K))``-wide stencil, so zero offsets sample a regular grid.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from . import _deform_py

try:
    if os.environ.get("VFIT_PURE_PYTHON"):
        raise ImportError("pure python requested")
    from . import _deform_ext
except ImportError:
    _deform_ext = None

BACKEND = "compiled" if _deform_ext is not None else "python"


@dataclass
class DeformableKernel:
    weight: torch.Tensor  # [K, H, W] or [B, K, H, W]
    alpha: torch.Tensor  # horizontal offsets in pixels
    beta: torch.Tensor  # vertical offsets in pixels

    def __post_init__(self):
        if not (self.weight.shape == self.alpha.shape == self.beta.shape):
            raise ValueError(
                f"kernel shapes disagree: {tuple(self.weight.shape)}, "
                f"{tuple(self.alpha.shape)}, {tuple(self.beta.shape)}")

    @property
    def K(self) -> int:
        return self.weight.shape[-3]


@lru_cache(maxsize=None)
def _stencil(K: int) -> tuple[np.ndarray, np.ndarray]:
    side = math.ceil(math.sqrt(K))
    k = np.arange(K)
    bx = (k % side - side // 2).astype(np.float64)
    by = (k // side - side // 2).astype(np.float64)
    bx.setflags(write=False)
    by.setflags(write=False)
    return bx, by


def base_grid(K: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Stencil displacements ``(bx, by)`` for ``K`` sampling locations."""
    bx, by = _stencil(K)
    return torch.from_numpy(bx.copy()), torch.from_numpy(by.copy())


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().contiguous().cpu().numpy()


class _CompiledDeform(torch.autograd.Function):
    @staticmethod
    def forward(ctx, img, weight, alpha, beta):
        bx, by = _stencil(weight.shape[1])
        out = np.zeros(img.shape, dtype=_np(img).dtype)
        _deform_ext.forward(_np(img), _np(weight), _np(alpha), _np(beta), bx, by, out)
        ctx.save_for_backward(img, weight, alpha, beta)
        return torch.from_numpy(out).to(img.device)

    @staticmethod
    def backward(ctx, grad_out):
        img, weight, alpha, beta = ctx.saved_tensors
        bx, by = _stencil(weight.shape[1])
        dt = _np(img).dtype
        g_img = np.zeros(img.shape, dtype=dt)
        g_w = np.zeros(weight.shape, dtype=dt)
        g_a = np.zeros(weight.shape, dtype=dt)
        g_b = np.zeros(weight.shape, dtype=dt)
        _deform_ext.backward(_np(grad_out.to(img.dtype)), _np(img), _np(weight), _np(alpha), _np(beta),
                             bx, by, g_img, g_w, g_a, g_b, bool(ctx.needs_input_grad[0]))
        dev = img.device
        return (torch.from_numpy(g_img).to(dev) if ctx.needs_input_grad[0] else None,
                torch.from_numpy(g_w).to(dev), torch.from_numpy(g_a).to(dev), torch.from_numpy(g_b).to(dev))


def deform_aggregate(img: torch.Tensor, weight: torch.Tensor, alpha: torch.Tensor,
                     beta: torch.Tensor, backend: str | None = None) -> torch.Tensor:
    """Batched aggregation: img [B,C,H,W], weight/alpha/beta [B,K,H,W]."""
    backend = backend or BACKEND
    if img.dim() != 4 or weight.dim() != 4:
        raise ValueError("expected img [B,C,H,W] and kernels [B,K,H,W]")
    if img.shape[0] != weight.shape[0] or img.shape[2:] != weight.shape[2:]:
        raise ValueError(f"image {tuple(img.shape)} and kernel {tuple(weight.shape)} are not aligned")
    if not (weight.shape == alpha.shape == beta.shape):
        raise ValueError("weight, alpha and beta must share a shape")
    dt = img.dtype
    weight, alpha, beta = weight.to(dt), alpha.to(dt), beta.to(dt)
    if backend == "compiled":
        if _deform_ext is None:
            raise RuntimeError("compiled deformable kernel is not available")
        return _CompiledDeform.apply(img, weight, alpha, beta)
    if backend == "python":
        bx, by = base_grid(weight.shape[1])
        return _deform_py.deform_aggregate(img, weight, alpha, beta, bx, by)
    raise ValueError(f"unknown backend {backend!r}")


def deformable_aggregate(frame: torch.Tensor, kernel: DeformableKernel, backend: str | None = None) -> torch.Tensor:
    """Aggregate one frame ``[C,H,W]`` (or a batch ``[B,C,H,W]``) with ``kernel``."""
    if frame.dim() == 3:
        return deform_aggregate(frame[None], kernel.weight[None], kernel.alpha[None],
                                kernel.beta[None], backend)[0]
    return deform_aggregate(frame, kernel.weight, kernel.alpha, kernel.beta, backend)
