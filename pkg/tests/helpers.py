"""Shared test utilities: finite-difference gradient checks and brute-force oracles."""
from __future__ import annotations

import math

import numpy as np
import torch


def fd_gradient_errors(fn, tensors: dict[str, torch.Tensor], eps: float = 1e-6,
                       max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error between autograd and central differences, per named tensor.

    ``fn()`` must return a tensor depending on every entry of ``tensors`` (all
    float64 leaves with ``requires_grad``). The scalar probed is ``<fn(), R>``
    for a fixed random ``R``. When ``max_entries`` is set, a random subset of
    each tensor's entries is checked.
    """
    gen = torch.Generator().manual_seed(seed)
    out = fn()
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    def scalar():
        return float((fn() * proj).sum())

    names = list(tensors)
    grads = torch.autograd.grad((out * proj).sum(), [tensors[n] for n in names], allow_unused=True)
    errors = {}
    rng = np.random.default_rng(seed)
    for name, g in zip(names, grads):
        t = tensors[name]
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = rng.choice(flat.numel(), max_entries, replace=False)
        an = g.reshape(-1)[torch.as_tensor(idx)].double().numpy()
        fd = np.empty(len(idx))
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = scalar()
                flat[i] = orig - eps
                down = scalar()
                flat[i] = orig
                fd[j] = (up - down) / (2 * eps)
        denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-30)
        errors[name] = float(np.linalg.norm(fd - an) / denom)
    return errors


def module_tensors(module: torch.nn.Module, **extra: torch.Tensor) -> dict[str, torch.Tensor]:
    d = {f"param:{n}": p for n, p in module.named_parameters()}
    d.update({f"input:{k}": v for k, v in extra.items()})
    return d


def brute_force_aggregate(img: np.ndarray, weight: np.ndarray, alpha: np.ndarray,
                          beta: np.ndarray) -> np.ndarray:
    """Per-pixel loop over the deformable sum with clamped bilinear reads.

    img [C,H,W], kernels [K,H,W]; stencil is the centred ceil(sqrt(K)) square.
    """
    C, H, W = img.shape
    K = weight.shape[0]
    side = math.ceil(math.sqrt(K))
    out = np.zeros_like(img, dtype=np.float64)

    def read(c, yy, xx):
        return img[c, min(max(yy, 0), H - 1), min(max(xx, 0), W - 1)]

    for y in range(H):
        for x in range(W):
            for k in range(K):
                sx = x + (k % side - side // 2) + alpha[k, y, x]
                sy = y + (k // side - side // 2) + beta[k, y, x]
                x0, y0 = math.floor(sx), math.floor(sy)
                fx, fy = sx - x0, sy - y0
                for c in range(C):
                    v = ((1 - fx) * (1 - fy) * read(c, y0, x0) + fx * (1 - fy) * read(c, y0, x0 + 1)
                         + (1 - fx) * fy * read(c, y0 + 1, x0) + fx * fy * read(c, y0 + 1, x0 + 1))
                    out[c, y, x] += weight[k, y, x] * v
    return out


def brute_force_regions_same(H: int, W: int, M: int, shift: int) -> np.ndarray:
    """[nW, N, N] booleans: do two tokens of a shifted window share a pre-shift region?

    Token at shifted position p came from original position (p + shift) mod size.
    Two tokens belong to the same contiguous region iff their original
    displacement equals their displacement inside the shifted grid (no wrap seam
    between them).
    """
    nH, nW = H // M, W // M
    res = np.zeros((nH * nW, M * M, M * M), dtype=bool)
    for wy in range(nH):
        for wx in range(nW):
            coords = [(wy * M + i, wx * M + j) for i in range(M) for j in range(M)]
            orig = [((r + shift) % H, (c + shift) % W) for r, c in coords]
            for a in range(M * M):
                for b in range(M * M):
                    dr_s = coords[a][0] - coords[b][0]
                    dc_s = coords[a][1] - coords[b][1]
                    dr_o = orig[a][0] - orig[b][0]
                    dc_o = orig[a][1] - orig[b][1]
                    res[wy * nW + wx, a, b] = dr_s == dr_o and dc_s == dc_o
    return res


def dense_attention_oracle(x: np.ndarray, wqkv: np.ndarray, bqkv: np.ndarray, wproj: np.ndarray,
                           bproj: np.ndarray, heads: int) -> np.ndarray:
    """Plain per-head softmax attention over all N tokens of x [N, C] (float64 numpy)."""
    N, C = x.shape
    d = C // heads
    qkv = x @ wqkv.T + bqkv
    q, k, v = qkv[:, :C], qkv[:, C:2 * C], qkv[:, 2 * C:]
    out = np.zeros((N, C))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(d)
        s = s - s.max(axis=1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=1, keepdims=True)
        out[:, sl] = p @ v[:, sl]
    return out @ wproj.T + bproj


def fd_directional_errors(fn, tensors: dict[str, torch.Tensor], eps: float = 1e-6,
                          seed: int = 0) -> dict[str, float]:
    """Per-tensor check of ``<grad, v>`` against a central difference along a random ``v``.

    Covers every entry of every tensor with two extra evaluations per tensor,
    which keeps the check affordable on whole models.
    """
    gen = torch.Generator().manual_seed(seed)
    out = fn()
    proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    names = list(tensors)
    grads = torch.autograd.grad((out * proj).sum(), [tensors[n] for n in names], allow_unused=True)
    errors = {}
    for name, g in zip(names, grads):
        t = tensors[name]
        v = torch.randn(t.shape, generator=gen, dtype=t.dtype)
        an = 0.0 if g is None else float((g * v).sum())
        with torch.no_grad():
            t.data.add_(eps * v)
            up = float((fn() * proj).sum())
            t.data.sub_(2 * eps * v)
            down = float((fn() * proj).sum())
            t.data.add_(eps * v)
        fd = (up - down) / (2 * eps)
        errors[name] = abs(fd - an) / max(abs(fd), abs(an), 1e-30)
    return errors
