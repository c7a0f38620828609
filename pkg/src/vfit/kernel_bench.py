"""Timing of the compiled deformable kernel against the torch fallback."""
from __future__ import annotations

import time

import torch

from . import deform


def _time(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def run(batch: int = 16, size: int = 64, K: int = 25, repeat: int = 5, seed: int = 0) -> dict:
    """Best-of-``repeat`` seconds for forward and forward+backward per backend."""
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(batch, 3, size, size, generator=g, requires_grad=True)
    w = torch.randn(batch, K, size, size, generator=g, requires_grad=True)
    a = (2 * torch.randn(batch, K, size, size, generator=g)).requires_grad_()
    b = (2 * torch.randn(batch, K, size, size, generator=g)).requires_grad_()
    backends = ["python"] + (["compiled"] if deform._deform_ext is not None else [])
    out: dict = {"shape": [batch, 3, size, size], "K": K, "default_backend": deform.BACKEND}
    for be in backends:
        def fwd():
            with torch.no_grad():
                deform.deform_aggregate(img, w, a, b, be)

        def fwd_bwd():
            deform.deform_aggregate(img, w, a, b, be).sum().backward()

        out[be] = {"forward_s": _time(fwd, repeat), "forward_backward_s": _time(fwd_bwd, repeat)}
    if "compiled" in out:
        out["speedup_forward_backward"] = out["python"]["forward_backward_s"] / out["compiled"]["forward_backward_s"]
    return out
