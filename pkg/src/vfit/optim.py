"""AdaMax exactly as published (no epsilon in the update)."""
from __future__ import annotations

import torch
from torch.optim import Optimizer


class AdaMax(Optimizer):
    """
    m_t = b1 * m + (1 - b1) * g
    u_t = max(b2 * u, |g|)
    p  -= lr / (1 - b1**t) * m_t / u_t

    Entries with ``u_t == 0`` (zero gradient so far) are left untouched.
    """

    def __init__(self, params, lr: float = 2e-4, betas: tuple[float, float] = (0.9, 0.999)):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        super().__init__(params, dict(lr=lr, betas=tuple(betas)))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            b1, b2 = group["betas"]
            lr = group["lr"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_inf"] = torch.zeros_like(p)
                state["step"] += 1
                m, u = state["exp_avg"], state["exp_inf"]
                m.mul_(b1).add_(g, alpha=1 - b1)
                torch.maximum(u * b2, g.abs(), out=u)
                step_size = lr / (1 - b1 ** state["step"])
                upd = torch.where(u > 0, m / torch.where(u > 0, u, torch.ones_like(u)), torch.zeros_like(u))
                p.add_(upd, alpha=-step_size)
        return loss
