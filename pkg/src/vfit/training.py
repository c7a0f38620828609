"""l1 training with AdaMax, cosine learning-rate decay and exact resume."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import ModelConfig, TrainConfig
from .data import DatasetManifest, SeptupletDataset, Sample, collate, iter_batches, read_manifest
from .model import VFIT
from .optim import AdaMax
from .synthesis import downsample

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "lr", "loss", "wall_time")


class NumericError(RuntimeError):
    pass


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``."""
    if total_steps <= 0:
        return cfg.lr_start
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return cfg.lr_end
    c = math.cos(0.5 * math.pi * step / total_steps)
    return cfg.lr_end + (cfg.lr_start - cfg.lr_end) * c * c


def dtype_of(cfg: TrainConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def build_model(model_cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> VFIT:
    torch.manual_seed(seed)
    return VFIT(model_cfg).to(dtype)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> AdaMax:
    return AdaMax(model.parameters(), lr=cfg.lr_start, betas=cfg.betas)


def compute_loss(model: VFIT, x: torch.Tensor, y: torch.Tensor, deep_supervision: bool = False):
    if deep_supervision:
        pred, aux = model(x, return_all=True)
        loss = l1_loss(pred, y)
        for l, est in enumerate(aux["levels"][1:], start=1):
            loss = loss + l1_loss(est, downsample(y, 2 ** l))
        return loss, pred
    pred = model(x)
    return l1_loss(pred, y), pred


def train_step(model: VFIT, optimizer: torch.optim.Optimizer, batch: Sequence[Sample] | tuple,
               lr: float, deep_supervision: bool = False) -> float:
    """One forward/backward/AdaMax update; returns the loss."""
    dtype = next(model.parameters()).dtype
    x, y = batch if isinstance(batch, tuple) else collate(batch, dtype)
    model.train()
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss, _ = compute_loss(model, x, y, deep_supervision)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    loss.backward()
    optimizer.step()
    return float(loss.item())


@dataclasses.dataclass
class FitResult:
    checkpoint: Path
    losses: list[float]
    steps: int


def total_steps(cfg: TrainConfig, n_samples: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * max(1, n_samples // cfg.batch_size)


def fit(model_cfg: ModelConfig, cfg: TrainConfig, manifest: DatasetManifest | str | Path,
        out_dir: str | Path, resume: Optional[str | Path] = None) -> FitResult:
    """Train and checkpoint to ``out_dir``; ``resume`` continues a saved run exactly."""
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    ds = SeptupletDataset(manifest)
    dtype = dtype_of(cfg)
    model = build_model(model_cfg, cfg.seed, dtype)
    opt = make_optimizer(model, cfg)
    n_total = total_steps(cfg, len(ds))
    steps_per_epoch = max(1, len(ds) // cfg.batch_size)

    step = 0
    log_path = out_dir / "train_log.csv"
    if resume is not None:
        ck = ckpt_io.load(resume)
        ckpt_io.restore(ck, model, opt)
        step = int(ck.train_state["step"])
        _truncate_log(log_path, step)
    else:
        with open(log_path, "w", newline="") as f:
            csv.writer(f).writerow(LOG_HEADER)

    def state(step):
        return {"step": step, "train": dataclasses.asdict(cfg), "total_steps": n_total}

    losses: list[float] = []
    crop = cfg.crop
    sample_hw = ds[0].target.shape[-2:]
    if crop is not None and crop > min(sample_hw):
        crop = None
    t0 = time.perf_counter()
    last = out_dir / "last.npz"
    while step < n_total:
        epoch, within = divmod(step, steps_per_epoch)
        for b, batch in enumerate(iter_batches(ds, cfg.batch_size, cfg.seed, epoch, crop, cfg.augment)):
            if b < within:
                continue
            if step >= n_total:
                break
            lr = lr_schedule(step, n_total, cfg)
            loss = train_step(model, opt, batch, lr, cfg.deep_supervision)
            losses.append(loss)
            step += 1
            with open(log_path, "a", newline="") as f:
                csv.writer(f).writerow((step, repr(lr), repr(loss), f"{time.perf_counter() - t0:.3f}"))
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                ckpt_io.save(out_dir / f"ckpt_{step:07d}.npz", model, model_cfg, opt, state(step))
            if step % 50 == 0:
                log.info("step %d/%d lr %.3g loss %.5f", step, n_total, lr, loss)
    ckpt_io.save(last, model, model_cfg, opt, state(step))
    return FitResult(last, losses, step)


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(LOG_HEADER)
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= step]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(keep)


def read_log(path: str | Path) -> list[tuple[int, float, float]]:
    """(step, lr, loss) rows of a training log; wall time is dropped."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return [(int(r[0]), float(r[1]), float(r[2])) for r in rows]
