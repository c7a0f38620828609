"""Dataset evaluation and the attention cost benchmark."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch

from . import checkpoint as ckpt_io
from .attention import (
    GlobalPatchBlock, SepSTSBlock, STSBlock, attention_cost, count_attention_pairs,
)
from .data import DatasetManifest, load_septuplet, read_manifest
from .metrics import is_identical, psnr, ssim
from .model import VFIT


@dataclass
class SampleMetrics:
    sample_id: str
    psnr_db: float
    ssim: float
    tag: str = ""


@dataclass
class MetricReport:
    samples: list[SampleMetrics] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.samples)

    @property
    def identical_count(self) -> int:
        return sum(is_identical(s.psnr_db) for s in self.samples)

    @property
    def mean_psnr(self) -> Optional[float]:
        vals = [s.psnr_db for s in self.samples if not is_identical(s.psnr_db)]
        return math.fsum(vals) / len(vals) if vals else None

    @property
    def mean_ssim(self) -> Optional[float]:
        return math.fsum(s.ssim for s in self.samples) / self.count if self.samples else None

    def by_tag(self) -> dict[str, "MetricReport"]:
        groups: dict[str, MetricReport] = defaultdict(MetricReport)
        for s in self.samples:
            groups[s.tag].samples.append(s)
        return dict(groups)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("sample_id", "psnr_db", "ssim"))
            for s in self.samples:
                w.writerow((s.sample_id, "identical" if is_identical(s.psnr_db) else repr(s.psnr_db), repr(s.ssim)))
        return path

    def summary(self) -> str:
        mp = "n/a" if self.mean_psnr is None else f"{self.mean_psnr:.3f} dB"
        ms = "n/a" if self.mean_ssim is None else f"{self.mean_ssim:.4f}"
        note = f" ({self.identical_count} identical pairs excluded from PSNR mean)" if self.identical_count else ""
        return f"{self.count} samples, PSNR {mp}, SSIM {ms}{note}"


def load_model(path: str | Path) -> VFIT:
    ck = ckpt_io.load(path)
    model = VFIT(ck.model_config)
    dtype = next(iter(ck.model_state.values())).dtype
    model.to(dtype)
    ckpt_io.restore(ck, model)
    model.eval()
    return model


@torch.no_grad()
def predict(model: VFIT, inputs) -> torch.Tensor:
    """inputs [T,3,H,W] (array or tensor) -> clamped prediction [3,H,W]."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(inputs).to(dtype)[None]
    return model(x)[0].clamp(0, 1)


def evaluate(checkpoint: str | Path | VFIT | None, manifest: DatasetManifest | str | Path) -> MetricReport:
    """Per-sample PSNR/SSIM of the model against the manifest targets.

    ``checkpoint=None`` scores the targets against themselves.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    model = checkpoint if isinstance(checkpoint, VFIT) or checkpoint is None else load_model(checkpoint)
    if model is not None and model.cfg.frames != 4:
        raise ckpt_io.CheckpointError("septuplet evaluation needs a 4-frame model")
    report = MetricReport()
    for i in range(len(manifest)):
        s = load_septuplet(manifest.path(i), manifest.pattern)
        pred = s.target if model is None else predict(model, s.inputs).numpy()
        tag = manifest.tags[i] if manifest.tags else ""
        report.samples.append(SampleMetrics(manifest.sequences[i], psnr(pred, s.target), ssim(pred, s.target), tag))
    return report


# attention benchmark ---------------------------------------------------------

BENCH_HEADER = ("T", "M", "H", "W", "mode", "pairs_analytic", "pairs_measured", "score_mem")


def measure_pairs(T: int, M: int, H: int, W: int, mode: str, P: int = 4, channels: int = 4) -> tuple[int, int]:
    """Run one instrumented attention layer on random input; returns (pairs, score entries).

    For Sep-STS both the spatial and the temporal MSA are counted; only the
    attention (not the MLP) matters for the count.
    """
    if mode == "sepsts":
        blk = SepSTSBlock(channels, 1, M, T)
    elif mode == "sts":
        blk = STSBlock(channels, 1, M, T)
    elif mode == "global":
        blk = GlobalPatchBlock(channels, P, heads=1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    x = torch.randn(1, channels, T, H, W)
    with torch.no_grad(), count_attention_pairs() as c:
        blk(x)
    return c.pairs, c.score_entries


def bench_attention(sweep: Iterable[tuple[int, int, int, int]],
                    modes: Sequence[str] = ("sts", "sepsts", "global"), P: int = 4) -> list[dict]:
    rows = []
    for T, M, H, W in sweep:
        for mode in modes:
            rep = attention_cost(T, M, H, W, mode, P=P)
            measured, score = measure_pairs(T, M, H, W, mode, P)
            rows.append(dict(T=T, M=M, H=H, W=W, mode=mode, pairs_analytic=rep.pair_count,
                             pairs_measured=measured, score_mem=score))
    return rows


def write_bench_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_HEADER)
        w.writeheader()
        w.writerows(rows)
    return path


def plot_bench(rows: list[dict], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    configs = sorted({(r["T"], r["M"], r["H"], r["W"]) for r in rows})
    modes = sorted({r["mode"] for r in rows})
    lookup = {(r["T"], r["M"], r["H"], r["W"], r["mode"]): r["score_mem"] for r in rows}
    fig, ax = plt.subplots(figsize=(max(6, len(configs) * 0.9), 4))
    width = 0.8 / len(modes)
    for j, mode in enumerate(modes):
        xs = [i + j * width for i in range(len(configs))]
        ax.bar(xs, [lookup.get(c + (mode,), 0) for c in configs], width, label=mode)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(configs))])
    ax.set_xticklabels([f"T{t} M{m}\n{h}x{w}" for t, m, h, w in configs], fontsize=7)
    ax.set_yscale("log")
    ax.set_ylabel("attention score entries")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


DEFAULT_SWEEP = [(4, 8, 8, 8), (4, 8, 16, 16), (4, 4, 16, 16), (2, 4, 8, 8), (1, 4, 8, 8), (8, 4, 16, 16)]
