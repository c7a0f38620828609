"""Septuplet ingestion, augmentation and the synthetic moving-shapes generator.

A sequence directory holds ``im1.png`` ... ``im7.png``. Frames 1, 3, 5, 7 are
the inputs and frame 4 is the target. A manifest is a text file listing one
sequence directory per line (relative to the manifest), optionally followed
by a whitespace-separated split tag.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .synthesis import build_pyramid as _build_pyramid

INPUT_INDICES = (0, 2, 4, 6)
TARGET_INDEX = 3
FRAME_PATTERN = "im{}.png"


class DataError(RuntimeError):
    pass


@dataclass
class Sample:
    inputs: np.ndarray  # [4, 3, H, W] float32 in [0, 1]
    target: np.ndarray  # [3, H, W]
    id: str = ""

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.inputs.shape[1] != 3:
            raise DataError(f"{self.id}: inputs must be [T,3,H,W], got {self.inputs.shape}")
        if self.target.shape != self.inputs.shape[1:]:
            raise DataError(f"{self.id}: target {self.target.shape} does not match inputs {self.inputs.shape}")


@dataclass
class DatasetManifest:
    root: Path
    sequences: list[str]
    pattern: str = FRAME_PATTERN
    split: str = ""
    tags: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)

    def path(self, i: int) -> Path:
        p = Path(self.sequences[i])
        return p if p.is_absolute() else self.root / p


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from None
    seqs, tags = [], []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        seqs.append(parts[0])
        tags.append(parts[1] if len(parts) > 1 else "")
    if not seqs:
        raise DataError(f"manifest {path} lists no sequences")
    return DatasetManifest(path.parent, seqs, tags=tags)


def write_manifest(path: str | Path, sequences: Sequence[str], tags: Sequence[str] = ()) -> Path:
    path = Path(path)
    rows = [f"{s} {t}".strip() for s, t in zip(sequences, list(tags) or [""] * len(sequences))]
    path.write_text("\n".join(rows) + "\n")
    return path


def read_frame(path: str | Path) -> np.ndarray:
    """Decode an 8-bit RGB image to float32 ``[3, H, W]`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read frame {path}: {e}") from None
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / 255.0)


def write_frame(path: str | Path, frame: np.ndarray | torch.Tensor) -> None:
    if isinstance(frame, torch.Tensor):
        frame = frame.detach().cpu().numpy()
    arr = np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_septuplet(seq: str | Path, pattern: str = FRAME_PATTERN) -> Sample:
    seq = Path(seq)
    frames = []
    for i in range(1, 8):
        f = seq / pattern.format(i)
        if not f.exists():
            raise DataError(f"missing frame {f}")
        frames.append(read_frame(f))
    shapes = {fr.shape for fr in frames}
    if len(shapes) != 1:
        raise DataError(f"frames in {seq} have different sizes: {sorted(shapes)}")
    inputs = np.stack([frames[i] for i in INPUT_INDICES])
    return Sample(inputs, frames[TARGET_INDEX], seq.name)


def load_quadruplet(seq: str | Path) -> np.ndarray:
    """Four input frames ``im1..im4`` of a directory without a target."""
    seq = Path(seq)
    frames = [read_frame(seq / FRAME_PATTERN.format(i)) for i in range(1, 5)]
    if len({f.shape for f in frames}) != 1:
        raise DataError(f"frames in {seq} have different sizes")
    return np.stack(frames)


def augment(sample: Sample, seed: int, crop: int | None = 256, flips: bool = True,
            reverse: bool = True) -> Sample:
    """Same random crop and flips on all five frames, plus temporal reversal."""
    rng = np.random.default_rng(seed)
    H, W = sample.target.shape[-2:]
    inputs, target = sample.inputs, sample.target
    if crop is not None:
        if crop > H or crop > W:
            raise DataError(f"crop {crop} larger than frame {H}x{W}")
        y = int(rng.integers(0, H - crop + 1))
        x = int(rng.integers(0, W - crop + 1))
        inputs = inputs[..., y:y + crop, x:x + crop]
        target = target[..., y:y + crop, x:x + crop]
    if flips and rng.random() < 0.5:
        inputs, target = inputs[..., ::-1], target[..., ::-1]
    if flips and rng.random() < 0.5:
        inputs, target = inputs[..., ::-1, :], target[..., ::-1, :]
    if reverse and rng.random() < 0.5:
        inputs = inputs[::-1]
    return Sample(np.ascontiguousarray(inputs), np.ascontiguousarray(target), sample.id)


def hflip(sample: Sample) -> Sample:
    return Sample(np.ascontiguousarray(sample.inputs[..., ::-1]),
                  np.ascontiguousarray(sample.target[..., ::-1]), sample.id)


def reverse_time(sample: Sample) -> Sample:
    return Sample(np.ascontiguousarray(sample.inputs[::-1]), sample.target, sample.id)


def build_pyramid(sample: Sample) -> list[np.ndarray]:
    """Input frames at scales 1, 1/2, 1/4 (bilinear); level 0 is untouched."""
    levels = _build_pyramid(torch.from_numpy(sample.inputs), 3)
    return [sample.inputs] + [l.numpy() for l in levels[1:]]


class SeptupletDataset:
    """Manifest-backed samples, cached in memory after the first read."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[int, Sample] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, i: int) -> Sample:
        if i not in self._cache:
            self._cache[i] = load_septuplet(self.manifest.path(i), self.manifest.pattern)
        return self._cache[i]


def sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_batches(ds: SeptupletDataset, batch_size: int, seed: int, epoch: int,
                 crop: int | None, do_augment: bool) -> Iterator[list[Sample]]:
    """Deterministic batches for one epoch; the last partial batch is dropped
    unless the dataset is smaller than one batch."""
    order = epoch_order(len(ds), seed, epoch)
    nb = max(1, len(ds) // batch_size)
    for b in range(nb):
        idx = order[b * batch_size:(b + 1) * batch_size]
        batch = []
        for i in idx:
            s = ds[int(i)]
            if do_augment:
                s = augment(s, sample_seed(seed, epoch, int(i)), crop)
            elif crop is not None:
                s = augment(s, sample_seed(seed, epoch, int(i)), crop, flips=False, reverse=False)
            batch.append(s)
        yield batch


def collate(batch: Sequence[Sample], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.inputs for s in batch])).to(dtype)
    y = torch.from_numpy(np.stack([s.target for s in batch])).to(dtype)
    return x, y


# synthetic data -------------------------------------------------------------

@dataclass
class Shape:
    kind: str  # "square" or "disc"
    x: float  # top-left (square) or centre (disc) at frame 0
    y: float
    size: float  # side (square) or radius (disc)
    vx: float  # pixels per frame
    vy: float
    color: tuple[float, float, float]

    def at(self, f: int) -> tuple[float, float]:
        return self.x + self.vx * f, self.y + self.vy * f


def _coverage(shape: Shape, f: int, H: int, W: int, ss: int) -> np.ndarray:
    """Fraction of each pixel covered by ``shape`` at frame ``f`` (ss x ss supersampling)."""
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(H)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(W)[:, None] + offs[None, :]).reshape(-1)
    px, py = shape.at(f)
    if shape.kind == "square":
        inside = ((ys >= py) & (ys < py + shape.size))[:, None] & ((xs >= px) & (xs < px + shape.size))[None, :]
    elif shape.kind == "disc":
        inside = (ys[:, None] - py) ** 2 + (xs[None, :] - px) ** 2 <= shape.size ** 2
    else:
        raise DataError(f"unknown shape kind {shape.kind!r}")
    return inside.reshape(H, ss, W, ss).mean(axis=(1, 3))


def render_frame(shapes: Sequence[Shape], f: int, H: int, W: int,
                 background: np.ndarray, ss: int = 4) -> np.ndarray:
    img = background.copy()
    for s in shapes:
        cov = _coverage(s, f, H, W, ss)[None]
        img = img * (1 - cov) + np.asarray(s.color, dtype=np.float64)[:, None, None] * cov
    return img


def _background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    ang = rng.uniform(0, 2 * math.pi)
    t = 0.5 + 0.5 * (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5))
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


SYNTHETIC_DEFAULTS: dict[str, Any] = {
    "canvas": [64, 64],
    "sequences": 4,
    "shapes": 3,
    "size": [8, 20],
    "max_speed": 2.0,
    "seed": 0,
    "supersample": 4,
}


def _validate_shape(s: Shape, H: int, W: int) -> None:
    if abs(s.vx) * 6 >= W or abs(s.vy) * 6 >= H:
        raise DataError(f"velocity ({s.vx}, {s.vy}) too large for a {H}x{W} canvas")


def gen_synthetic(params: dict, out_dir: str | Path) -> Path:
    """Write 7-frame moving-shape sequences and a manifest; returns the manifest path.

    ``params`` keys (all optional): ``canvas`` [H, W], ``sequences``, ``shapes``,
    ``size`` [min, max], ``max_speed`` (pixels/frame), ``seed``, ``supersample``,
    or ``explicit``: a list of sequences, each a list of shape dicts
    (``kind, x, y, size, vx, vy, color``) for hand-specified scenes.
    """
    unknown = set(params) - set(SYNTHETIC_DEFAULTS) - {"explicit", "background"}
    if unknown:
        raise DataError(f"unknown synthetic key(s): {', '.join(sorted(unknown))}")
    cfg = {**SYNTHETIC_DEFAULTS, **params}
    H, W = (int(v) for v in cfg["canvas"])
    if H < 8 or W < 8:
        raise DataError("canvas must be at least 8x8")
    ss = int(cfg["supersample"])
    rng = np.random.default_rng(int(cfg["seed"]))
    out_dir = Path(out_dir)

    scenes: list[list[Shape]] = []
    if cfg.get("explicit"):
        for seq in cfg["explicit"]:
            scenes.append([Shape(**{**d, "color": tuple(d.get("color", (1.0, 1.0, 1.0)))}) for d in seq])
    else:
        vmax = float(cfg["max_speed"])
        lo, hi = cfg["size"]
        for _ in range(int(cfg["sequences"])):
            shapes = []
            for _ in range(int(cfg["shapes"])):
                kind = "square" if rng.random() < 0.5 else "disc"
                size = float(rng.uniform(lo, hi))
                if kind == "disc":
                    size /= 2
                vx, vy = (float(v) for v in rng.uniform(-vmax, vmax, 2))
                # keep the centre on the canvas for all 7 frames
                x = float(rng.uniform(max(0.0, -6 * vx), W - max(0.0, 6 * vx)))
                y = float(rng.uniform(max(0.0, -6 * vy), H - max(0.0, 6 * vy)))
                if kind == "square":
                    x -= size / 2
                    y -= size / 2
                color = tuple(float(c) for c in rng.uniform(0, 1, 3))
                shapes.append(Shape(kind, x, y, size, vx, vy, color))
            scenes.append(shapes)
    for shapes in scenes:
        for s in shapes:
            _validate_shape(s, H, W)

    names = []
    for i, shapes in enumerate(scenes):
        name = f"seq{i:05d}"
        d = out_dir / name
        d.mkdir(parents=True, exist_ok=True)
        if "background" in cfg:
            bg = np.broadcast_to(np.asarray(cfg["background"], dtype=np.float64)[:, None, None], (3, H, W)).copy()
        else:
            bg = _background(rng, H, W)
        for f in range(7):
            write_frame(d / FRAME_PATTERN.format(f + 1), render_frame(shapes, f, H, W, bg, ss))
        names.append(name)
    (out_dir / "synthetic_params.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return write_manifest(out_dir / "manifest.txt", names)
