"""Checkpoint archives.

A checkpoint is an uncompressed NumPy ``.npz`` archive. Keys:

``meta/format``        uint8 JSON bytes: ``{"format": "vfit-ckpt", "version": 1}``
``meta/model_config``  uint8 JSON bytes of the ModelConfig
``meta/train_state``   uint8 JSON bytes (step, epoch, train config, ...), optional
``model/<name>``       parameter/buffer arrays keyed by ``state_dict`` names
``optim/<i>/<key>``    optimizer state for parameter ``i`` (in ``model.parameters()`` order)
``debug/<...>``        optional extra arrays (e.g. predicted kernels), never loaded into a model

Array shapes and dtypes are stored by ``.npz`` itself.
"""
from __future__ import annotations

import dataclasses
import io
import json
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
import torch

from .config import ModelConfig

FORMAT = {"format": "vfit-ckpt", "version": 1}


class CheckpointError(RuntimeError):
    pass


def _json_bytes(obj: Any) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def _from_json_bytes(arr: np.ndarray) -> Any:
    return json.loads(arr.tobytes().decode())


def save(path: str | Path, model: torch.nn.Module, model_cfg: ModelConfig,
         optimizer: Optional[torch.optim.Optimizer] = None,
         train_state: Optional[dict] = None,
         debug: Optional[Mapping[str, np.ndarray]] = None) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {
        "meta/format": _json_bytes(FORMAT),
        "meta/model_config": _json_bytes(dataclasses.asdict(model_cfg)),
    }
    if train_state is not None:
        arrays["meta/train_state"] = _json_bytes(train_state)
    for name, t in model.state_dict().items():
        arrays[f"model/{name}"] = t.detach().cpu().numpy()
    if optimizer is not None:
        index = {id(p): i for i, p in enumerate(model.parameters())}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for key, v in optimizer.state.get(p, {}).items():
                    v = v if isinstance(v, torch.Tensor) else torch.tensor(v)
                    arrays[f"optim/{index[id(p)]}/{key}"] = v.detach().cpu().numpy()
    for k, v in (debug or {}).items():
        arrays[f"debug/{k}"] = np.asarray(v)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


@dataclasses.dataclass
class Checkpoint:
    model_config: ModelConfig
    model_state: dict[str, torch.Tensor]
    optim_state: dict[int, dict[str, torch.Tensor]]
    train_state: Optional[dict]
    debug: dict[str, np.ndarray]


def load(path: str | Path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if "meta/format" not in data or _from_json_bytes(data["meta/format"]).get("format") != FORMAT["format"]:
        raise CheckpointError(f"{path} is not a vfit checkpoint")
    cfg = ModelConfig(**_from_json_bytes(data["meta/model_config"]))
    model_state, optim_state, debug = {}, {}, {}
    for k, v in data.items():
        if k.startswith("model/"):
            model_state[k[6:]] = torch.from_numpy(v.copy())
        elif k.startswith("optim/"):
            _, i, key = k.split("/", 2)
            optim_state.setdefault(int(i), {})[key] = torch.from_numpy(v.copy())
        elif k.startswith("debug/"):
            debug[k[6:]] = v
    ts = _from_json_bytes(data["meta/train_state"]) if "meta/train_state" in data else None
    return Checkpoint(cfg, model_state, optim_state, ts, debug)


def restore(ckpt: Checkpoint, model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer] = None) -> None:
    try:
        model.load_state_dict(ckpt.model_state)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint does not match model: {e}") from None
    if optimizer is not None:
        params = list(model.parameters())
        for i, st in ckpt.optim_state.items():
            p = params[i]
            optimizer.state[p] = {
                k: (int(v.item()) if k == "step" else v.to(p.dtype)) for k, v in st.items()
            }


def save_debug(path: str | Path, arrays: Mapping[str, np.ndarray]) -> Path:
    """Write a checkpoint-format archive holding only ``debug/`` arrays."""
    path = Path(path)
    out = {"meta/format": _json_bytes(FORMAT)}
    out.update({f"debug/{k}": np.asarray(v) for k, v in arrays.items()})
    np.savez(path, **out)
    return path
