"""Self-describing JSON checkpoint container.

Layout::

    {
      "format": "bx-checkpoint/1",
      "kind": "alignment" | "head",
      "meta": {...},                     # config echo, shapes
      "rng_state": {...} | null,
      "tensors": [{"name", "shape", "dtype": "<f8", "data": base64}, ...]
    }

Tensor payloads are row-major little-endian float64.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np
import torch

FORMAT = "bx-checkpoint/1"


class CheckpointError(ValueError):
    pass


def encode_tensor(name: str, value) -> dict:
    arr = np.ascontiguousarray(torch.as_tensor(value).detach().cpu().double().numpy(), dtype="<f8")
    return {
        "name": name,
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii"),
    }


def decode_tensor(entry: dict) -> np.ndarray:
    if entry.get("dtype") != "<f8":
        raise CheckpointError(f"tensor {entry.get('name')!r}: unsupported dtype {entry.get('dtype')!r}")
    raw = base64.b64decode(entry["data"])
    shape = tuple(entry["shape"])
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"tensor {entry['name']!r}: payload does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def torch_rng_state() -> str:
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")


def restore_torch_rng(state: str) -> None:
    torch.set_rng_state(torch.from_numpy(np.frombuffer(base64.b64decode(state), dtype=np.uint8).copy()))


def save(path, state_dict: dict, *, kind: str, meta: dict, rng_state: dict | None = None) -> Path:
    path = Path(path)
    doc = {
        "format": FORMAT,
        "kind": kind,
        "meta": meta,
        "rng_state": rng_state,
        "tensors": [encode_tensor(k, v) for k, v in state_dict.items()],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (tensors, document-without-tensors)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {doc.get('kind')!r}")
    tensors = {e["name"]: decode_tensor(e) for e in doc.pop("tensors")}
    return tensors, doc


def load_into(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    own = module.state_dict()
    missing = [k for k in own if prefix + k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    new = {}
    for k, v in own.items():
        arr = tensors[prefix + k]
        if tuple(arr.shape) != tuple(v.shape):
            raise CheckpointError(f"parameter {k}: shape {arr.shape} does not match model {tuple(v.shape)}")
        new[k] = torch.as_tensor(arr, dtype=v.dtype)
    module.load_state_dict(new)
