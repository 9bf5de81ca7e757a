"""Binary checkpoint container.

Layout: magic ``TIA1``, u32 format version, u64 header length, a UTF-8 JSON
header (variant, env step, config echo, named block index with shapes/dtypes,
free-form extra state), then the raw little-endian block bytes. Round-trips
are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_from_flat_dict, config_to_flat_dict

MAGIC = b"TIA1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    variant: str
    config: TrainConfig
    env_step: int
    arrays: dict[str, np.ndarray]
    extra: dict


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_checkpoint(path: str | Path, *, variant: str, config: TrainConfig,
                    env_step: int, arrays: dict[str, np.ndarray],
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = _le(arrays[name])
        raw = arr.tobytes()
        blocks.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    header = {
        "variant": variant,
        "env_step": int(env_step),
        "config": config_to_flat_dict(config),
        "blocks": blocks,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"not a TIA1 checkpoint: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for block in header["blocks"]:
        start = block["offset"]
        raw = payload[start : start + block["nbytes"]]
        if len(raw) != block["nbytes"]:
            raise CheckpointError(f"truncated checkpoint: block {block['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(block["dtype"])).reshape(block["shape"])
        arrays[block["name"]] = arr.copy()
    return Checkpoint(
        variant=header["variant"],
        config=config_from_flat_dict(header["config"]),
        env_step=header["env_step"],
        arrays=arrays,
        extra=header.get("extra", {}),
    )


def state_dict_to_arrays(prefix: str, state_dict: dict) -> dict[str, np.ndarray]:
    """Flatten a torch state dict into named numpy blocks."""
    out = {}
    for key, value in state_dict.items():
        out[f"{prefix}/{key}"] = value.detach().cpu().numpy()
    return out


def arrays_to_state_dict(prefix: str, arrays: dict[str, np.ndarray]) -> dict:
    """Collect blocks under a prefix back into a torch-loadable state dict."""
    import torch

    head = prefix + "/"
    out = {}
    for key, value in arrays.items():
        if key.startswith(head):
            out[key[len(head):]] = torch.as_tensor(value.copy())
    return out


def load_into_module(module, prefix: str, arrays: dict[str, np.ndarray]) -> None:
    """Load named blocks into a torch module, naming any mismatched block."""
    state = arrays_to_state_dict(prefix, arrays)
    current = module.state_dict()
    if set(state) != set(current):
        missing = sorted(set(current) - set(state))
        unexpected = sorted(set(state) - set(current))
        raise CheckpointError(
            f"parameter blocks under {prefix!r} do not match the model: "
            f"missing {missing[:3]}, unexpected {unexpected[:3]}"
        )
    for key, tensor in state.items():
        if tuple(tensor.shape) != tuple(current[key].shape):
            raise CheckpointError(
                f"shape mismatch in block {prefix}/{key}: checkpoint "
                f"{tuple(tensor.shape)} vs model {tuple(current[key].shape)}"
            )
    module.load_state_dict({k: v.to(current[k].dtype) for k, v in state.items()})
