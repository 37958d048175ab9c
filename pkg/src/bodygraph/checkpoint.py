"""Self-describing binary checkpoint container.

Layout: 8-byte magic ``BPGCKPT1``, a little-endian uint64 header length, a
UTF-8 JSON header (version, model config echo, step counter, tensor names +
shapes, optional optimizer state description), then the tensor payloads as
little-endian float64 in header order. JSON keys are sorted so identical
states serialize byte-identically.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .config import ModelConfig, model_config_dict, model_config_from_dict

MAGIC = b"BPGCKPT1"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, wrong-version or shape-mismatched checkpoint."""


def save_checkpoint(path, model: torch.nn.Module, cfg: ModelConfig, step: int,
                    optimizer: torch.optim.Optimizer | None = None) -> None:
    tensors: list[tuple[str, torch.Tensor]] = [
        (name, p.detach()) for name, p in model.named_parameters()
    ]
    opt_meta = None
    if optimizer is not None:
        opt_tensors, opt_meta = _optimizer_tensors(model, optimizer)
        tensors.extend(opt_tensors)

    header = {
        "version": VERSION,
        "config": model_config_dict(cfg),
        "step": int(step),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "optimizer": opt_meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(t.to(torch.float64).numpy().astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (config, step, tensors dict, optimizer meta)."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(MAGIC))
            if magic != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header.get("version") != VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
            tensors = {}
            for entry in header["tensors"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
                arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
                tensors[entry["name"]] = torch.from_numpy(arr.copy())
    except (OSError, struct.error, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    cfg = model_config_from_dict(header["config"])
    return cfg, int(header["step"]), tensors, header.get("optimizer")


def restore_model(model: torch.nn.Module, tensors: dict) -> None:
    """Copy parameter tensors into the model; shapes must match exactly."""
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing parameter {name}")
            value = tensors[name]
            if tuple(value.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {tuple(value.shape)} vs model {tuple(param.shape)}"
                )
            param.copy_(value)


def _optimizer_tensors(model, optimizer):
    """Flatten Adam state into named tensors (step stored as a scalar)."""
    param_names = {id(p): n for n, p in model.named_parameters()}
    tensors, meta = [], []
    for group_idx, group in enumerate(optimizer.param_groups):
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = param_names[id(p)]
            step = state["step"]
            step_value = float(step.item() if torch.is_tensor(step) else step)
            tensors.append((f"opt.step.{name}", torch.tensor([step_value], dtype=torch.float64)))
            tensors.append((f"opt.exp_avg.{name}", state["exp_avg"].detach()))
            tensors.append((f"opt.exp_avg_sq.{name}", state["exp_avg_sq"].detach()))
            meta.append(name)
    return tensors, {"kind": "adam", "params": meta}


def restore_optimizer(model, optimizer, tensors, meta) -> None:
    """Rebuild Adam moment state saved by ``save_checkpoint``."""
    if not meta:
        return
    if meta.get("kind") != "adam":
        raise CheckpointError(f"unsupported optimizer state kind {meta.get('kind')!r}")
    params = dict(model.named_parameters())
    for name in meta["params"]:
        p = params.get(name)
        if p is None:
            raise CheckpointError(f"optimizer state for unknown parameter {name}")
        try:
            step = tensors[f"opt.step.{name}"]
            exp_avg = tensors[f"opt.exp_avg.{name}"]
            exp_avg_sq = tensors[f"opt.exp_avg_sq.{name}"]
        except KeyError as exc:
            raise CheckpointError(f"incomplete optimizer state for {name}") from exc
        optimizer.state[p] = {
            "step": torch.tensor(float(step[0])),
            "exp_avg": exp_avg.clone(),
            "exp_avg_sq": exp_avg_sq.clone(),
        }
