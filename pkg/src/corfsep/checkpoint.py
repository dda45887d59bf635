"""Self-describing checkpoint container shared by all trainable models."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import torch

from .audio_io import PathLike

HEADER = "corfsep-ckpt-v1"
KINDS = ("stage1", "stop", "stage2")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: Dict[str, Any]
    state: Dict[str, torch.Tensor]
    train_state: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def digest(self) -> str:
        """SHA-256 over parameter names, shapes and raw values."""
        h = hashlib.sha256()
        h.update(self.kind.encode())
        for name in sorted(self.state):
            t = self.state[name].detach().cpu().contiguous()
            h.update(name.encode())
            h.update(str(tuple(t.shape)).encode())
            h.update(str(t.dtype).encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    def shapes(self) -> Dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self.state.items()}


def from_module(kind: str, config: Dict[str, Any], module: torch.nn.Module, **extra) -> Checkpoint:
    state = {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}
    return Checkpoint(kind=kind, config=dict(config), state=state, **extra)


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> None:
    if ckpt.kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")
    payload = {
        "header": HEADER,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "shapes": {k: list(v) for k, v in ckpt.shapes().items()},
        "state": ckpt.state,
        "train_state": ckpt.train_state,
        "meta": ckpt.meta,
    }
    torch.save(payload, str(path))


def load_checkpoint(path: PathLike, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types here
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("header") != HEADER:
        raise CheckpointError(f"{path}: missing or wrong header, expected {HEADER!r}")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {payload['kind']}")
    state = payload["state"]
    for name, shape in payload["shapes"].items():
        if tuple(state[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: parameter {name} has shape {tuple(state[name].shape)}, header says {tuple(shape)}")
    return Checkpoint(
        kind=payload["kind"],
        config=payload["config"],
        state=state,
        train_state=payload.get("train_state", {}),
        meta=payload.get("meta", {}),
    )


def load_into(module: torch.nn.Module, ckpt: Checkpoint) -> None:
    """Load parameters, reporting both shapes on mismatch."""
    own = module.state_dict()
    missing = sorted(set(own) - set(ckpt.state))
    unexpected = sorted(set(ckpt.state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
    for name, tensor in own.items():
        if tuple(tensor.shape) != tuple(ckpt.state[name].shape):
            raise CheckpointError(
                f"{name}: model expects {tuple(tensor.shape)}, checkpoint has {tuple(ckpt.state[name].shape)}"
            )
    module.load_state_dict(ckpt.state)
