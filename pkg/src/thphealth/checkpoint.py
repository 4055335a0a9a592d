"""Checkpoint container.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then the parameter payload as concatenated little-endian float64
blocks. The manifest records each tensor's name, shape and offset plus a
SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .config import TrainConfig
from .data import ClassWeights, GapStats
from .encoder import make_encoder_params
from .model import ModelParams

MAGIC = b"THPCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or version-mismatched checkpoint."""


class IncompatibleCheckpoint(CheckpointError):
    """Checkpoint does not match the data it is applied to."""


@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    gap_stats: GapStats
    class_weights: ClassWeights
    type_names: tuple
    median_gap: float
    epoch: int = 0
    best: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.params.K

    def check_compatible(self, K: int) -> None:
        if K != self.K:
            raise IncompatibleCheckpoint(f"incompatible event-type count: checkpoint has K={self.K}, data has K={K}")

    def copy(self) -> "Checkpoint":
        params = empty_params(self.config)
        for name, p in params.named_parameters().items():
            p.data[...] = self.params.named_parameters()[name].data
        return Checkpoint(params, self.config, self.gap_stats, self.class_weights, self.type_names, self.median_gap, self.epoch, dict(self.best))


def empty_params(cfg: TrainConfig) -> ModelParams:
    """Zero-filled parameters with the architecture of ``cfg``."""
    rng = np.random.default_rng(0)
    enc = make_encoder_params(cfg.K, cfg.d, cfg.n_layers, cfg.n_heads, cfg.d_ff, rng)
    params = ModelParams(
        encoder=enc,
        w=Parameter(np.zeros((cfg.K, cfg.d)), "intensity.w"),
        b=Parameter(np.zeros(cfg.K), "intensity.b"),
        alpha=Parameter(np.zeros(cfg.K), "intensity.alpha"),
        v=Parameter(np.zeros((cfg.d, 1)), "time.v"),
        c=Parameter(np.zeros(1), "time.c"),
        beta=cfg.beta,
    )
    for p in params.parameters():
        p.data[...] = 0.0
    return params


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blocks, index, offset = [], [], 0
    for name, p in ckpt.params.named_parameters().items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    payload = b"".join(blocks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "gap_stats": {"mean_log_gap": ckpt.gap_stats.mean_log_gap, "std_log_gap": ckpt.gap_stats.std_log_gap},
        "class_weights": list(ckpt.class_weights.w),
        "type_names": list(ckpt.type_names),
        "median_gap": ckpt.median_gap,
        "epoch": ckpt.epoch,
        "best": ckpt.best,
        "tensors": index,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path, expected_K: int | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n_head,) = struct.unpack("<Q", raw[8:16])
    if 16 + n_head > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16 : 16 + n_head].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')!r}")
    payload = raw[16 + n_head :]
    if len(payload) != manifest["payload_bytes"] or hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt payload)")

    cfg = TrainConfig.from_dict(manifest["config"])
    if expected_K is not None and cfg.K != expected_K:
        raise IncompatibleCheckpoint(f"incompatible event-type count: checkpoint has K={cfg.K}, data has K={expected_K}")
    params = empty_params(cfg)
    named = params.named_parameters()
    if {t["name"] for t in manifest["tensors"]} != set(named):
        raise CheckpointError(f"{path}: parameter set does not match the configured architecture")
    for t in manifest["tensors"]:
        block = np.frombuffer(payload, dtype="<f8", count=t["nbytes"] // 8, offset=t["offset"])
        target = named[t["name"]]
        if list(target.shape) != t["shape"]:
            raise CheckpointError(f"{path}: shape mismatch for {t['name']}")
        target.data[...] = block.reshape(t["shape"])
    gs = manifest["gap_stats"]
    return Checkpoint(
        params=params,
        config=cfg,
        gap_stats=GapStats(gs["mean_log_gap"], gs["std_log_gap"]),
        class_weights=ClassWeights(tuple(manifest["class_weights"])),
        type_names=tuple(manifest["type_names"]),
        median_gap=manifest["median_gap"],
        epoch=manifest["epoch"],
        best=manifest["best"],
    )
