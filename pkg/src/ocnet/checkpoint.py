"""Self-contained binary checkpoints.

Layout (all integers little-endian u32 unless noted):

    magic "OCNT" | version | config JSON (len, utf-8 bytes)
    | torch RNG state (len, bytes) | numpy RNG state JSON (len, utf-8 bytes)
    | entry count | entries

Each entry is (name len, name bytes, rank, dims..., float32 LE payload).
The config block carries everything needed to rebuild the model: encoder
shape, base classes, model variant flags, and the train settings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .encoder import CamHead, Encoder, EncoderBundle, EncoderConfig
from .model import ModelConfig, OCNet

MAGIC = b"OCNT"
VERSION = 1


class CheckpointError(Exception):
    """Malformed, truncated, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, torch.Tensor]
    torch_rng: bytes = b""
    numpy_rng: dict = field(default_factory=dict)
    version: int = VERSION


def _pack_u32(value: int) -> bytes:
    return struct.pack("<I", value)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    parts = [MAGIC, _pack_u32(ckpt.version)]
    config_blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    parts.append(_pack_u32(len(config_blob)))
    parts.append(config_blob)
    parts.append(_pack_u32(len(ckpt.torch_rng)))
    parts.append(ckpt.torch_rng)
    numpy_blob = json.dumps(ckpt.numpy_rng, sort_keys=True).encode("utf-8")
    parts.append(_pack_u32(len(numpy_blob)))
    parts.append(numpy_blob)
    parts.append(_pack_u32(len(ckpt.tensors)))
    for name, tensor in ckpt.tensors.items():
        if tensor.dtype != torch.float32:
            raise CheckpointError(f"entry {name!r} is {tensor.dtype}, only float32 is stored")
        name_bytes = name.encode("utf-8")
        parts.append(_pack_u32(len(name_bytes)))
        parts.append(name_bytes)
        dims = tuple(tensor.shape)
        parts.append(_pack_u32(len(dims)))
        for d in dims:
            parts.append(_pack_u32(d))
        payload = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        parts.append(payload.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes for {what} at offset {self.offset}"
            )
        out = self.blob[self.offset : self.offset + n]
        self.offset += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic bytes at offset 0: not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config = json.loads(r.take(r.u32("config length"), "config").decode("utf-8"))
    torch_rng = r.take(r.u32("torch rng length"), "torch rng")
    numpy_rng = json.loads(r.take(r.u32("numpy rng length"), "numpy rng").decode("utf-8"))
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(r.u32("entry count")):
        name = r.take(r.u32("name length"), "entry name").decode("utf-8")
        rank = r.u32("rank")
        dims = tuple(r.u32("dim") for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * count, f"payload of {name!r}")
        array = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        tensors[name] = torch.from_numpy(array)
    if r.offset != len(blob):
        raise CheckpointError(f"trailing garbage at offset {r.offset}")
    return Checkpoint(config, tensors, torch_rng, numpy_rng, version)


def snapshot_model(
    model: OCNet,
    train_config: dict | None = None,
    numpy_rng_state: dict | None = None,
) -> Checkpoint:
    config = {
        "encoder": {
            "input_size": model.encoder.cfg.input_size,
            "widths": list(model.encoder.cfg.widths),
            "mid_stage": model.encoder.cfg.mid_stage,
            "high_stage": model.encoder.cfg.high_stage,
        },
        "base_classes": list(model.bundle.base_classes),
        "model": asdict(model.cfg),
        "train": train_config or {},
    }
    tensors = {name: t.detach().clone() for name, t in model.state_dict().items()}
    return Checkpoint(
        config,
        tensors,
        torch_rng=torch.get_rng_state().numpy().tobytes(),
        numpy_rng=numpy_rng_state or {},
    )


def snapshot_encoder(bundle: EncoderBundle, pretrain_config: dict | None = None) -> Checkpoint:
    config = {
        "encoder": {
            "input_size": bundle.encoder.cfg.input_size,
            "widths": list(bundle.encoder.cfg.widths),
            "mid_stage": bundle.encoder.cfg.mid_stage,
            "high_stage": bundle.encoder.cfg.high_stage,
        },
        "base_classes": list(bundle.base_classes),
        "val_accuracy": bundle.val_accuracy,
        "pretrain": pretrain_config or {},
    }
    tensors = {f"encoder.{k}": v.detach().clone() for k, v in bundle.encoder.state_dict().items()}
    tensors.update(
        {f"cam_head.{k}": v.detach().clone() for k, v in bundle.cam_head.state_dict().items()}
    )
    return Checkpoint(config, tensors, torch_rng=torch.get_rng_state().numpy().tobytes())


def bundle_from_checkpoint(ckpt: Checkpoint) -> EncoderBundle:
    if "model" in ckpt.config:
        raise CheckpointError("checkpoint holds a full model, not a bare encoder")
    enc_cfg = EncoderConfig(
        input_size=ckpt.config["encoder"]["input_size"],
        widths=tuple(ckpt.config["encoder"]["widths"]),
        mid_stage=ckpt.config["encoder"]["mid_stage"],
        high_stage=ckpt.config["encoder"]["high_stage"],
    )
    base_classes = tuple(ckpt.config["base_classes"])
    bundle = EncoderBundle(
        Encoder(enc_cfg),
        CamHead(enc_cfg.high_channels, len(base_classes)),
        base_classes,
        val_accuracy=float(ckpt.config.get("val_accuracy", 0.0)),
    )
    prefix = "encoder."
    bundle.encoder.load_state_dict(
        {k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)}
    )
    prefix = "cam_head."
    bundle.cam_head.load_state_dict(
        {k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)}
    )
    bundle.freeze()
    return bundle


def model_from_checkpoint(ckpt: Checkpoint) -> OCNet:
    enc_cfg = EncoderConfig(
        input_size=ckpt.config["encoder"]["input_size"],
        widths=tuple(ckpt.config["encoder"]["widths"]),
        mid_stage=ckpt.config["encoder"]["mid_stage"],
        high_stage=ckpt.config["encoder"]["high_stage"],
    )
    base_classes = tuple(ckpt.config["base_classes"])
    bundle = EncoderBundle(
        Encoder(enc_cfg), CamHead(enc_cfg.high_channels, len(base_classes)), base_classes
    )
    model = OCNet(bundle, ModelConfig(**ckpt.config["model"]))
    model.load_state_dict(ckpt.tensors)
    bundle.freeze()
    model.eval()
    return model
