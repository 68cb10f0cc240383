"""Checkpoint persistence.

A checkpoint is a binary payload of name-sorted little-endian float32 arrays
plus a JSON sidecar (``<path>.json``) holding the stage, step, schedule, seed,
config hash, model architecture and the payload's SHA-256 digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from progdistill.condnet import NetConfig, VelocityNet
from progdistill.errors import DataError
from progdistill.flowcore import Schedule

MAGIC = b"STCK"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict  # name -> np.ndarray (float32)
    stage: int
    step: int
    schedule: Schedule
    seed: int
    config_hash: str
    model: dict = field(default_factory=dict)  # frames, feature_dim, cond_channels, net
    created_at: str = ""
    extra: dict = field(default_factory=dict)  # e.g. guidance_w for teachers

    def build_model(self) -> VelocityNet:
        m = self.model
        try:
            net = VelocityNet(m["frames"], m["feature_dim"], m["cond_channels"], NetConfig(**m["net"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"checkpoint lacks a usable model description: {exc}") from exc
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        missing, unexpected = net.load_state_dict(state, strict=False)
        if missing or unexpected:
            raise DataError(f"checkpoint does not match model: missing={missing} unexpected={unexpected}")
        return net


def model_description(net: VelocityNet) -> dict:
    return {
        "frames": net.frames,
        "feature_dim": net.feature_dim,
        "cond_channels": net.cond_channels,
        "net": asdict(net.cfg),
    }


def from_model(net, stage, step, schedule, seed, config_hash) -> Checkpoint:
    params = {k: v.detach().cpu().to(torch.float32).numpy().copy() for k, v in net.state_dict().items()}
    return Checkpoint(params, stage, step, schedule, seed, config_hash, model_description(net))


def encode_payload(params: dict) -> bytes:
    names = sorted(params)
    if len(set(names)) != len(names):
        raise DataError("parameter names must be unique")
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(names))]
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_payload(raw: bytes) -> dict:
    try:
        if raw[:4] != MAGIC:
            raise DataError("bad checkpoint magic")
        version, count = struct.unpack_from("<BI", raw, 4)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        off = 9
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + n].decode()
            off += n
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 4 * size > len(raw):
                raise DataError("checkpoint payload is truncated")
            params[name] = np.frombuffer(raw, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint payload: {exc}") from exc
    if off != len(raw):
        raise DataError("trailing bytes in checkpoint payload")
    return params


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_payload(ckpt.params)
    meta = {
        "stage": int(ckpt.stage),
        "step": int(ckpt.step),
        "schedule": list(ckpt.schedule.steps),
        "seed": int(ckpt.seed),
        "config_hash": ckpt.config_hash,
        "created_at": ckpt.created_at or datetime.now(timezone.utc).isoformat(),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "model": ckpt.model,
        "extra": ckpt.extra,
    }
    path.write_bytes(payload)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
        meta = json.loads(sidecar_path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint sidecar is not valid JSON: {exc}") from exc
    required = {"stage", "step", "schedule", "seed", "config_hash", "created_at", "payload_sha256"}
    if not isinstance(meta, dict) or not required <= set(meta):
        raise DataError(f"checkpoint sidecar must contain {sorted(required)}")
    if hashlib.sha256(payload).hexdigest() != meta["payload_sha256"]:
        raise DataError("checkpoint payload does not match the digest in its sidecar")
    try:
        schedule = Schedule(tuple(meta["schedule"]))
    except ValueError as exc:
        raise DataError(f"invalid schedule in sidecar: {exc}") from exc
    return Checkpoint(
        decode_payload(payload), int(meta["stage"]), int(meta["step"]), schedule, int(meta["seed"]),
        meta["config_hash"], meta.get("model", {}), meta["created_at"], meta.get("extra", {}),
    )
