"""Synthetic conditional sequence data.

Each item is a short "video" of ``F`` frames with ``D`` features plus a
nonnegative conditioning envelope sampled ``L / F`` times faster than the
frames. Feature 0 (the "mouth") follows the frame-aligned envelope, features
1-2 (the "head") trace a random circle that ignores the condition, and the
remaining features are small white noise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from progdistill.errors import ConfigError, DataError, ShapeError

MAGIC = b"STPD"
VERSION = 1
# frames, feature_dim, cond_len, cond_channels, count (u32); seed (u64); noise_sigma (f64)
_HEADER = struct.Struct("<4sB5IQd")


@dataclass(frozen=True)
class DataSpec:
    count: int
    seed: int
    frames: int = 16
    feature_dim: int = 4
    cond_len: int = 64
    cond_channels: int = 1
    noise_sigma: float = 0.05

    def __post_init__(self):
        for name in ("count", "frames", "feature_dim", "cond_len", "cond_channels"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"DataSpec.{name} must be a positive integer, got {value!r}")
        if self.cond_len % self.frames != 0:
            raise ConfigError(
                f"cond_len ({self.cond_len}) must be a multiple of frames ({self.frames})"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        if not (self.noise_sigma >= 0 and np.isfinite(self.noise_sigma)):
            raise ConfigError("noise_sigma must be finite and nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown DataSpec fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "DataSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"DataSpec JSON is malformed: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("DataSpec JSON must be an object")
        return cls.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Sample:
    frames: np.ndarray  # (F, D) float32
    cond: np.ndarray  # (L, C) float32, >= 0
    seed: int


@dataclass
class ToyDataset:
    """Stacked samples sharing one :class:`DataSpec`."""

    spec: DataSpec
    frames: np.ndarray  # (N, F, D) float32
    cond: np.ndarray  # (N, L, C) float32
    seeds: np.ndarray  # (N,) uint64

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, i) -> Sample:
        return Sample(self.frames[i], self.cond[i], int(self.seeds[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_samples(cls, spec: DataSpec, samples) -> "ToyDataset":
        samples = list(samples)
        if len(samples) != spec.count:
            raise ShapeError(f"expected {spec.count} samples, got {len(samples)}")
        frames = np.stack([s.frames for s in samples]).astype(np.float32, copy=False)
        cond = np.stack([s.cond for s in samples]).astype(np.float32, copy=False)
        seeds = np.array([s.seed for s in samples], dtype=np.uint64)
        ds = cls(spec, frames, cond, seeds)
        ds.validate()
        return ds

    def validate(self):
        s = self.spec
        if self.frames.shape != (s.count, s.frames, s.feature_dim):
            raise ShapeError(f"frames shape {self.frames.shape} does not match spec")
        if self.cond.shape != (s.count, s.cond_len, s.cond_channels):
            raise ShapeError(f"cond shape {self.cond.shape} does not match spec")
        if self.seeds.shape != (s.count,):
            raise ShapeError("seeds length does not match spec.count")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` of a dataset seeded by ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1, np.uint64)[0])


def frame_align(cond, frames: int) -> np.ndarray:
    """Average ``cond`` (L, C) over contiguous blocks of L/F steps and channels.

    Leading batch dimensions are allowed: (..., L, C) -> (..., F).
    """
    cond = np.asarray(cond)
    if cond.ndim < 2:
        raise ShapeError("cond must have shape (..., L, C)")
    L, C = cond.shape[-2:]
    if frames < 1 or L % frames != 0:
        raise ShapeError(f"cond length {L} is not a multiple of frame count {frames}")
    blocks = cond.reshape(*cond.shape[:-2], frames, (L // frames) * C)
    return blocks.mean(axis=-1)


def synthesize_sample(
    rng: np.random.Generator,
    spec: DataSpec,
    amplitude_range: tuple[float, float] = (0.5, 1.0),
    seed: int = 0,
) -> Sample:
    if not isinstance(spec, DataSpec):
        raise ConfigError("spec must be a DataSpec")
    F, D, L, C = spec.frames, spec.feature_dim, spec.cond_len, spec.cond_channels
    j = np.arange(L)
    cond = np.empty((L, C))
    for c in range(C):
        alpha = rng.uniform(*amplitude_range, size=3)
        freq = rng.uniform(1.0, 4.0, size=3)
        phase = rng.uniform(0.0, 2 * np.pi, size=3)
        waves = alpha[:, None] * np.sin(2 * np.pi * freq[:, None] * j[None, :] / L + phase[:, None])
        cond[:, c] = np.abs(waves.sum(axis=0))

    i = np.arange(F)
    x = np.zeros((F, D))
    mouth = frame_align(cond, F) + spec.noise_sigma * rng.standard_normal(F)
    amp = rng.uniform(0.0, 0.3)
    psi = rng.uniform(0.0, 2 * np.pi)
    head = (amp * np.sin(2 * np.pi * i / F + psi), amp * np.cos(2 * np.pi * i / F + psi))
    rest = 0.1 * rng.standard_normal((F, max(D - 3, 0)))
    channels = [mouth, *head]
    for d in range(min(D, 3)):
        x[:, d] = channels[d]
    if D > 3:
        x[:, 3:] = rest
    return Sample(x.astype(np.float32), cond.astype(np.float32), seed)


def make_sample(spec: DataSpec, index: int, **kwargs) -> Sample:
    return synthesize_sample(
        sample_rng(spec.seed, index), spec, seed=sample_seed(spec.seed, index), **kwargs
    )


def generate_dataset(spec: DataSpec) -> ToyDataset:
    return ToyDataset.from_samples(spec, (make_sample(spec, i) for i in range(spec.count)))


def write_dataset(dataset: ToyDataset, path) -> None:
    dataset.validate()
    s = dataset.spec
    header = _HEADER.pack(
        MAGIC, VERSION, s.frames, s.feature_dim, s.cond_len, s.cond_channels, s.count,
        s.seed, float(s.noise_sigma),
    )
    payload = b"".join(
        [
            header,
            dataset.seeds.astype("<u8").tobytes(),
            np.ascontiguousarray(dataset.frames, dtype="<f4").tobytes(),
            np.ascontiguousarray(dataset.cond, dtype="<f4").tobytes(),
        ]
    )
    Path(path).write_bytes(payload)


def read_dataset(path) -> ToyDataset:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataError("dataset file is shorter than its header")
    magic, version, F, D, L, C, N, seed, sigma = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"unsupported dataset version {version}")
    try:
        spec = DataSpec(
            count=N, seed=seed, frames=F, feature_dim=D, cond_len=L, cond_channels=C,
            noise_sigma=sigma,
        )
    except ConfigError as exc:
        raise DataError(f"corrupt header: {exc}") from exc
    expected = _HEADER.size + 8 * N + 4 * N * (F * D + L * C)
    if len(raw) != expected:
        raise DataError(f"payload length {len(raw)} does not match header (expected {expected})")
    off = _HEADER.size
    seeds = np.frombuffer(raw, "<u8", N, off).astype(np.uint64)
    off += 8 * N
    frames = np.frombuffer(raw, "<f4", N * F * D, off).reshape(N, F, D).astype(np.float32)
    off += 4 * N * F * D
    cond = np.frombuffer(raw, "<f4", N * L * C, off).reshape(N, L, C).astype(np.float32)
    return ToyDataset(spec, frames, cond, seeds)
