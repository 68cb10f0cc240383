"""Sample-quality metrics on raw frame features and NFE / wall-clock accounting."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from progdistill.errors import DataError, ShapeError
from progdistill.flowcore import NfeCounter, Schedule, sample
from progdistill.toydata import ToyDataset, frame_align

log = logging.getLogger(__name__)

COV_EPS = 1e-6


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def of(cls, X) -> "GaussianFit":
        X = _features(X)
        return cls(X.mean(axis=0), np.cov(X, rowvar=False).reshape(X.shape[1], X.shape[1]), X.shape[0])


def _features(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(X.shape[0], -1) if X.ndim != 2 else X
    if not np.isfinite(X).all():
        raise DataError("non-finite features")
    return X


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_fits(f1: GaussianFit, f2: GaussianFit, eps: float = COV_EPS) -> float:
    if f1.mean.shape != f2.mean.shape:
        raise ShapeError(f"feature dims differ: {f1.mean.shape} vs {f2.mean.shape}")
    d = f1.mean.shape[0]
    s1 = f1.cov + eps * np.eye(d)
    s2 = f2.cov + eps * np.eye(d)
    r1 = _sqrt_psd(s1)
    cross = _sqrt_psd(r1 @ s2 @ r1)
    trace = np.trace(s1) + np.trace(s2) - 2 * np.trace(cross)
    mean_term = float(np.sum((f1.mean - f2.mean) ** 2))
    return mean_term + max(float(trace), 0.0)


def frechet_distance(X, Y) -> float:
    """Fréchet distance between Gaussian fits of flattened samples."""
    X, Y = _features(X), _features(Y)
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"feature dims differ: {X.shape[1]} vs {Y.shape[1]}")
    return frechet_from_fits(GaussianFit.of(X), GaussianFit.of(Y))


def _mean_pair_dist(A, B, rng, max_pairs):
    n, m = A.shape[0], B.shape[0]
    if n * m <= max_pairs:
        total = 0.0
        for start in range(0, n, 512):
            diff = A[start : start + 512, None, :] - B[None, :, :]
            total += np.sqrt((diff**2).sum(-1)).sum()
        return total / (n * m)
    i = rng.integers(0, n, max_pairs)
    j = rng.integers(0, m, max_pairs)
    return float(np.linalg.norm(A[i] - B[j], axis=1).mean())


def energy_distance(X, Y, rng: np.random.Generator | None = None, max_pairs: int = 4_000_000) -> float:
    """``2 E|x-y| - E|x-x'| - E|y-y'|`` over the empirical distributions.

    All pairs (including self-pairs) are used when the pair count is at most
    ``max_pairs``; otherwise pairs are drawn from ``rng``.
    """
    X, Y = _features(X), _features(Y)
    if X.shape[1] != Y.shape[1]:
        raise ShapeError("feature dims differ")
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise DataError("energy distance needs at least two samples per set")
    rng = rng if rng is not None else np.random.default_rng(0)
    e = 2 * _mean_pair_dist(X, Y, rng, max_pairs) - _mean_pair_dist(X, X, rng, max_pairs) - _mean_pair_dist(Y, Y, rng, max_pairs)
    return max(float(e), 0.0)


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na == 0 or nb == 0:
        return None
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


def sync_correlation(frames, cond) -> float:
    """Mean per-sample Pearson correlation of feature 0 with the aligned envelope."""
    frames = np.asarray(frames, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise DataError("sync_correlation needs a nonempty (N, F, D) batch")
    if frames.shape[1] < 2:
        raise DataError("sync_correlation needs at least two frames")
    envelope = frame_align(cond, frames.shape[1])
    corrs = []
    degenerate = 0
    for env, mouth in zip(envelope, frames[:, :, 0]):
        r = _pearson(env, mouth)
        if r is None:
            degenerate += 1
            r = 0.0
        corrs.append(r)
    if degenerate:
        log.warning("sync_correlation: %d constant series scored as 0", degenerate)
    return float(np.mean(corrs))


@dataclass
class MetricsReport:
    fd: float
    energy: float
    sync: float
    nfe: int
    wall_ms: float
    nfe_per_sample: int

    CSV_FIELDS = ("fd", "energy", "sync", "nfe", "wall_ms", "nfe_per_sample")

    def to_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}

    def comparable(self) -> dict:
        d = asdict(self)
        d.pop("wall_ms")
        return d


def generate(model, schedule, cond: torch.Tensor, z0: torch.Tensor, guidance=None, chunk: int = 256):
    """Batched sampling; returns (samples, counter, per-sample wall-clock ms per chunk)."""
    counter = NfeCounter()
    outs, per_sample_ms = [], []
    for start in range(0, cond.shape[0], chunk):
        c, z = cond[start : start + chunk], z0[start : start + chunk]
        tic = time.perf_counter()
        outs.append(sample(model, schedule, z, c, guidance, counter))
        per_sample_ms.append(1000 * (time.perf_counter() - tic) / c.shape[0])
    return torch.cat(outs), counter, per_sample_ms


def measure(model, schedule: Schedule, data: ToyDataset, n_eval: int, seed: int, guidance: float | None = None, chunk: int = 64) -> MetricsReport:
    """Generate ``n_eval`` samples for held-out conditions and score them.

    Conditions and their real frames are the first ``n_eval`` items of the
    held-out set. NFE counts are per generated sample (independent of batching).
    """
    if n_eval < 64:
        raise DataError("n_eval must be at least 64")
    if n_eval > len(data):
        raise DataError(f"held-out set has {len(data)} samples, need {n_eval}")
    dtype = next(model.parameters()).dtype
    cond = torch.as_tensor(data.cond[:n_eval], dtype=dtype)
    real = data.frames[:n_eval]
    g = torch.Generator().manual_seed(seed)
    z0 = torch.randn((n_eval, *real.shape[1:]), generator=g, dtype=dtype)
    was_training = model.training
    model.eval()
    try:
        fake, counter, per_sample_ms = generate(model, schedule, cond, z0, guidance, chunk)
    finally:
        model.train(was_training)
    # every chunk runs the same schedule, so calls per chunk = NFE per sample
    nfe_per_sample = counter.evals // len(per_sample_ms)
    fake = fake.double().numpy()
    return MetricsReport(
        fd=frechet_distance(fake, real),
        energy=energy_distance(fake, real, np.random.default_rng(seed)),
        sync=sync_correlation(fake, data.cond[:n_eval]),
        nfe=nfe_per_sample * n_eval,
        wall_ms=float(np.median(per_sample_ms)),
        nfe_per_sample=nfe_per_sample,
    )


REPORT_FIELDS = tuple(f.name for f in fields(MetricsReport))
