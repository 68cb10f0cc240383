"""Rectified-flow primitives: forward process, schedules, Euler samplers,
flow-matching loss, classifier-free guidance and NFE accounting.

Convention: ``z_t = (1 - t) x + t eps`` with ``t = 1`` pure noise, ``t = 0``
clean data, and velocity target ``eps - x``. Sampling integrates from the
first schedule entry down to an implicit terminal ``t = 0``.

Models are callables ``model(z, t, cond)`` where ``z`` is ``(B, F, D)``, ``t``
is a ``(B,)`` tensor and ``cond`` is whatever conditioning the model consumes
(``None`` requests the unconditional branch).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from progdistill.errors import ConfigError, NumericDivergence, ShapeError


@dataclass(frozen=True)
class Schedule:
    """Strictly decreasing timesteps in (0, 1]; the terminal 0 is implicit."""

    steps: tuple[float, ...]

    def __post_init__(self):
        steps = tuple(float(t) for t in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ConfigError("schedule must be nonempty")
        if not all(0.0 < t <= 1.0 for t in steps):
            raise ConfigError(f"schedule entries must lie in (0, 1]: {steps}")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ConfigError(f"schedule must be strictly decreasing: {steps}")

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, i):
        return self.steps[i]

    @property
    def last(self) -> float:
        return self.steps[-1]

    def pairs(self):
        """(t_i, t_{i+1}) for every update, ending at the implicit 0."""
        return list(zip(self.steps, self.steps[1:] + (0.0,)))

    def to_list(self) -> list[float]:
        return list(self.steps)


def uniform_schedule(n: int) -> Schedule:
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"uniform_schedule needs n >= 1, got {n!r}")
    return Schedule(tuple(1.0 - j / n for j in range(n)))


@dataclass
class NfeCounter:
    evals: int = 0

    def add(self, n: int = 1):
        self.evals += n


def _time_tensor(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        t = t.expand(like.shape[0])
    return t


def _bcast(t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def forward_diffuse(x: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    if x.shape != eps.shape:
        raise ShapeError(f"x {tuple(x.shape)} and eps {tuple(eps.shape)} differ")
    t = _bcast(t, x)
    return (1 - t) * x + t * eps


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericDivergence(f"non-finite values in {what}")
    return x


def fm_loss(
    model,
    x: torch.Tensor,
    cond,
    generator: torch.Generator | None = None,
    *,
    t_min: float = 0.001,
    cond_dropout: float = 0.0,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over the batch of ``||v(z_t, t, c) - (eps - x)||^2 / (F D)``.

    ``t`` and ``eps`` are drawn from ``generator`` unless supplied. With
    ``cond_dropout > 0`` a per-sample mask is passed to the model as
    ``drop_mask`` so it can swap in its unconditional embedding.
    """
    B = x.shape[0]
    if t is None:
        t = t_min + (1 - t_min) * torch.rand(B, generator=generator, dtype=x.dtype)
    if eps is None:
        eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    z = forward_diffuse(x, t, eps)
    if cond_dropout > 0:
        drop = torch.rand(B, generator=generator) < cond_dropout
        v = model(z, t, cond, drop_mask=drop)
    else:
        v = model(z, t, cond)
    loss = F.mse_loss(v, eps - x)
    return check_finite(loss, "flow-matching loss")


def guided_velocity(model, z, t, cond, w: float | None = None, counter: NfeCounter | None = None):
    """Conditional velocity, or ``v_u + w (v_c - v_u)`` when ``w`` is given."""
    v_c = model(z, t, cond)
    if w is None:
        if counter is not None:
            counter.add(1)
        return v_c
    v_u = model(z, t, None)
    if counter is not None:
        counter.add(2)
    return v_u + w * (v_c - v_u)


def _integrate(model, schedule, z0, cond, guidance, counter, grad_last):
    if not isinstance(schedule, Schedule):
        schedule = Schedule(tuple(schedule))
    check_finite(z0, "initial noise")
    z = z0
    pairs = schedule.pairs()
    for i, (t_cur, t_next) in enumerate(pairs):
        tt = _time_tensor(t_cur, z0)
        track = grad_last and i == len(pairs) - 1
        with torch.set_grad_enabled(track and torch.is_grad_enabled()):
            v = guided_velocity(model, z, tt, cond, guidance, counter)
            if not track:
                v = v.detach()
            z = z - v * (t_cur - t_next)
    return check_finite(z, "sampler output")


def sample(model, schedule, z0, cond, guidance: float | None = None, counter: NfeCounter | None = None):
    """Euler integration of ``model`` along ``schedule`` without gradients."""
    with torch.no_grad():
        return _integrate(model, schedule, z0, cond, guidance, counter, grad_last=False)


def sample_with_final_step_grad(model, schedule, z0, cond, counter: NfeCounter | None = None):
    """Same forward values as :func:`sample`; only the last update is differentiable."""
    return _integrate(model, schedule, z0, cond, None, counter, grad_last=True)
