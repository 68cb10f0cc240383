"""Stage 1: distribution matching distillation into a 4-step student.

The teacher (guided) and a trainable critic both predict clean samples from a
re-noised student output; their difference is the distribution-matching
direction, pulled back through the student's final denoising step.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import torch

from progdistill.errors import ConfigError, NumericDivergence
from progdistill.flowcore import (
    Schedule,
    check_finite,
    fm_loss,
    forward_diffuse,
    guided_velocity,
    sample,
    sample_with_final_step_grad,
)

log = logging.getLogger(__name__)

STUDENT_SCHEDULE = Schedule((1.0, 0.75, 0.5, 0.25))


@dataclass
class DmdConfig:
    student_schedule: Schedule = STUDENT_SCHEDULE
    renoise_range: tuple[float, float] = (0.02, 0.98)
    # None = unguided teacher target; guided targets over-sharpen the mouth channel
    guidance_w: float | None = None
    critic_per_gen: int = 5
    steps: int = 1000
    lr_gen: float = 1e-4
    lr_critic: float = 2e-4
    batch_size: int = 64
    # paper-scale generator learning rate, kept for the record only
    paper_lr_gen: float = field(default=4e-7, repr=False)

    def __post_init__(self):
        if not isinstance(self.student_schedule, Schedule):
            self.student_schedule = Schedule(tuple(self.student_schedule))
        lo, hi = self.renoise_range
        if not 0 < lo < hi < 1:
            raise ConfigError(f"renoise_range must satisfy 0 < lo < hi < 1, got {self.renoise_range}")
        self.renoise_range = (float(lo), float(hi))
        if self.critic_per_gen < 1:
            raise ConfigError("critic_per_gen must be >= 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr_gen <= 0 or self.lr_critic <= 0:
            raise ConfigError("learning rates must be positive")


def x0_from_v(z: torch.Tensor, t, v: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=z.dtype, device=z.device)
    return z - t.reshape(t.shape + (1,) * (z.ndim - t.ndim)) * v


def dmd_generator_step(gen, teacher, critic, cond, cfg: DmdConfig, generator=None, z0=None):
    """Surrogate loss whose generator gradient is the DMD direction.

    Returns ``0.5 * ||x - sg(x - g)||^2`` averaged over the batch, where
    ``g = (x_fake - x_real) / mean|x_real - x_fake|`` per sample.
    """
    B = cond.shape[0]
    shape = (B, gen.frames, gen.feature_dim)
    dtype = next(gen.parameters()).dtype
    if z0 is None:
        z0 = torch.randn(shape, generator=generator, dtype=dtype)
    x = sample_with_final_step_grad(gen, cfg.student_schedule, z0, cond)

    lo, hi = cfg.renoise_range
    with torch.no_grad():
        t = lo + (hi - lo) * torch.rand(B, generator=generator, dtype=dtype)
        eps = torch.randn(shape, generator=generator, dtype=dtype)
        z = forward_diffuse(x.detach(), t, eps)
        x_real = x0_from_v(z, t, guided_velocity(teacher, z, t, cond, cfg.guidance_w))
        x_fake = x0_from_v(z, t, critic(z, t, cond))
        diff = x_fake - x_real
        eta = diff.abs().mean(dim=(1, 2), keepdim=True) + 1e-8
        g = diff / eta
        target = x.detach() - g
    loss = 0.5 * (x - target).pow(2).sum(dim=(1, 2)).mean()
    return check_finite(loss, "DMD surrogate")


def student_samples(gen, cond, schedule: Schedule, generator=None) -> torch.Tensor:
    dtype = next(gen.parameters()).dtype
    z0 = torch.randn((cond.shape[0], gen.frames, gen.feature_dim), generator=generator, dtype=dtype)
    return sample(gen, schedule, z0, cond)


def critic_step(critic, gen, cond, cfg: DmdConfig, generator=None) -> torch.Tensor:
    """Flow-matching loss of the critic on detached student samples."""
    x = student_samples(gen, cond, cfg.student_schedule, generator)
    return fm_loss(critic, x, cond, generator)


def _assert_finite_grads(module, what, step):
    for p in module.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericDivergence(f"non-finite gradient in {what}", step=step)


def run_dmd(teacher, cond_bank: torch.Tensor, cfg: DmdConfig, generator: torch.Generator, on_step=None, gen=None, critic=None):
    """Train a 4-step student from ``teacher`` on conditions drawn from ``cond_bank``.

    Unless given, the generator and the critic start as copies of the teacher.
    Returns ``(gen, critic)``. On divergence raises :class:`NumericDivergence`
    whose ``state`` is the last finite generator state dict.
    """
    gen = (gen if gen is not None else copy.deepcopy(teacher)).train()
    critic = (critic if critic is not None else copy.deepcopy(teacher)).train()
    teacher = teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_gen, betas=(0.0, 0.99))
    opt_c = torch.optim.Adam(critic.parameters(), lr=cfg.lr_critic, betas=(0.0, 0.99))
    n = cond_bank.shape[0]

    def batch():
        idx = torch.randint(n, (cfg.batch_size,), generator=generator)
        return cond_bank[idx]

    step = 0
    try:
        for step in range(cfg.steps):
            for _ in range(cfg.critic_per_gen):
                loss_c = critic_step(critic, gen, batch(), cfg, generator)
                opt_c.zero_grad(set_to_none=True)
                loss_c.backward()
                _assert_finite_grads(critic, "critic", step)
                opt_c.step()
            loss_g = dmd_generator_step(gen, teacher, critic, batch(), cfg, generator)
            opt_g.zero_grad(set_to_none=True)
            loss_g.backward(inputs=list(gen.parameters()))
            _assert_finite_grads(gen, "generator", step)
            opt_g.step()
            if on_step is not None:
                on_step(step, {"loss_gen": loss_g.item(), "loss_critic": loss_c.item()})
    except NumericDivergence as exc:
        exc.state = {k: v.detach().clone() for k, v in gen.state_dict().items()}
        exc.step = step
        raise
    return gen, critic
