"""Stage 2: progressive adversarial distillation 4 -> 3 -> 2 -> 1 steps.

Each phase trains the student on a shorter schedule against a conditional
discriminator whose backbone starts as the 4-step model. During a warm-up
window the last timestep of the schedule is drawn between the previous
phase's final timestep and the target one. The generator loss mixes the
usual real-vs-student term with a self-compare term that uses samples from a
frozen copy of the 4-step model as the reference.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from progdistill.dmd import STUDENT_SCHEDULE
from progdistill.errors import ConfigError, NumericDivergence
from progdistill.flowcore import Schedule, check_finite, sample, sample_with_final_step_grad

log = logging.getLogger(__name__)

LOSS_KINDS = ("r3gan", "nonsaturating", "hinge")

TARGET_SCHEDULES = {
    0: STUDENT_SCHEDULE,
    1: Schedule((1.0, 0.75, 0.5)),
    2: Schedule((1.0, 0.75)),
    3: Schedule((1.0,)),
}


@dataclass
class StageConfig:
    k: int
    steps: int = 1000
    warmup: int = 500
    lam: float = 0.5
    gamma: float = 100.0
    sigma_r: float = 0.1
    loss_kind: str = "r3gan"
    lr_gen: float = 5e-5
    lr_disc: float = 2e-4
    batch_size: int = 64
    target_schedule: Schedule | None = None
    prev_final_t: float | None = None

    def __post_init__(self):
        if self.k not in (1, 2, 3):
            raise ConfigError(f"stage index must be 1, 2 or 3, got {self.k!r}")
        if self.target_schedule is None:
            self.target_schedule = TARGET_SCHEDULES[self.k]
        elif not isinstance(self.target_schedule, Schedule):
            self.target_schedule = Schedule(tuple(self.target_schedule))
        if self.prev_final_t is None:
            self.prev_final_t = TARGET_SCHEDULES[self.k - 1].last
        if not self.prev_final_t < self.target_schedule.last:
            raise ConfigError(
                f"prev_final_t ({self.prev_final_t}) must be below the target's last entry "
                f"({self.target_schedule.last})"
            )
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.gamma < 0 or self.sigma_r < 0:
            raise ConfigError("gamma and sigma_r must be nonnegative")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if self.steps < 0 or self.warmup < 0 or self.batch_size < 1:
            raise ConfigError("steps and warmup must be >= 0, batch_size >= 1")


def dynamic_sample(target: Schedule, prev_final_t: float, s: int, warmup: int, generator=None) -> Schedule:
    """Perturb the final timestep of ``target`` uniformly during warm-up."""
    last = target.last
    if prev_final_t >= last:
        raise ConfigError(f"prev_final_t ({prev_final_t}) must be below {last}")
    if s < 0:
        raise ConfigError("training step must be nonnegative")
    if s >= warmup:
        return target
    u = torch.rand((), generator=generator, dtype=torch.float64).item()
    t_last = prev_final_t + (last - prev_final_t) * u
    if t_last <= 0.0:
        t_last = last
    return Schedule(target.steps[:-1] + (t_last,))


class Discriminator(nn.Module):
    """Velocity-network backbone read at ``t = 0`` plus a pooled scalar head."""

    def __init__(self, backbone: nn.Module):
        super().__init__()
        H = backbone.cfg.hidden
        self.backbone = backbone
        ref = next(backbone.parameters())
        self.head = nn.Sequential(nn.Linear(H, H), nn.SiLU(), nn.Linear(H, 1)).to(dtype=ref.dtype, device=ref.device)
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)

    def forward(self, x, cond):
        tokens = self.backbone.encode(cond)
        h = self.backbone.features(x, torch.zeros((), dtype=x.dtype), tokens)
        return self.head(h.mean(dim=1)).squeeze(-1)


def disc_logit(disc: Discriminator, x, cond) -> torch.Tensor:
    return check_finite(disc(x, cond), "discriminator logit")


def adv_losses(loss_kind: str, d_real, d_fake):
    """Batch-mean (L_D, L_G) for one of ``LOSS_KINDS``."""
    if loss_kind == "r3gan":
        diff = d_real - d_fake
        return F.softplus(-diff).mean(), F.softplus(diff).mean()
    if loss_kind == "nonsaturating":
        return (F.softplus(-d_real) + F.softplus(d_fake)).mean(), F.softplus(-d_fake).mean()
    if loss_kind == "hinge":
        return (F.relu(1 - d_real) + F.relu(1 + d_fake)).mean(), (-d_fake).mean()
    raise ConfigError(f"unknown loss kind {loss_kind!r}")


def _perturbed_gap(d_clean, d_noisy):
    return (d_noisy - d_clean).pow(2).mean()


def reg_penalty(disc, x, cond, sigma_r: float, generator=None) -> torch.Tensor:
    """E ||D(x + sigma_r eps) - D(x)||^2."""
    if sigma_r < 0:
        raise ConfigError("sigma_r must be nonnegative")
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return check_finite(_perturbed_gap(disc_logit(disc, x, cond), disc_logit(disc, x + sigma_r * eps, cond)), "penalty")


def d_loss_terms(disc, x_real, x_fake, x_ref, cond, cfg: StageConfig, generator=None) -> dict:
    B = x_real.shape[0]
    xs = torch.cat([x_real, x_fake, x_ref]).detach()
    conds = torch.cat([cond, cond, cond])
    eps = torch.randn(xs.shape, generator=generator, dtype=xs.dtype)
    clean = disc_logit(disc, xs, conds)
    noisy = disc_logit(disc, xs + cfg.sigma_r * eps, conds)
    d_real, d_fake = clean[:B], clean[B : 2 * B]
    core, _ = adv_losses(cfg.loss_kind, d_real, d_fake)
    r1, r2, r3 = (_perturbed_gap(clean[i * B : (i + 1) * B], noisy[i * B : (i + 1) * B]) for i in range(3))
    total = core + (cfg.gamma / 3) * (r1 + r2 + r3)
    return {"total": check_finite(total, "discriminator loss"), "core": core, "r1": r1, "r2": r2, "r3": r3}


def d_loss_total(disc, x_real, x_fake, x_ref, cond, cfg: StageConfig, generator=None) -> torch.Tensor:
    return d_loss_terms(disc, x_real, x_fake, x_ref, cond, cfg, generator)["total"]


def g_loss_terms(disc, x_fake, x_real, x_ref, cond, lam: float, loss_kind: str) -> dict:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    d_fake = disc_logit(disc, x_fake, cond)
    with torch.no_grad():
        d_real = disc_logit(disc, x_real, cond)
        d_ref = disc_logit(disc, x_ref, cond)
    _, g_real = adv_losses(loss_kind, d_real, d_fake)
    _, g_self = adv_losses(loss_kind, d_ref, d_fake)
    total = (1 - lam) * g_real + lam * g_self
    return {"total": check_finite(total, "generator loss"), "real": g_real, "self": g_self}


def g_loss_total(disc, x_fake, x_real, x_ref, cond, lam: float, loss_kind: str) -> torch.Tensor:
    return g_loss_terms(disc, x_fake, x_real, x_ref, cond, lam, loss_kind)["total"]


@dataclass
class RefGenerator:
    """Frozen copy of the 4-step model producing self-compare references."""

    model: nn.Module
    schedule: Schedule = STUDENT_SCHEDULE

    @classmethod
    def freeze(cls, model: nn.Module, schedule: Schedule = STUDENT_SCHEDULE) -> "RefGenerator":
        frozen = copy.deepcopy(model).eval()
        for p in frozen.parameters():
            p.requires_grad_(False)
        return cls(frozen, schedule)


def gen_reference(ref: RefGenerator, z0, cond) -> torch.Tensor:
    return sample(ref.model, ref.schedule, z0, cond)


@dataclass
class StageState:
    """Mutable training state carried across phases."""

    gen: nn.Module
    disc: Discriminator
    ref: RefGenerator
    opt_gen: torch.optim.Optimizer | None = None
    opt_disc: torch.optim.Optimizer | None = None
    history: list = field(default_factory=list)


def make_state(init_gen: nn.Module, generator=None) -> StageState:
    """Fresh generator, discriminator and frozen reference from ``init_gen``.

    The discriminator head is initialized from a seed drawn from ``generator``.
    """
    gen = copy.deepcopy(init_gen).train()
    for p in gen.parameters():
        p.requires_grad_(True)
    head_seed = int(torch.randint(2**62, (), generator=generator))
    with torch.random.fork_rng():
        torch.manual_seed(head_seed)
        disc = Discriminator(copy.deepcopy(init_gen)).train()
    for p in disc.parameters():
        p.requires_grad_(True)
    return StageState(gen=gen, disc=disc, ref=RefGenerator.freeze(init_gen))


def _finite_grads(params) -> bool:
    return all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in params)


def run_stage(state: StageState, frames: torch.Tensor, cond_bank: torch.Tensor, cfg: StageConfig, generator, on_step=None):
    """Run one phase in place on ``state``; one disc update then one gen update per step."""
    gen, disc = state.gen, state.disc
    gen_params = list(gen.parameters())
    disc_params = list(disc.parameters())
    if state.opt_gen is None:
        state.opt_gen = torch.optim.Adam(gen_params, lr=cfg.lr_gen, betas=(0.0, 0.99))
    if state.opt_disc is None:
        state.opt_disc = torch.optim.Adam(disc_params, lr=cfg.lr_disc, betas=(0.0, 0.99))
    for opt, lr in ((state.opt_gen, cfg.lr_gen), (state.opt_disc, cfg.lr_disc)):
        for group in opt.param_groups:
            group["lr"] = lr
    n = frames.shape[0]
    dtype = frames.dtype
    shape = (cfg.batch_size, gen.frames, gen.feature_dim)

    for s in range(cfg.steps):
        schedule = dynamic_sample(cfg.target_schedule, cfg.prev_final_t, s, cfg.warmup, generator)
        idx = torch.randint(n, (cfg.batch_size,), generator=generator)
        x_real, cond = frames[idx], cond_bank[idx]
        z0 = torch.randn(shape, generator=generator, dtype=dtype)
        x_fake = sample_with_final_step_grad(gen, schedule, z0, cond)
        x_ref = gen_reference(state.ref, z0, cond)

        d_terms = d_loss_terms(disc, x_real, x_fake, x_ref, cond, cfg, generator)
        state.opt_disc.zero_grad(set_to_none=True)
        d_terms["total"].backward(inputs=disc_params)
        if not _finite_grads(disc_params):
            raise NumericDivergence("non-finite discriminator gradient", step=s)
        state.opt_disc.step()

        g_terms = g_loss_terms(disc, x_fake, x_real, x_ref, cond, cfg.lam, cfg.loss_kind)
        state.opt_gen.zero_grad(set_to_none=True)
        g_terms["total"].backward(inputs=gen_params)
        if not _finite_grads(gen_params):
            raise NumericDivergence("non-finite generator gradient", step=s)
        state.opt_gen.step()

        record = {
            "stage": cfg.k,
            "step": s,
            "t_last": schedule.last,
            "loss_d": d_terms["total"].item(),
            "loss_d_core": d_terms["core"].item(),
            "r1": d_terms["r1"].item(),
            "r2": d_terms["r2"].item(),
            "r3": d_terms["r3"].item(),
            "loss_g": g_terms["total"].item(),
            "loss_g_real": g_terms["real"].item(),
            "loss_g_self": g_terms["self"].item(),
        }
        state.history.append(record)
        if on_step is not None:
            on_step(record)
    return state


def run_progressive(init_gen, frames, cond_bank, cfgs, generator, on_stage_end=None, on_step=None):
    """Chain :func:`run_stage` over ``cfgs``; returns the final :class:`StageState`.

    ``on_stage_end(cfg, state)`` fires after every phase (checkpointing hook).
    """
    ks = [c.k for c in cfgs]
    if ks != sorted(ks) or len(set(ks)) != len(ks):
        raise ConfigError(f"stages must be ordered and unique, got {ks}")
    state = make_state(init_gen, generator)
    for cfg in cfgs:
        try:
            run_stage(state, frames, cond_bank, cfg, generator, on_step)
        except NumericDivergence as exc:
            if exc.state is None:
                exc.state = {k: v.detach().clone() for k, v in state.gen.state_dict().items()}
            raise
        if on_stage_end is not None:
            on_stage_end(cfg, state)
    return state


def stage_configs(steps: int = 1000, warmup: int = 500, **overrides) -> list[StageConfig]:
    return [StageConfig(k=k, steps=steps, warmup=warmup, **overrides) for k in (1, 2, 3)]

