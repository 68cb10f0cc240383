"""End-to-end orchestration: teacher training, DMD, progressive adversarial
distillation, evaluation. All randomness is derived from ``RunConfig.seed``."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import replace
from pathlib import Path

import torch

from progdistill.condnet import VelocityNet
from progdistill.dmd import run_dmd
from progdistill.errors import ConfigError, DataError, NumericDivergence
from progdistill.flowcore import Schedule, fm_loss, uniform_schedule
from progdistill.metrics import MetricsReport, measure
from progdistill.pad import TARGET_SCHEDULES, StageConfig, run_progressive
from progdistill.runner.checkpoint import Checkpoint, from_model, load_checkpoint, save_checkpoint
from progdistill.runner.config import RunConfig, derive_seed
from progdistill.toydata import ToyDataset, generate_dataset

log = logging.getLogger(__name__)

TEACHER_STAGE = -1
PAD_LOG_FIELDS = (
    "stage", "step", "t_last", "loss_d", "loss_d_core", "r1", "r2", "r3",
    "loss_g", "loss_g_real", "loss_g_self", "self_share",
)


def torch_generator(seed: int, *keys) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, *keys) % 2**63)


def new_model(cfg: RunConfig, data: ToyDataset) -> VelocityNet:
    s = data.spec
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(cfg.seed, "init") % 2**63)
        return VelocityNet(s.frames, s.feature_dim, s.cond_channels, cfg.net)


def tensors(data: ToyDataset):
    return torch.from_numpy(data.frames.copy()), torch.from_numpy(data.cond.copy())


def holdout_set(data: ToyDataset, seed: int, count: int) -> ToyDataset:
    """Held-out data from the training distribution under an independent seed."""
    return generate_dataset(replace(data.spec, seed=derive_seed(seed, "holdout"), count=count))


def schedule_for_nfe(nfe: int, guidance: float | None) -> Schedule:
    """Sampling schedule that spends exactly ``nfe`` evaluations per sample."""
    if guidance is not None:
        if nfe % 2:
            raise ConfigError("guided sampling needs an even NFE")
        return uniform_schedule(nfe // 2)
    if 1 <= nfe <= 4:
        return TARGET_SCHEDULES[4 - nfe]
    return uniform_schedule(nfe)


def train_teacher(cfg: RunConfig, data: ToyDataset, on_step=None) -> VelocityNet:
    tc = cfg.teacher
    net = new_model(cfg, data).train()
    frames, cond = tensors(data)
    g = torch_generator(cfg.seed, "teacher")
    opt = torch.optim.AdamW(net.parameters(), lr=tc.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / max(tc.warmup, 1)))
    for step in range(tc.steps):
        idx = torch.randint(frames.shape[0], (tc.batch_size,), generator=g)
        loss = fm_loss(net, frames[idx], cond[idx], g, cond_dropout=tc.cond_dropout)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), tc.grad_clip)
        opt.step()
        sched.step()
        if on_step is not None:
            on_step(step, loss.item())
    return net.eval()


def distill_dmd(cfg: RunConfig, teacher: VelocityNet, data: ToyDataset, on_step=None) -> VelocityNet:
    _, cond = tensors(data)
    gen, _ = run_dmd(teacher, cond, cfg.dmd, torch_generator(cfg.seed, "dmd"), on_step=on_step)
    return gen.eval()


def distill_pad(cfg: RunConfig, init_gen: VelocityNet, data: ToyDataset, stages: list[StageConfig] | None = None, on_stage_end=None, log_path=None, seed_key: str = "pad"):
    stages = cfg.pad if stages is None else stages
    frames, cond = tensors(data)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=PAD_LOG_FIELDS)
        writer.writeheader()

    def on_step(rec):
        if writer is not None:
            g_total = rec["loss_g"]
            rec = dict(rec, self_share=0.0 if g_total == 0 else rec["loss_g_self"] / g_total)
            writer.writerow({k: rec[k] for k in PAD_LOG_FIELDS})

    try:
        state = run_progressive(
            init_gen, frames, cond, stages, torch_generator(cfg.seed, seed_key),
            on_stage_end=on_stage_end, on_step=on_step,
        )
    finally:
        if fh is not None:
            fh.close()
    return state.gen.eval()


def save_model(net, path, stage, step, schedule, cfg: RunConfig, **extra) -> Checkpoint:
    ckpt = from_model(net, stage, step, schedule, cfg.seed, cfg.config_hash())
    ckpt.extra.update(extra)
    save_checkpoint(ckpt, path)
    return ckpt


def cache_key(cfg: RunConfig, data: ToyDataset, scope: str) -> str:
    """Identifies a stage's inputs: the scoped config plus the training data bytes."""
    h = hashlib.sha256(cfg.scoped_hash(scope).encode())
    h.update(data.frames.tobytes())
    h.update(data.cond.tobytes())
    return h.hexdigest()


def _cached(path: Path, key: str):
    if not path.exists():
        return None
    try:
        ckpt = load_checkpoint(path)
    except DataError:
        return None
    if ckpt.extra.get("cache_key") != key:
        return None
    return ckpt


def _save_divergence(exc: NumericDivergence, template: VelocityNet, path, stage, schedule, cfg):
    if exc.state is not None:
        template.load_state_dict(exc.state)
        save_model(template, path, stage, exc.step or 0, schedule, cfg, diverged=True)


def prepare_stage0(cfg: RunConfig, data: ToyDataset, out_dir, progress=None) -> dict:
    """Teacher and DMD student under ``out_dir``, reusing matching checkpoints.

    Returns ``{"teacher": path, "stage0": path}``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"teacher": out / "teacher.ckpt", "stage0": out / "stage0.ckpt"}

    teacher_key, dmd_key = cache_key(cfg, data, "teacher"), cache_key(cfg, data, "dmd")
    ckpt = _cached(paths["teacher"], teacher_key)
    teacher = None
    if ckpt is None:
        if progress:
            progress("training teacher")
        teacher = train_teacher(cfg, data)
        save_model(teacher, paths["teacher"], TEACHER_STAGE, cfg.teacher.steps,
                   uniform_schedule(cfg.teacher.sample_steps), cfg,
                   guidance_w=cfg.teacher.guidance_w, cache_key=teacher_key)

    if _cached(paths["stage0"], dmd_key) is None:
        if teacher is None:
            teacher = ckpt.build_model().eval()
        if progress:
            progress("distilling 4-step student (DMD)")
        try:
            gen = distill_dmd(cfg, teacher, data)
        except NumericDivergence as exc:
            _save_divergence(exc, new_model(cfg, data), paths["stage0"], 0, cfg.dmd.student_schedule, cfg)
            raise
        save_model(gen, paths["stage0"], 0, cfg.dmd.steps, cfg.dmd.student_schedule, cfg, cache_key=dmd_key)
    return paths


def run_pipeline(cfg: RunConfig, data: ToyDataset, out_dir=None, progress=None) -> dict:
    """Teacher -> DMD -> stages 1..3, checkpointing each; reuses matching checkpoints.

    Returns a dict of paths keyed by ``teacher``, ``stage0``, ``stage1`` ...
    """
    out = Path(out_dir or cfg.out_dir)
    paths = prepare_stage0(cfg, data, out, progress)
    gen = load_checkpoint(paths["stage0"]).build_model().eval()

    last = f"stage{cfg.pad[-1].k}" if cfg.pad else "stage0"
    stage_paths = {f"stage{s.k}": out / f"stage{s.k}.ckpt" for s in cfg.pad}
    paths.update(stage_paths)
    pad_key = cache_key(cfg, data, "all")
    if cfg.pad and all(_cached(p, pad_key) is not None for p in stage_paths.values()):
        return paths
    if progress:
        progress("progressive adversarial distillation")

    def on_stage_end(stage_cfg, state):
        save_model(state.gen, stage_paths[f"stage{stage_cfg.k}"], stage_cfg.k, stage_cfg.steps,
                   stage_cfg.target_schedule, cfg, cache_key=pad_key)

    try:
        distill_pad(cfg, gen, data, on_stage_end=on_stage_end, log_path=out / "pad_log.csv")
    except NumericDivergence as exc:
        _save_divergence(exc, new_model(cfg, data), out / f"{last}.diverged.ckpt", cfg.pad[-1].k,
                         cfg.pad[-1].target_schedule, cfg)
        raise
    return paths


def evaluate_checkpoint(path, heldout: ToyDataset, nfe: int, n_eval: int, seed: int) -> MetricsReport:
    ckpt = load_checkpoint(path)
    model = ckpt.build_model().eval()
    guidance = ckpt.extra.get("guidance_w")
    if guidance is None and nfe == len(ckpt.schedule):
        schedule = ckpt.schedule
    else:
        schedule = schedule_for_nfe(nfe, guidance)
    return measure(model, schedule, heldout, n_eval, derive_seed(seed, "eval") % 2**63, guidance=guidance)
