"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7-11 need desk-scale training runs (about 30 minutes per seed on one
CPU core). Their results are cached under ``.acceptance/`` in the repository
root, or ``$PROGDISTILL_ACCEPT_DIR``, keyed by the run config hash, so reruns
only re-evaluate.
"""

import copy
import csv
import math
import os
from pathlib import Path
from statistics import median

import numpy as np
import pytest
import torch
from scipy import linalg

from conftest import ConstVelocity, central_fd_grad, mini_inputs, mini_net, rel_error, tiny_run_config
from progdistill.dmd import DmdConfig, dmd_generator_step
from progdistill.errors import NumericDivergence
from progdistill.flowcore import NfeCounter, Schedule, fm_loss, sample, sample_with_final_step_grad, uniform_schedule
from progdistill.metrics import GaussianFit, energy_distance, frechet_distance, frechet_from_fits, measure
from progdistill.pad import (
    TARGET_SCHEDULES,
    Discriminator,
    StageConfig,
    adv_losses,
    d_loss_terms,
    d_loss_total,
    dynamic_sample,
    g_loss_terms,
    g_loss_total,
    reg_penalty,
)
from progdistill.runner.ablate import TOGGLES, AblationGrid, ablate
from progdistill.runner.checkpoint import load_checkpoint, save_checkpoint
from progdistill.runner.config import EvalConfig, RunConfig
from progdistill.runner.pipeline import evaluate_checkpoint, holdout_set, run_pipeline
from progdistill.toydata import DataSpec, generate_dataset, read_dataset, write_dataset

D64 = torch.float64
ROOT = Path(__file__).resolve().parents[1]
ACCEPT_DIR = Path(os.environ.get("PROGDISTILL_ACCEPT_DIR", ROOT / ".acceptance"))
SEEDS = (0, 1, 2)
LAMBDAS = (0.1, 0.3, 0.5, 0.7, 0.9)
FULL = "sr1-dt1-sc1-r3gan-lam0.50"
DIRECT = "sr0-dt0-sc0-r3gan-lam0.00"
N_EVAL = 4096

RESULTS: dict = {}


def report(n: int, ok: bool, detail: str):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def desk_config(seed: int) -> RunConfig:
    return RunConfig(seed=seed, eval=EvalConfig(n_eval=N_EVAL, holdout_count=N_EVAL))


# ---------------------------------------------------------------- 1
def test_c01_loss_unit_values():
    z = torch.tensor([0.0, 1.7, -3.2], dtype=D64)
    ld, lg = adv_losses("r3gan", z, z)
    err = max(abs(ld.item() - math.log(2)), abs(lg.item() - math.log(2)))

    disc = Discriminator(mini_net(0))  # last head layer is zero-initialized
    x, cond = mini_inputs(batch=4)
    zero_head = reg_penalty(disc, x, cond, 0.1, torch.Generator().manual_seed(0)).item()
    trained = Discriminator(mini_net(0))
    with torch.no_grad():
        for p in trained.head.parameters():
            p.normal_()
    zero_sigma = reg_penalty(trained, x, cond, 0.0, torch.Generator().manual_seed(0)).item()
    terms = d_loss_terms(trained, x, x + 1, x - 1, cond, StageConfig(k=1, sigma_r=0.0), torch.Generator().manual_seed(0))
    zero_sigma_terms = max(terms[k].item() for k in ("r1", "r2", "r3"))

    g = g_loss_terms(trained, x, x + 1, x - 1, cond, 0.0, "r3gan")
    bitwise = torch.equal(g["total"], g["real"])
    ok = err < 1e-9 and zero_head == 0.0 and zero_sigma == 0.0 and zero_sigma_terms == 0.0 and bitwise
    report(1, ok, f"|L-ln2|={err:.1e}; penalties {zero_head}, {zero_sigma}, {zero_sigma_terms}; lam=0 bitwise={bitwise}")


# ---------------------------------------------------------------- 2
def test_c02_gradient_suite():
    errs = {}
    x, cond = mini_inputs(batch=3)
    g = torch.Generator().manual_seed(4)
    t = torch.rand(3, generator=g, dtype=D64)
    eps = torch.randn(3, 2, 2, generator=g, dtype=D64)

    net = mini_net(1)
    f = lambda: fm_loss(net, x, cond, t=t, eps=eps)  # noqa: E731
    f().backward()
    ps = list(net.parameters())
    errs["fm_loss"] = rel_error([p.grad if p.grad is not None else torch.zeros_like(p) for p in ps], central_fd_grad(f, ps))

    # DMD surrogate through a one-step student; the direction g is a constant
    teacher, critic, gen = mini_net(0), mini_net(1), mini_net(2)
    cfg = DmdConfig(student_schedule=Schedule((1.0,)))
    z0 = torch.randn(3, 2, 2, generator=torch.Generator().manual_seed(9), dtype=D64)
    dmd_generator_step(gen, teacher, critic, cond, cfg, torch.Generator().manual_seed(5), z0=z0).backward()
    with torch.no_grad():
        xs = z0 - gen(z0, torch.tensor(1.0, dtype=D64), cond)
        g2 = torch.Generator().manual_seed(5)
        tt = 0.02 + 0.96 * torch.rand(3, generator=g2, dtype=D64)
        ee = torch.randn(xs.shape, generator=g2, dtype=D64)
        zt = (1 - tt.view(-1, 1, 1)) * xs + tt.view(-1, 1, 1) * ee
        diff = (zt - tt.view(-1, 1, 1) * critic(zt, tt, cond)) - (zt - tt.view(-1, 1, 1) * teacher(zt, tt, cond))
        direction = diff / (diff.abs().mean(dim=(1, 2), keepdim=True) + 1e-8)
    f = lambda: (direction * (z0 - gen(z0, torch.tensor(1.0, dtype=D64), cond))).sum() / 3  # noqa: E731
    ps = list(gen.parameters())
    errs["dmd"] = rel_error([p.grad if p.grad is not None else torch.zeros_like(p) for p in ps], central_fd_grad(f, ps))

    disc = Discriminator(mini_net(5))
    with torch.no_grad():
        for p in disc.head.parameters():
            p.normal_(0, 0.5)
    gg = torch.Generator().manual_seed(8)
    xr, xf, xref = (torch.randn(3, 2, 2, generator=gg, dtype=D64) for _ in range(3))
    scfg = StageConfig(k=1, gamma=5.0, sigma_r=0.2)
    f = lambda: d_loss_total(disc, xr, xf, xref, cond, scfg, torch.Generator().manual_seed(11))  # noqa: E731
    f().backward()
    ps = list(disc.parameters())
    errs["d_loss"] = rel_error([p.grad if p.grad is not None else torch.zeros_like(p) for p in ps], central_fd_grad(f, ps))

    for p in ps:
        p.requires_grad_(False)
    gen = mini_net(3)
    f = lambda: g_loss_total(disc, z0 - gen(z0, torch.tensor(1.0, dtype=D64), cond), xr, xref, cond, 0.5, "r3gan")  # noqa: E731
    f().backward()
    ps = list(gen.parameters())
    errs["g_loss"] = rel_error([p.grad if p.grad is not None else torch.zeros_like(p) for p in ps], central_fd_grad(f, ps))

    worst = max(errs.values())
    report(2, worst < 1e-4, "rel errors " + ", ".join(f"{k}={v:.1e}" for k, v in errs.items()))


# ---------------------------------------------------------------- 3
def test_c03_stop_grad_contract():
    m = ConstVelocity(0.3)
    z0 = torch.randn(1, 2, 2, dtype=D64, generator=torch.Generator().manual_seed(0))
    sched = Schedule((1.0, 0.5))
    out = sample_with_final_step_grad(m, sched, z0, None)
    out[0, 0, 0].backward()
    analytic = m.theta.grad.item()

    with torch.no_grad():
        z_mid = z0 - m.theta * 0.5
    h = 1e-6
    fd = ((z_mid - (m.theta + h) * 0.5) - (z_mid - (m.theta - h) * 0.5))[0, 0, 0].item() / (2 * h)

    net = mini_net(0)
    z, cond = mini_inputs()
    s4 = uniform_schedule(4)
    same = torch.equal(sample(net, s4, z, cond), sample_with_final_step_grad(net, s4, z, cond).detach())
    ok = abs(analytic - (-0.5)) < 1e-6 and abs(analytic - fd) < 1e-6 and same
    report(3, ok, f"d out/d theta={analytic}, fd={fd:.9f}, forward identical={same}")


# ---------------------------------------------------------------- 4
def test_c04_dmd_fixed_point():
    teacher = mini_net(0)
    gen, critic = mini_net(1), copy.deepcopy(teacher)
    _, cond = mini_inputs(batch=6)
    loss = dmd_generator_step(gen, teacher, critic, cond, DmdConfig(guidance_w=None), torch.Generator().manual_seed(0))
    loss.backward()
    worst = max(0.0 if p.grad is None else p.grad.abs().max().item() for p in gen.parameters())
    report(4, worst < 1e-12, f"max |grad| = {worst:.1e}")


# ---------------------------------------------------------------- 5
def test_c05_dynamic_sampling():
    details, ok = [], True
    for k in (1, 2, 3):
        target, prev = TARGET_SCHEDULES[k], TARGET_SCHEDULES[k - 1].last
        g = torch.Generator().manual_seed(k)
        draws = np.array([dynamic_sample(target, prev, s % 500, 500, g).last for s in range(10_000)])
        in_range = bool(((draws >= prev) & (draws <= target.last)).all())
        u = np.sort((draws - prev) / (target.last - prev))
        n = len(u)
        ks = max(np.max(np.arange(1, n + 1) / n - u), np.max(u - np.arange(n) / n))
        exact = dynamic_sample(target, prev, 500, 500, g) == target
        ok &= in_range and ks < 0.02 and exact
        details.append(f"k={k} ks={ks:.4f} range={in_range} W->target={exact}")
    report(5, ok, "; ".join(details))


# ---------------------------------------------------------------- 6
def test_c06_metric_correctness():
    rng = np.random.default_rng(0)
    fd_err = 0.0
    for _ in range(20):
        A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        s1, s2 = A @ A.T + 0.1 * np.eye(3), B @ B.T + 0.1 * np.eye(3)
        m1, m2 = rng.normal(size=3), rng.normal(size=3)
        oracle = float(((m1 - m2) ** 2).sum() + np.trace(s1 + s2 - 2 * linalg.sqrtm(s1 @ s2).real))
        ours = frechet_from_fits(GaussianFit(m1, s1, 0), GaussianFit(m2, s2, 0), eps=0.0)
        fd_err = max(fd_err, abs(ours - oracle))

    x = rng.normal(size=(5000, 1))
    x = (x - x.mean()) / x.std(ddof=1)
    injected = frechet_distance(x, x + 1.0)

    X, Y = rng.normal(size=(300, 3)), rng.normal(size=(300, 3)) + 0.4
    ours_e = energy_distance(X, Y)
    m = 200_000
    mc = np.random.default_rng(1)

    def pair_norms(P, Q):
        return np.linalg.norm(P[mc.integers(0, len(P), m)] - Q[mc.integers(0, len(Q), m)], axis=1)

    a, b, c = pair_norms(X, Y), pair_norms(X, X), pair_norms(Y, Y)
    oracle_e = 2 * a.mean() - b.mean() - c.mean()
    se = math.sqrt((4 * a.var() + b.var() + c.var()) / m)
    ok = fd_err < 1e-8 and abs(injected - 1.0) < 1e-8 and abs(ours_e - oracle_e) < 3 * se
    report(6, ok, f"fd err={fd_err:.1e}, injected={injected:.10f}, energy {ours_e:.5f} vs MC {oracle_e:.5f} (3se={3 * se:.5f})")


# ---------------------------------------------------------------- desk runs (7-11)
GRIDS = (
    {"toggles": [list(TOGGLES)], "loss_kinds": ["r3gan"], "lambdas": list(LAMBDAS)},
    {"toggles": [list(TOGGLES)], "loss_kinds": ["nonsaturating", "hinge"], "lambdas": [0.5]},
    {"toggles": [[]], "loss_kinds": ["r3gan"], "lambdas": [0.0]},
)


@pytest.fixture(scope="module")
def desk():
    base = desk_config(0)
    root = ACCEPT_DIR / base.config_hash()[:12]
    root.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(DataSpec(count=8192, seed=1))
    table = root / "ablation.csv"
    errors = {}
    for spec in GRIDS:
        grid = AblationGrid.from_dict({**spec, "seeds": list(SEEDS)})
        try:
            ablate(grid, base, data, table, work_dir=root, progress=print)
        except NumericDivergence as exc:
            errors[tuple(spec["loss_kinds"])] = str(exc)
    with open(table, newline="") as fh:
        rows = list(csv.DictReader(fh))
    stage0 = {}
    for seed in SEEDS:
        heldout = holdout_set(data, seed, N_EVAL)
        stage0[seed] = evaluate_checkpoint(root / f"seed{seed}" / "stage0.ckpt", heldout, 4, N_EVAL, seed)
    return {"root": root, "data": data, "rows": rows, "stage0": stage0, "errors": errors}


def fd_of(rows, cell_id):
    return {int(r["seed"]): float(r["fd"]) for r in rows if r["cell_id"] == cell_id}


@pytest.mark.slow
def test_c07_nfe_accounting(desk):
    seed_dir = desk["root"] / "seed0"
    heldout = holdout_set(desk["data"], 0, 1024)
    teacher_ck = load_checkpoint(seed_dir / "teacher.ckpt")
    teacher = teacher_ck.build_model().eval()
    student = load_checkpoint(seed_dir / "cells" / f"{FULL}.ckpt").build_model().eval()
    t = measure(teacher, uniform_schedule(50), heldout, 1024, 0, guidance=teacher_ck.extra["guidance_w"])
    s = measure(student, Schedule((1.0,)), heldout, 1024, 0)
    counter = NfeCounter()
    sample(student, Schedule((1.0,)), torch.zeros(3, 16, 4), torch.zeros(3, 64, 1), counter=counter)
    ratio = s.wall_ms / t.wall_ms
    ok = t.nfe_per_sample == 100 and s.nfe_per_sample == 1 and counter.evals == 1 and ratio <= 1 / 25
    report(7, ok, f"teacher NFE/sample={t.nfe_per_sample}, student={s.nfe_per_sample} "
                  f"({t.nfe_per_sample // s.nfe_per_sample}x); wall {s.wall_ms:.4f} vs {t.wall_ms:.4f} ms (ratio 1/{1 / ratio:.0f})")


@pytest.mark.slow
def test_c08_pipeline_quality_trend(desk):
    full, direct = fd_of(desk["rows"], FULL), fd_of(desk["rows"], DIRECT)
    assert set(full) == set(direct) == set(SEEDS)
    mf, md = median(full.values()), median(direct.values())
    report(8, mf <= 0.85 * md, f"median 1-NFE fd full={mf:.4f} direct={md:.4f} ratio={mf / md:.3f} (need <= 0.85); "
                               f"per seed full={[round(full[s], 4) for s in SEEDS]} direct={[round(direct[s], 4) for s in SEEDS]}")


@pytest.mark.slow
def test_c09_one_vs_four_step_parity(desk):
    rows = [r for r in desk["rows"] if r["cell_id"] == FULL]
    fd1 = median(float(r["fd"]) for r in rows)
    sync1 = median(float(r["sync"]) for r in rows)
    fd4 = median(desk["stage0"][s].fd for s in SEEDS)
    sync4 = median(desk["stage0"][s].sync for s in SEEDS)
    ok = len(rows) == len(SEEDS) and fd1 <= 1.5 * fd4 and sync1 >= 0.9 * sync4
    report(9, ok, f"median fd 1-NFE={fd1:.4f} vs 4-NFE={fd4:.4f} (<= 1.5x); sync {sync1:.4f} vs {sync4:.4f} (>= 0.9x)")


@pytest.mark.slow
def test_c10_lambda_u_shape(desk):
    med = {}
    for lam in LAMBDAS:
        fds = fd_of(desk["rows"], f"sr1-dt1-sc1-r3gan-lam{lam:.2f}")
        assert set(fds) == set(SEEDS)
        med[lam] = median(fds.values())
    best = min(med, key=med.get)
    report(10, best not in (LAMBDAS[0], LAMBDAS[-1]),
           "median fd by lambda " + ", ".join(f"{k}:{v:.4f}" for k, v in med.items()) + f"; argmin={best}")


@pytest.mark.slow
def test_c11_loss_kind_robustness(desk):
    med = {}
    for kind in ("r3gan", "nonsaturating", "hinge"):
        fds = fd_of(desk["rows"], f"sr1-dt1-sc1-{kind}-lam0.50")
        med[kind] = median(fds.values()) if set(fds) == set(SEEDS) else float("nan")
    finite = all(math.isfinite(v) for v in med.values())
    spread = max(med.values()) / min(med.values()) if finite else float("inf")
    ok = not desk["errors"] and finite and spread <= 2.0
    report(11, ok, "median fd " + ", ".join(f"{k}={v:.4f}" for k, v in med.items())
           + f"; max/min={spread:.2f} (<= 2); divergences={desk['errors'] or 'none'}")


# ---------------------------------------------------------------- 12
def test_c12_determinism_and_persistence(tmp_path):
    data = generate_dataset(DataSpec(count=96, seed=4))
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        paths = run_pipeline(tiny_run_config(3, out), data, out)
        heldout = holdout_set(data, 3, 64)
        rep = evaluate_checkpoint(paths["stage3"], heldout, 1, 64, 3)
        runs.append(({k: Path(p).read_bytes() for k, p in paths.items()}, rep.comparable()))
    same_ckpts = runs[0][0] == runs[1][0]
    same_metrics = runs[0][1] == runs[1][1]

    ck = load_checkpoint(tmp_path / "a" / "stage3.ckpt")
    save_checkpoint(ck, tmp_path / "copy.ckpt")
    ckpt_rt = (tmp_path / "copy.ckpt").read_bytes() == (tmp_path / "a" / "stage3.ckpt").read_bytes()
    ckpt_rt &= (tmp_path / "copy.ckpt.json").read_bytes() == (tmp_path / "a" / "stage3.ckpt.json").read_bytes()

    write_dataset(data, tmp_path / "d.bin")
    back = read_dataset(tmp_path / "d.bin")
    data_rt = back.frames.tobytes() == data.frames.tobytes() and back.cond.tobytes() == data.cond.tobytes()
    data_rt &= back.seeds.tobytes() == data.seeds.tobytes() and back.spec == data.spec
    ok = same_ckpts and same_metrics and ckpt_rt and data_rt
    report(12, ok, f"checkpoints identical={same_ckpts}, metrics identical={same_metrics}, "
                   f"checkpoint round trip={ckpt_rt}, dataset round trip={data_rt}")
