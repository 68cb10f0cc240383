"""Ablation grid over the stage-2 mechanisms, loss kinds and self-compare weight.

Every (cell, seed) pair runs stage 2 from that seed's 4-step checkpoint and
appends one CSV row evaluated at NFE 1. Completed pairs are skipped on resume.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from progdistill.errors import ConfigError, DataError
from progdistill.flowcore import Schedule
from progdistill.metrics import measure
from progdistill.pad import LOSS_KINDS, TARGET_SCHEDULES, StageConfig
from progdistill.runner.checkpoint import load_checkpoint
from progdistill.runner.config import RunConfig, derive_seed
from progdistill.runner.pipeline import distill_pad, holdout_set, prepare_stage0, save_model
from progdistill.toydata import ToyDataset

log = logging.getLogger(__name__)

TOGGLES = ("step_reduction", "dynamic_ts", "self_compare")
CSV_COLUMNS = (
    "cell_id", "step_reduction", "dynamic_ts", "self_compare", "loss_kind",
    "lambda", "seed", "fd", "energy", "sync", "nfe", "wall_ms",
)
ONE_STEP = Schedule((1.0,))


@dataclass(frozen=True)
class Cell:
    step_reduction: bool
    dynamic_ts: bool
    self_compare: bool
    loss_kind: str
    lam: float

    @property
    def cell_id(self) -> str:
        flags = "".join(str(int(v)) for v in (self.step_reduction, self.dynamic_ts, self.self_compare))
        return f"sr{flags[0]}-dt{flags[1]}-sc{flags[2]}-{self.loss_kind}-lam{self.lam:.2f}"

    def stages(self, base: list[StageConfig]) -> list[StageConfig]:
        """Stage configs with this cell's toggles applied to ``base``."""
        if not base:
            raise ConfigError("base config has no pad stages")
        common = {"loss_kind": self.loss_kind, "lam": self.lam}
        if not self.dynamic_ts:
            common["warmup"] = 0
        if self.step_reduction:
            return [replace(s, **common) for s in base]
        last = base[-1]
        # one direct 4 -> 1 phase with the same total budget
        return [replace(last, k=3, target_schedule=ONE_STEP, prev_final_t=TARGET_SCHEDULES[0].last,
                        steps=sum(s.steps for s in base), **common)]


@dataclass
class AblationGrid:
    toggles: list  # each entry: the subset of TOGGLES switched on
    loss_kinds: list
    lambdas: list
    seeds: list
    init: object = None  # stage-0 checkpoint path, or {seed: path}

    def __post_init__(self):
        if not (self.toggles and self.loss_kinds and self.lambdas and self.seeds):
            raise ConfigError("ablation grid fields must be nonempty")
        for t in self.toggles:
            unknown = set(t) - set(TOGGLES)
            if unknown:
                raise ConfigError(f"unknown toggles {sorted(unknown)}")
        for k in self.loss_kinds:
            if k not in LOSS_KINDS:
                raise ConfigError(f"unknown loss kind {k!r}")
        for lam in self.lambdas:
            if not 0.0 <= float(lam) <= 1.0:
                raise ConfigError(f"lambda must lie in [0, 1], got {lam}")

    @classmethod
    def from_dict(cls, d: dict) -> "AblationGrid":
        allowed = {"toggles", "loss_kinds", "lambdas", "seeds", "init"}
        if not isinstance(d, dict):
            raise ConfigError("grid must be a JSON object")
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown grid fields: {sorted(unknown)}")
        try:
            return cls(
                toggles=[list(t) for t in d.get("toggles", [list(TOGGLES)])],
                loss_kinds=list(d.get("loss_kinds", ["r3gan"])),
                lambdas=[float(x) for x in d.get("lambdas", [0.5])],
                seeds=[int(s) for s in d.get("seeds", [0])],
                init=d.get("init"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid grid: {exc}") from exc

    @classmethod
    def load(cls, path) -> "AblationGrid":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read grid {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"grid {path} is not valid JSON: {exc}") from exc

    def cells(self) -> list[Cell]:
        """Distinct cells; with self-compare off every lambda collapses to 0."""
        out = []
        for on, kind, lam in itertools.product(self.toggles, self.loss_kinds, self.lambdas):
            sc = "self_compare" in on
            cell = Cell("step_reduction" in on, "dynamic_ts" in on, sc, kind, float(lam) if sc else 0.0)
            if cell not in out:
                out.append(cell)
        return out

    def init_for(self, seed: int):
        if isinstance(self.init, dict):
            path = self.init.get(str(seed), self.init.get(seed))
            if path is None:
                raise ConfigError(f"no stage-0 checkpoint given for seed {seed}")
            return Path(path)
        return None if self.init is None else Path(self.init)


def completed(csv_path) -> set:
    """``(cell_id, seed)`` pairs already present in ``csv_path``."""
    path = Path(csv_path)
    if not path.exists() or path.stat().st_size == 0:
        return set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != list(CSV_COLUMNS):
            raise DataError(f"{path} exists with an unexpected header")
        return {(row["cell_id"], int(row["seed"])) for row in reader}


def run_cell(cell: Cell, cfg: RunConfig, init_path, data: ToyDataset, heldout: ToyDataset, ckpt_path=None) -> dict:
    init = load_checkpoint(init_path).build_model().eval()
    stages = cell.stages(cfg.pad)
    gen = distill_pad(cfg, init, data, stages=stages)
    if ckpt_path is not None:
        save_model(gen, ckpt_path, stages[-1].k, sum(s.steps for s in stages), ONE_STEP, cfg, cell_id=cell.cell_id)
    rep = measure(gen, ONE_STEP, heldout, cfg.eval.n_eval, derive_seed(cfg.seed, "eval") % 2**63)
    return {
        "cell_id": cell.cell_id,
        "step_reduction": int(cell.step_reduction),
        "dynamic_ts": int(cell.dynamic_ts),
        "self_compare": int(cell.self_compare),
        "loss_kind": cell.loss_kind,
        "lambda": cell.lam,
        "seed": cfg.seed,
        "fd": rep.fd,
        "energy": rep.energy,
        "sync": rep.sync,
        "nfe": rep.nfe_per_sample,
        "wall_ms": rep.wall_ms,
    }


def ablate(grid: AblationGrid, base: RunConfig, data: ToyDataset, csv_path, work_dir=None, progress=None) -> Path:
    """Run every pending (cell, seed) pair, appending rows to ``csv_path``.

    Seeds without an ``init`` checkpoint get teacher and DMD runs under
    ``work_dir/seed<seed>``; each cell's generator is saved there as
    ``cells/<cell_id>.ckpt``.
    """
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    work = Path(work_dir) if work_dir is not None else csv_path.parent / "ablate_work"
    done = completed(csv_path)
    new_file = not csv_path.exists() or csv_path.stat().st_size == 0
    with open(csv_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new_file:
            writer.writeheader()
            fh.flush()
        for seed in grid.seeds:
            pending = [c for c in grid.cells() if (c.cell_id, seed) not in done]
            if not pending:
                continue
            cfg = replace(base, seed=seed)
            init = grid.init_for(seed)
            if init is None:
                init = prepare_stage0(cfg, data, work / f"seed{seed}", progress)["stage0"]
            heldout = holdout_set(data, seed, cfg.eval.holdout_count or cfg.eval.n_eval)
            cell_dir = work / f"seed{seed}" / "cells"
            cell_dir.mkdir(parents=True, exist_ok=True)
            for cell in pending:
                if progress:
                    progress(f"cell {cell.cell_id} seed {seed}")
                writer.writerow(run_cell(cell, cfg, init, data, heldout, cell_dir / f"{cell.cell_id}.ckpt"))
                fh.flush()
    return csv_path
