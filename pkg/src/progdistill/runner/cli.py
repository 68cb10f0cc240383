"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data or shape error,
4 numeric divergence. Failures print one ``progdistill: <kind>: <reason>``
line to standard error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from progdistill.errors import ConfigError, DataError, NumericDivergence
from progdistill.metrics import MetricsReport
from progdistill.runner.config import RunConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
EVAL_COLUMNS = ("method",) + MetricsReport.CSV_FIELDS

log = logging.getLogger("progdistill")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="progdistill", description="Teacher -> 4-step DMD -> 1-step adversarial distillation on toy data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize a dataset file")
    g.add_argument("--spec", help="DataSpec JSON file (count and seed may come from flags)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train-teacher", help="train the flow-matching teacher")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")

    d = sub.add_parser("distill-dmd", help="distill the teacher into a 4-step student")
    d.add_argument("--teacher", required=True)
    d.add_argument("--config")
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True, help="checkpoint path")

    a = sub.add_parser("distill-pad", help="progressive adversarial distillation to 1 step")
    a.add_argument("--init", required=True, help="4-step checkpoint")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--stages", default="1,2,3", help="comma-separated stage indices")
    a.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="score a checkpoint on held-out data")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--nfe", type=int, required=True)
    e.add_argument("--data", required=True, help="held-out dataset file")
    e.add_argument("--n-eval", type=int, default=256)
    e.add_argument("--out", required=True, help="CSV file; rows are appended")

    b = sub.add_parser("ablate", help="run an ablation grid")
    b.add_argument("--grid", required=True)
    b.add_argument("--config")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True, help="CSV file; completed cells are skipped")

    r = sub.add_parser("report", help="plots and markdown summary from a CSV table")
    r.add_argument("--in", dest="table", required=True)
    r.add_argument("--plots", required=True, help="output directory")
    return p


def _load_config(path) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


def _read_data(path):
    from progdistill.toydata import read_dataset

    return read_dataset(path)


def cmd_gen_data(args):
    from progdistill.toydata import DataSpec, generate_dataset, write_dataset

    d = {}
    if args.spec:
        try:
            d = json.loads(Path(args.spec).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read spec {args.spec}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"spec {args.spec} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("DataSpec JSON must be an object")
    if args.count is not None:
        d["count"] = args.count
    if args.seed is not None:
        d["seed"] = args.seed
    for key in ("count", "seed"):
        if key not in d:
            raise ConfigError(f"{key} must be given by --{key} or in --spec")
    spec = DataSpec.from_dict(d)
    write_dataset(generate_dataset(spec), args.out)


def cmd_train_teacher(args):
    from progdistill.flowcore import uniform_schedule
    from progdistill.runner.pipeline import TEACHER_STAGE, save_model, train_teacher

    cfg = _load_config(args.config)
    data = _read_data(args.data)
    net = train_teacher(cfg, data)
    save_model(net, args.out, TEACHER_STAGE, cfg.teacher.steps, uniform_schedule(cfg.teacher.sample_steps),
               cfg, guidance_w=cfg.teacher.guidance_w)


def cmd_distill_dmd(args):
    from progdistill.runner.checkpoint import load_checkpoint
    from progdistill.runner.pipeline import _save_divergence, distill_dmd, new_model, save_model

    cfg = _load_config(args.config)
    data = _read_data(args.data)
    teacher = load_checkpoint(args.teacher).build_model().eval()
    try:
        gen = distill_dmd(cfg, teacher, data)
    except NumericDivergence as exc:
        _save_divergence(exc, new_model(cfg, data), args.out, 0, cfg.dmd.student_schedule, cfg)
        raise
    save_model(gen, args.out, 0, cfg.dmd.steps, cfg.dmd.student_schedule, cfg)


def parse_stages(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--stages must be comma-separated integers, got {text!r}") from exc
    if not ks or any(k not in (1, 2, 3) for k in ks) or ks != sorted(set(ks)):
        raise ConfigError(f"--stages must be an increasing subset of 1,2,3, got {text!r}")
    return ks


def cmd_distill_pad(args):
    from progdistill.runner.checkpoint import load_checkpoint
    from progdistill.runner.pipeline import _save_divergence, distill_pad, new_model, save_model

    cfg = _load_config(args.config)
    ks = parse_stages(args.stages)
    by_k = {s.k: s for s in cfg.pad}
    missing = [k for k in ks if k not in by_k]
    if missing:
        raise ConfigError(f"config has no pad stage(s) {missing}")
    stages = [by_k[k] for k in ks]
    data = _read_data(args.data)
    init = load_checkpoint(args.init).build_model().eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def on_stage_end(stage_cfg, state):
        save_model(state.gen, out / f"stage{stage_cfg.k}.ckpt", stage_cfg.k, stage_cfg.steps,
                   stage_cfg.target_schedule, cfg)

    try:
        distill_pad(cfg, init, data, stages, on_stage_end=on_stage_end, log_path=out / "pad_log.csv")
    except NumericDivergence as exc:
        last = stages[-1]
        _save_divergence(exc, new_model(cfg, data), out / f"stage{last.k}.diverged.ckpt", last.k,
                         last.target_schedule, cfg)
        raise


def cmd_eval(args):
    from progdistill.runner.checkpoint import load_checkpoint
    from progdistill.runner.pipeline import evaluate_checkpoint

    if args.nfe < 1:
        raise ConfigError("--nfe must be >= 1")
    if args.n_eval < 64:
        raise ConfigError("--n-eval must be >= 64")
    heldout = _read_data(args.data)
    seed = load_checkpoint(args.ckpt).seed
    rep = evaluate_checkpoint(args.ckpt, heldout, args.nfe, args.n_eval, seed)
    out = Path(args.out)
    fresh = not out.exists() or out.stat().st_size == 0
    if not fresh:
        with open(out, newline="") as fh:
            header = next(csv.reader(fh), None)
        if header != list(EVAL_COLUMNS):
            raise DataError(f"{out} exists with a different header")
    with open(out, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        if fresh:
            w.writeheader()
        w.writerow({"method": Path(args.ckpt).stem, **rep.to_row()})
    print(json.dumps(rep.to_row()))


def cmd_ablate(args):
    from progdistill.runner.ablate import AblationGrid, ablate

    grid = AblationGrid.load(args.grid)
    cfg = _load_config(args.config)
    data = _read_data(args.data)
    ablate(grid, cfg, data, args.out, progress=log.info)


def cmd_report(args):
    from progdistill.runner.report import report

    for path in report(args.table, args.plots):
        print(path)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill-dmd": cmd_distill_dmd,
    "distill-pad": cmd_distill_pad,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _fail(kind: str, message) -> None:
    text = " ".join(str(message).split())
    print(f"progdistill: {kind}: {text}", file=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        _fail("config", exc)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        _fail("config", exc)
        return EXIT_CONFIG
    except DataError as exc:
        _fail("data", exc)
        return EXIT_DATA
    except NumericDivergence as exc:
        _fail("diverged", exc)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
