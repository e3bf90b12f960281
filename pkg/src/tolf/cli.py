"""``tolf`` command line: run, sweep, density-export, selftest.

Exit codes: 0 success, 1 self-test failure or other error, 2 invalid config
or arguments, 3 training divergence (for ``sweep``: at least one failed
cell), 4 output directory exists and ``--force`` was not given.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import evalmetrics as em
from . import experiment as ex
from .flowdist import COORD_NAMES, FlowModel
from .synthbench import SCALE_BINS, TrainingDiverged

log = logging.getLogger("tolf")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_EXISTS = 0, 1, 2, 3, 4
DEFAULT_OUT = "tolf_runs"
SWEEP_AXES = {"noise_scale": float, "lambda": float, "loss": str, "coupling_layers": int}


class CliError(Exception):
    def __init__(self, code, message):
        self.code = code
        super().__init__(message)


def out_root(args_out, cfg=None):
    """``--out``, then the config's ``out_dir``, then ``$TOLF_OUT_DIR``, then ./tolf_runs."""
    if args_out:
        return args_out
    if cfg is not None and cfg.out_dir:
        return cfg.out_dir
    return os.environ.get("TOLF_OUT_DIR") or DEFAULT_OUT


def prepare_dir(path, force):
    if os.path.exists(path):
        if not force:
            raise CliError(EXIT_EXISTS, f"{path} exists; pass --force to overwrite")
        shutil.rmtree(path)
    os.makedirs(path)


def _load(args):
    try:
        cfg = ex.load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config: {exc}") from None
    except ex.ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"invalid config: {exc}") from None
    return cfg


# -- run -----------------------------------------------------------------------

def cmd_run(args):
    cfg = _load(args)
    run_dir = os.path.join(out_root(args.out, cfg), ex.run_dir_name(cfg))
    prepare_dir(run_dir, args.force)
    try:
        record, result = ex.run_experiment(cfg)
    except TrainingDiverged as exc:
        with open(os.path.join(run_dir, "failure.json"), "w", encoding="utf-8") as fh:
            fh.write(ex.canonical_json({"status": "diverged", "message": str(exc)}))
        raise CliError(EXIT_DIVERGED, f"training diverged: {exc}") from None
    ex.write_run(run_dir, cfg, record, result)
    print(f"run dir: {run_dir}")
    print(f"loc_ap={record.loc_ap:.4f} mean_iou={record.mean_iou:.4f} "
          + " ".join(f"{k}={v:.4f}" for k, v in record.bin_loc_ap.items()))
    return EXIT_OK


# -- sweep ---------------------------------------------------------------------

def _cell(cfg_dict, cell_dir):
    cfg = ex.ExperimentConfig.from_dict(cfg_dict)
    os.makedirs(cell_dir)
    try:
        record, result = ex.run_experiment(cfg)
    except TrainingDiverged as exc:
        return {"status": "diverged", "message": str(exc), "digest": cfg.digest()}
    except Exception as exc:  # a failed cell must not stop the sweep
        return {"status": "error", "message": f"{type(exc).__name__}: {exc}", "digest": cfg.digest()}
    ex.write_run(cell_dir, cfg, record, result)
    return {"status": "ok", "message": "", "digest": cfg.digest(), "record": record.to_dict()}


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def sweep_tables(axis, values, seeds, outcomes):
    """Per-cell rows and the per-value comparison rows, in cell-key order."""
    cell_rows, comp_rows = [], []
    for i, value in enumerate(values):
        recs = []
        for seed in seeds:
            out = outcomes[(i, seed)]
            row = [axis, value, seed, out["status"]]
            if out["status"] == "ok":
                rec = em.ExperimentRecord(**out["record"])
                recs.append(rec)
                row += [_fmt(rec.loc_ap), _fmt(rec.mean_iou)]
                row += [_fmt(rec.bin_loc_ap.get(b)) for b in SCALE_BINS]
                row += [_fmt(em.grouped_ap(rec, ("very_tiny", "tiny"))),
                        _fmt(em.grouped_ap(rec, ("small", "medium")))]
            else:
                row += [""] * 8
            row += [out["digest"][:12], out["message"]]
            cell_rows.append(row)
        agg = em.aggregate_records(recs) if recs else {}
        comp = [axis, value, len(recs), len(seeds) - len(recs)]
        for key in ("all", "mean_iou", "vt+t", "s+m"):
            mean, std = agg.get(key, (None, None))
            comp += [_fmt(mean), _fmt(std)]
        comp_rows.append(comp)
    return cell_rows, comp_rows


CELL_HEADER = ["axis", "value", "seed", "status", "loc_ap", "mean_iou", *SCALE_BINS,
               "vt+t", "s+m", "config_digest", "message"]
COMPARISON_HEADER = ["axis", "value", "ok_cells", "failed_cells", "loc_ap_mean", "loc_ap_std",
                     "mean_iou_mean", "mean_iou_std", "vt+t_mean", "vt+t_std", "s+m_mean", "s+m_std"]


def cmd_sweep(args):
    cfg = _load(args)
    parse = SWEEP_AXES[args.axis]
    try:
        values = [parse(v) for v in args.values]
        seeds = args.seeds if args.seeds else [cfg.seed]
        cells = {(i, s): cfg.with_overrides(**{args.axis: v, "seed": s})
                 for i, v in enumerate(values) for s in seeds}
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid sweep value: {exc}") from None
    key = em.config_digest({"base": cfg.digest(), "axis": args.axis, "values": values, "seeds": seeds})
    sweep_dir = os.path.join(out_root(args.out, cfg), f"{cfg.tag}-sweep-{args.axis}-{key[:12]}")
    prepare_dir(sweep_dir, args.force)
    with open(os.path.join(sweep_dir, "sweep.json"), "w", encoding="utf-8") as fh:
        fh.write(ex.canonical_json({"base_config": cfg.to_dict(), "axis": args.axis,
                                    "values": values, "seeds": seeds}))

    def cell_dir(i, s):
        return os.path.join(sweep_dir, "cells", f"{args.axis}={values[i]}-seed{s}")

    jobs = max(1, int(args.jobs))
    if jobs == 1:
        outcomes = {k: _cell(c.to_dict(), cell_dir(*k)) for k, c in cells.items()}
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {k: pool.submit(_cell, c.to_dict(), cell_dir(*k)) for k, c in cells.items()}
            outcomes = {k: f.result() for k, f in futures.items()}

    cell_rows, comp_rows = sweep_tables(args.axis, values, seeds, outcomes)
    ex.write_csv(os.path.join(sweep_dir, "cells.csv"), CELL_HEADER, cell_rows)
    ex.write_csv(os.path.join(sweep_dir, "comparison.csv"), COMPARISON_HEADER, comp_rows)
    with open(os.path.join(sweep_dir, "records.jsonl"), "w", encoding="utf-8") as fh:
        for k in sorted(outcomes):
            if outcomes[k]["status"] == "ok":
                fh.write(json.dumps(outcomes[k]["record"], sort_keys=True) + "\n")

    print(f"sweep dir: {sweep_dir}")
    print(f"{args.axis:>16} {'ok':>3} {'loc_ap':>8} {'mean_iou':>9} {'vt+t':>8} {'s+m':>8}")
    for row in comp_rows:
        vals = [row[4], row[6], row[8], row[10]]
        print(f"{row[1]!s:>16} {row[2]:>3} " + " ".join(
            f"{float(v):>8.4f}" if v else f"{'-':>8}" for v in vals))
    failed = sum(r[3] for r in comp_rows)
    if failed:
        print(f"{failed} cell(s) failed; see cells.csv", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# -- density export ------------------------------------------------------------

def _checkpoint_prefix(path):
    if os.path.isdir(path):
        path = os.path.join(path, "checkpoint", "flow")
    if path.endswith(".json"):
        path = path[:-5]
    return path


def cmd_density_export(args):
    prefix = _checkpoint_prefix(args.checkpoint)
    try:
        flow = FlowModel.load(prefix)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot load flow checkpoint {prefix!r}: {exc}") from None
    if args.coordinate not in COORD_NAMES[:flow.dim]:
        raise CliError(EXIT_CONFIG, f"unknown coordinate {args.coordinate!r}; "
                                    f"expected one of {list(COORD_NAMES[:flow.dim])}")
    lo, hi, points = float(args.grid[0]), float(args.grid[1]), int(float(args.grid[2]))
    if not (hi > lo and points >= 2):
        raise CliError(EXIT_CONFIG, "grid must be LO HI N with HI > LO and N >= 2")
    if args.samples < 1:
        raise CliError(EXIT_CONFIG, "--samples must be >= 1")
    grid = np.linspace(lo, hi, points)
    logp = flow.conditional_log_prob(args.coordinate, grid, fixed=args.fixed)
    samples = flow.sample(args.seed, args.samples)

    out = args.out or os.path.join(os.path.dirname(prefix) or ".", f"density-{args.coordinate}")
    files = {"curve": out + ".csv", "samples": out + "_samples.csv", "meta": out + ".json"}
    existing = [f for f in files.values() if os.path.exists(f)]
    if existing and not args.force:
        raise CliError(EXIT_EXISTS, f"{existing[0]} exists; pass --force to overwrite")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    ex.write_csv(files["curve"], ["t_bar", "log_prob"],
                 [(repr(float(t)), repr(float(v))) for t, v in zip(grid, logp)])
    ex.write_csv(files["samples"], list(COORD_NAMES[:flow.dim]),
                 [[repr(float(v)) for v in row] for row in samples])
    meta = {
        "checkpoint": prefix,
        "coordinate": args.coordinate,
        "fixed": args.fixed,
        "grid": {"first": float(grid[0]), "last": float(grid[-1]),
                 "step": (hi - lo) / (points - 1), "points": points},
        "curve_file": os.path.basename(files["curve"]),
        "samples_file": os.path.basename(files["samples"]),
        "samples": args.samples,
        "seed": args.seed,
        "local_maxima": em.count_local_maxima(logp),
    }
    with open(files["meta"], "w", encoding="utf-8") as fh:
        fh.write(ex.canonical_json(meta))
    print(f"wrote {files['curve']} ({points} points, {meta['local_maxima']} local maxima)")
    return EXIT_OK


# -- selftest ------------------------------------------------------------------

def cmd_selftest(args):
    from . import selftest

    return EXIT_OK if selftest.run(verbose=True) == 0 else EXIT_FAIL


# -- entry point ---------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="tolf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="output root (default: $TOLF_OUT_DIR or ./tolf_runs)")
        sp.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    r = sub.add_parser("run", help="generate data, train and evaluate one config")
    common(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a config across values of one axis and seeds")
    common(s)
    s.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    s.add_argument("--values", required=True, nargs="+")
    s.add_argument("--seeds", type=int, nargs="+", default=None,
                   help="seeds per value (default: --seed or the config seed)")
    s.add_argument("--jobs", type=int, default=1, help="concurrent cells")
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("density-export", help="write a flow's conditional log-density slice and samples")
    d.add_argument("--checkpoint", required=True, help="run directory or flow checkpoint prefix")
    d.add_argument("--coordinate", required=True, help="one of x, y, w, h")
    d.add_argument("--grid", nargs=3, default=["-4", "4", "801"], metavar=("LO", "HI", "N"))
    d.add_argument("--fixed", type=float, default=0.0, help="value of the other coordinates")
    d.add_argument("--samples", type=int, default=10_000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default=None, help="output path prefix")
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_density_export)

    t = sub.add_parser("selftest", help="check the numerical invariants")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"tolf: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
