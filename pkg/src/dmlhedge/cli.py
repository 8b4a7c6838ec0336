"""Command-line entry point: ``dmlhedge {simulate,train,hedge,table1}``.

Configuration is a flat ``key=value`` file with dotted keys. Any key can be
overridden on the command line as ``--market.sigma 0.3``; ``--seed``,
``--method`` and ``--paths`` are shorthands. Every command writes a
``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DmlError
from .hedging import (
    ANALYTIC,
    Table1Plan,
    backtest_batch,
    table1,
    write_hist_csv,
)
from .market_sim import simulate, write_paths_csv
from .pipeline import METHODS, CellSeeds, RunConfig, curve_stats, curve_table, fit_method, substream

log = logging.getLogger("dmlhedge")

# which config key ``--paths`` sets for each command
PATHS_KEY = {"simulate": "sim.paths", "train": "train.paths", "hedge": "test.paths", "table1": "test.paths"}


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _git_stamp() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


class Manifest:
    """Run record written at start and rewritten when the run ends."""

    def __init__(self, out: Path, command: str, run: RunConfig):
        self.out = out
        self.path = out / "manifest.json"
        self.data = {
            "command": command,
            "version": __version__,
            "git": _git_stamp(),
            "config": run.echo(),
            "seeds": {},
            "stages": {},
            "outputs": {},
            "status": "running",
        }
        self.errors = 0
        self.flush()

    def flush(self) -> None:
        write_json(self.path, self.data)

    def seed(self, label: str, value: int) -> None:
        self.data["seeds"][label] = value

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        rec = {"status": "ok"}
        self.data["stages"][name] = rec
        try:
            yield rec
        except DmlError as exc:
            rec.update(status="error", error=f"{type(exc).__name__}: {exc}")
            self.errors += 1
            log.error("%s failed: %s", name, exc)
        finally:
            rec["wall_s"] = round(time.perf_counter() - t0, 3)
            self.flush()

    def output(self, path: Path) -> Path:
        self.data["outputs"][path.name] = sha256(path)
        return path

    def finalize(self) -> int:
        self.data["status"] = "error" if self.errors else "ok"
        self.flush()
        return 1 if self.errors else 0


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


def write_curve(path: Path, table: np.ndarray) -> None:
    _write_rows(path, ["spot", "model_price", "model_delta", "bs_price", "bs_delta"],
                ([_fmt(v) for v in row] for row in table))


def write_loss(path: Path, fitted) -> None:
    rows = []
    if fitted.initial_loss is not None:
        rows.append([0, _fmt(fitted.initial_loss)])
        start = 1
    else:
        start = 0
    rows += [[start + i, _fmt(v)] for i, v in enumerate(fitted.history)]
    _write_rows(path, ["epoch", "loss"], rows)


# ---------------------------------------------------------------- commands

def cmd_simulate(run: RunConfig, out: Path, man: Manifest) -> None:
    seed = substream(run["seed"], "sim.paths")
    man.seed("sim.paths", seed)
    with man.stage("simulate"):
        batch = simulate(run.market(), run["sim.paths"], seed)
        write_paths_csv(batch, out / "paths.csv")
        man.output(out / "paths.csv")


def _train_one(run: RunConfig, man: Manifest, method: str):
    size = run["train.paths"]
    seeds = CellSeeds.for_cell(run["seed"], size, 0)
    man.seed(f"sim.train.{size}.0", seeds.sim)
    man.seed(f"label.dates.{size}.0", seeds.label)
    man.seed(f"net.init.{size}.0", seeds.net)
    batch = simulate(run.market(), size, seeds.sim)
    return fit_method(method, batch, run, seeds), seeds


def cmd_train(run: RunConfig, out: Path, man: Manifest) -> None:
    method = run["method"]
    with man.stage(f"train.{method}") as rec:
        fitted, _ = _train_one(run, man, method)
        if fitted.model is not None:
            write_json(out / "model.json", fitted.model)
            man.output(out / "model.json")
        write_loss(out / "loss.csv", fitted)
        table = curve_table(fitted, run.market(), run.instrument())
        write_curve(out / "curve.csv", table)
        man.output(out / "loss.csv")
        man.output(out / "curve.csv")
        rec["curve"] = curve_stats(table)


def cmd_hedge(run: RunConfig, out: Path, man: Manifest) -> None:
    method = run["method"]
    fitted = None
    with man.stage(f"train.{method}"):
        fitted, seeds = _train_one(run, man, method)
    if fitted is None:
        return
    test_seed = substream(run["seed"], "sim.test")
    man.seed("sim.test", test_seed)
    man.data["isolation"] = {"test_seed": test_seed, "train_seeds": [seeds.sim],
                             "disjoint": test_seed != seeds.sim}
    with man.stage("backtest") as rec:
        rep = backtest_batch(fitted.source, simulate(run.market(), run["test.paths"], test_seed), run.instrument())
        rep.write_pnl_csv(out / "pnl.csv")
        write_hist_csv([rep], out / "hist.csv")
        summary = {"method": method, "rel_error": rep.rel_error, "premium": rep.premium,
                   "n_test_paths": rep.n_test_paths, "seed": rep.seed}
        write_json(out / "hedge.json", summary)
        for name in ("pnl.csv", "hist.csv", "hedge.json"):
            man.output(out / name)
        rec["rel_error"] = rep.rel_error


def table1_plan(run: RunConfig) -> tuple[Table1Plan, dict]:
    root = run["seed"]
    cells = {(size, rep): CellSeeds.for_cell(root, size, rep)
             for size in run["table1.sizes"] for rep in range(run["table1.seeds"])}
    train_seeds = {size: tuple(cells[size, rep].sim for rep in range(run["table1.seeds"]))
                   for size in run["table1.sizes"]}
    plan = Table1Plan(train_seeds, substream(root, "sim.test"), tuple(run["table1.methods"]),
                      tuple(run["table1.sizes"]), run["test.paths"])
    return plan, {c.sim: c for c in cells.values()}


def run_table1(run: RunConfig, keep_curves: bool = True):
    """Run the grid; returns the result and the curve tables of the reported models."""
    plan, by_sim_seed = table1_plan(run)
    market, inst = run.market(), run.instrument()
    largest = max(plan.sizes)
    curves = {}

    def fit(method, batch):
        fitted = fit_method(method, batch, run, by_sim_seed[batch.seed])
        table = curve_table(fitted, market, inst)
        if keep_curves and batch.n_paths == largest and batch.seed == plan.train_seeds[largest][0]:
            curves[method] = table
        info = curve_stats(table)
        if fitted.history:
            info["final_loss"] = fitted.history[-1]
        return fitted.source, info

    def report(cell):
        if cell.error:
            log.warning("%s size=%d rep=%d failed: %s", cell.method, cell.size, cell.rep, cell.error)
        else:
            log.info("%s size=%d rep=%d rel_error=%.4f", cell.method, cell.size, cell.rep, cell.rel_error)

    return table1(plan, market, inst, fit, log=report), curves


def cmd_table1(run: RunConfig, out: Path, man: Manifest) -> None:
    with man.stage("table1") as rec:
        res, curves = run_table1(run)
        plan = res.plan
        man.seed("sim.test", plan.test_seed)
        for size in plan.sizes:
            for rep, s in enumerate(plan.train_seeds[size]):
                man.seed(f"sim.train.{size}.{rep}", s)
        train = sorted({s for seeds in plan.train_seeds.values() for s in seeds})
        man.data["isolation"] = {"test_seed": plan.test_seed, "train_seeds": train,
                                 "disjoint": plan.test_seed not in train}
        obj = res.to_json()
        obj["config"] = run.echo()
        write_json(out / "table1.json", obj)
        man.output(out / "table1.json")
        for method, rep in res.reports.items():
            rep.write_pnl_csv(out / f"pnl_{method}.csv")
            man.output(out / f"pnl_{method}.csv")
        write_hist_csv(list(res.reports.values()), out / "hist.csv")
        man.output(out / "hist.csv")
        for method, table in curves.items():
            write_curve(out / f"curve_{method}.csv", table)
            man.output(out / f"curve_{method}.csv")
        rec["grid"] = res.grid()
        rec["failed_cells"] = len(res.failed)
        if res.failed:
            man.errors += 1


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "hedge": cmd_hedge, "table1": cmd_table1}


def _overrides(extra: list[str]) -> dict[str, str]:
    pairs = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            val = extra[i + 1]
            i += 2
        pairs[key] = val
    return pairs


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmlhedge", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--seed", help="root seed (unsigned 64-bit)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--method", help=f"one of {', '.join(METHODS + (ANALYTIC, 'no_hedge'))}")
    p.add_argument("--paths", help="path count for the command's main batch")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args, extra: list[str]) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else None
    pairs = _overrides(extra)
    if args.seed is not None:
        pairs["seed"] = args.seed
    if args.method is not None:
        pairs["method"] = args.method
    if args.paths is not None:
        pairs[PATHS_KEY[args.command]] = args.paths
    return RunConfig.from_pairs(pairs, base)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        run = resolve_config(args, extra)
    except ConfigError as exc:
        print(f"dmlhedge: config error: {exc}", file=sys.stderr)
        return 2
    out = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(run.format())
    except OSError as exc:
        print(f"dmlhedge: cannot write to {out}: {exc.strerror}", file=sys.stderr)
        return 2
    man = Manifest(out, args.command, run)
    man.output(out / "config.resolved")
    COMMANDS[args.command](run, out, man)
    return man.finalize()


if __name__ == "__main__":
    sys.exit(main())
