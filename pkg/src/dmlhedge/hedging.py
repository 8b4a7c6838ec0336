"""Discrete delta-hedging backtest of a short option.

The writer receives the premium ``V0``, holds ``delta(t_{i-1}, Z_{t_{i-1}})``
units of the underlying over ``[t_{i-1}, t_i]`` and pays the payoff at maturity:

    PnL = V0 - X + sum_i delta_{i-1} * (Z_{t_i} - Z_{t_{i-1}})

Gains are not discounted (zero short rate). The relative hedging error is the
population standard deviation of ``PnL / V0``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import twin_net
from .analytic import bs_call, bs_digital
from .errors import BacktestError, DomainError
from .instruments import Instrument, payoff
from .lsmc_poly import PolyModel
from .market_sim import MarketConfig, PathBatch, simulate

__all__ = [
    "DeltaSource",
    "HedgeReport",
    "analytic_source",
    "poly_source",
    "net_source",
    "zero_source",
    "premium",
    "backtest",
    "backtest_batch",
    "histogram",
    "HIST_BINS",
    "HIST_RANGE",
    "Table1Plan",
    "Table1Result",
    "Cell",
    "table1",
    "write_hist_csv",
]

HIST_BINS = 61
HIST_RANGE = (-1.0, 1.0)

DeltaFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DeltaSource:
    """A hedge-ratio function ``delta(t, spots)`` with a method label."""

    label: str
    fn: DeltaFn

    def __call__(self, t: float, spots: np.ndarray) -> np.ndarray:
        return self.fn(t, spots)


def analytic_source(cfg: MarketConfig, inst: Instrument, label: str = "black_scholes") -> DeltaSource:
    quote = bs_call if inst.kind == "european_call" else bs_digital

    def fn(t, spots):
        tau = inst.maturity - t
        spots = np.asarray(spots, dtype=float)
        out = np.zeros_like(spots)
        live = spots > 0
        if live.any():
            out[live] = quote(spots[live], inst.strike, cfg.sigma, tau, cfg.r).delta
        return out

    return DeltaSource(label, fn)


def poly_source(model: PolyModel, label: str = "lsmc_poly") -> DeltaSource:
    """Per-date polynomial deltas; a date without its own fit uses the nearest fitted date."""
    return DeltaSource(label, lambda t, spots: model.nearest(t).delta(spots))


def net_source(params: twin_net.NetParams, inst: Instrument, label: str) -> DeltaSource:
    return DeltaSource(label, lambda t, spots: twin_net.predict(params, spots, inst.maturity - t).dy_dz)


def zero_source(label: str = "no_hedge") -> DeltaSource:
    return DeltaSource(label, lambda t, spots: np.zeros_like(np.asarray(spots, dtype=float)))


def premium(cfg: MarketConfig, inst: Instrument) -> float:
    quote = bs_call if inst.kind == "european_call" else bs_digital
    return float(quote(cfg.s0, inst.strike, cfg.sigma, inst.maturity, cfg.r).price)


@dataclass(frozen=True, eq=False)
class HedgeReport:
    method: str
    pnl_rel: np.ndarray
    rel_error: float
    premium: float
    bin_edges: np.ndarray
    counts: np.ndarray
    n_test_paths: int
    seed: int
    positions: np.ndarray
    spots: np.ndarray
    payoffs: np.ndarray

    def recompute_pnl_rel(self) -> np.ndarray:
        """PnL rebuilt from the stored positions and spots."""
        gains = np.sum(self.positions * np.diff(self.spots, axis=1), axis=1)
        return (self.premium - self.payoffs + gains) / self.premium

    def write_pnl_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "pnl_rel"])
            for i, v in enumerate(self.pnl_rel):
                w.writerow([i, repr(float(v))])

    def hist_rows(self):
        for left, right, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            yield [repr(float(left)), repr(float(right)), int(c), self.method]


def histogram(pnl_rel: np.ndarray, bins: int = HIST_BINS, rng=HIST_RANGE):
    """Counts over fixed bins; values outside the range land in the end bins."""
    edges = np.linspace(rng[0], rng[1], bins + 1)
    counts, _ = np.histogram(np.clip(pnl_rel, rng[0], rng[1]), bins=edges)
    return edges, counts


def write_hist_csv(reports, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count", "method"])
        for rep in reports:
            w.writerows(rep.hist_rows())


def backtest_batch(source: DeltaSource, batch: PathBatch, inst: Instrument) -> HedgeReport:
    """Hedge every path of ``batch``, rebalancing at each grid point before maturity."""
    cfg = batch.cfg
    if not np.isclose(inst.maturity, cfg.maturity):
        raise DomainError("instrument maturity differs from the test horizon")
    v0 = premium(cfg, inst)
    if not v0 > 0:
        raise DomainError("premium must be positive to normalize the PnL")
    n, m = batch.n_paths, batch.n_steps
    positions = np.empty((n, m))
    for i in range(m):
        t = float(batch.grid[i])
        try:
            d = np.asarray(source(t, batch.paths[:, i]), dtype=float)
        except Exception as exc:
            raise BacktestError(f"{source.label}: delta failed at t={t:.6f}: {exc}",
                                method=source.label, date=t) from exc
        if d.shape != (n,) or not np.all(np.isfinite(d)):
            raise BacktestError(f"{source.label}: invalid deltas at t={t:.6f}", method=source.label, date=t)
        positions[:, i] = d
    x = np.asarray(payoff(inst, batch.terminal()))
    gains = np.sum(positions * np.diff(batch.paths, axis=1), axis=1)
    pnl_rel = (v0 - x + gains) / v0
    edges, counts = histogram(pnl_rel)
    return HedgeReport(source.label, pnl_rel, float(np.std(pnl_rel)), v0, edges, counts, n, batch.seed,
                       positions, batch.paths, x)


def backtest(source: DeltaSource, cfg: MarketConfig, inst: Instrument, n_test_paths: int, seed: int) -> HedgeReport:
    return backtest_batch(source, simulate(cfg, n_test_paths, seed), inst)


# ---------------------------------------------------------------- method x size grid

TABLE_SIZES = (1000, 3000, 5000, 7000)
LEARNED_METHODS = ("lsmc_poly", "lsmc_nn", "diff_nn")
ANALYTIC = "black_scholes"

# fit(method, training batch) -> (DeltaSource, json-friendly info)
FitFn = Callable[[str, PathBatch], "tuple[DeltaSource, dict]"]


@dataclass(frozen=True)
class Table1Plan:
    """Methods x training sizes x repetitions, hedged on one shared test batch."""

    train_seeds: dict
    test_seed: int
    methods: tuple = LEARNED_METHODS
    sizes: tuple = TABLE_SIZES
    n_test_paths: int = 10_000

    def __post_init__(self):
        for size in self.sizes:
            if size not in self.train_seeds or not self.train_seeds[size]:
                raise DomainError(f"no training seeds for size {size}")
        used = [s for size in self.sizes for s in self.train_seeds[size]]
        if self.test_seed in used:
            raise DomainError("test seed collides with a training seed")
        if self.n_test_paths < 1:
            raise DomainError("n_test_paths must be positive")

    @property
    def n_reps(self) -> int:
        return min(len(self.train_seeds[s]) for s in self.sizes)


@dataclass
class Cell:
    method: str
    size: int
    rep: int
    seed: int
    rel_error: float | None = None
    error: str | None = None
    info: dict | None = None


@dataclass
class Table1Result:
    plan: Table1Plan
    analytic: HedgeReport
    cells: list
    reports: dict

    def values(self, method: str, size: int) -> np.ndarray:
        return np.array([c.rel_error for c in self.cells
                         if c.method == method and c.size == size and c.rel_error is not None])

    def median(self, method: str, size: int) -> float:
        if method == ANALYTIC:
            return self.analytic.rel_error
        v = self.values(method, size)
        return float(np.median(v)) if v.size else float("nan")

    def grid(self) -> dict:
        """Median rel_error per method and size; the analytic row repeats across sizes."""
        rows = (ANALYTIC,) + tuple(self.plan.methods)
        return {m: {str(s): self.median(m, s) for s in self.plan.sizes} for m in rows}

    @property
    def failed(self) -> list:
        return [c for c in self.cells if c.error is not None]

    def to_json(self) -> dict:
        return {
            "grid": self.grid(),
            "analytic_rel_error": self.analytic.rel_error,
            "premium": self.analytic.premium,
            "test_seed": self.plan.test_seed,
            "n_test_paths": self.plan.n_test_paths,
            "sizes": list(self.plan.sizes),
            "methods": [ANALYTIC] + list(self.plan.methods),
            "cells": [
                {"method": c.method, "size": c.size, "rep": c.rep, "seed": c.seed,
                 "rel_error": c.rel_error, "error": c.error, "info": c.info or {}}
                for c in self.cells
            ],
        }


def table1(plan: Table1Plan, cfg: MarketConfig, inst: Instrument, fit: FitFn, log=None) -> Table1Result:
    """Run the grid; a failing cell is recorded and the run continues.

    Every method at a given ``(size, rep)`` trains on the same batch, and all
    cells hedge the same test batch. Full reports are kept for the analytic
    source and for the first repetition at the largest size.
    """
    test = simulate(cfg, plan.n_test_paths, plan.test_seed)
    analytic = backtest_batch(analytic_source(cfg, inst, ANALYTIC), test, inst)
    reports = {ANALYTIC: analytic}
    cells = []
    largest = max(plan.sizes)
    for size in plan.sizes:
        for rep in range(plan.n_reps):
            seed = plan.train_seeds[size][rep]
            batch = simulate(cfg, size, seed)
            for method in plan.methods:
                cell = Cell(method, size, rep, seed)
                try:
                    source, info = fit(method, batch)
                    rep_ = backtest_batch(source, test, inst)
                    cell.rel_error, cell.info = rep_.rel_error, info
                    if size == largest and rep == 0:
                        reports[method] = rep_
                except Exception as exc:  # recorded per cell
                    cell.error = f"{type(exc).__name__}: {exc}"
                cells.append(cell)
                if log is not None:
                    log(cell)
    return Table1Result(plan, analytic, cells, reports)
