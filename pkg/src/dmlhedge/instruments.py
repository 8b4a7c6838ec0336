"""Payoffs, differential labels and training-set assembly.

A differential label is the pathwise derivative of the payoff with respect to
the spot at the sample date: the generalized derivative of the payoff at
``Z_T`` times the tangent ``dZ_T / dZ_t``. For the call the generalized
derivative is the indicator ``Z_T > K``; for the digital it is a Dirac mass at
the strike, which we replace by the Gaussian kernel ``sqrt(n/pi) exp(-n x^2)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ConfigError, DomainError
from .market_sim import MarketConfig, PathBatch, philox_generator

__all__ = [
    "Instrument",
    "TrainingSet",
    "payoff",
    "call_diff_label",
    "digital_diff_label",
    "default_bandwidth",
    "diff_label",
    "build_training_set",
    "write_training_csv",
]

Kind = Literal["european_call", "digital"]
KINDS = ("european_call", "digital")


@dataclass(frozen=True)
class Instrument:
    kind: Kind = "european_call"
    strike: float = 110.0
    maturity: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown instrument kind {self.kind!r}; expected one of {KINDS}")
        if not self.strike > 0:
            raise ConfigError(f"strike must be positive, got {self.strike}")
        if not self.maturity > 0:
            raise ConfigError(f"maturity must be positive, got {self.maturity}")


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Columns of (spot, time-to-maturity, payoff label, differential label).

    ``date_index`` holds the grid index each row was sampled at.
    """

    z: np.ndarray
    tau: np.ndarray
    x: np.ndarray
    q: np.ndarray
    date_index: np.ndarray
    instrument: Instrument
    market: MarketConfig
    seed: int
    mode: str = "time_feature"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.z)
        if not (len(self.tau) == len(self.x) == len(self.q) == len(self.date_index) == n):
            raise DomainError("training set columns have different lengths")
        for name in ("z", "tau", "x", "q"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DomainError(f"non-finite values in column {name!r}")

    def __len__(self) -> int:
        return len(self.z)

    @property
    def n_rows(self) -> int:
        return len(self.z)

    def at_date(self, index: int) -> "TrainingSet":
        """Rows sampled at grid index ``index``."""
        m = self.date_index == index
        return TrainingSet(self.z[m], self.tau[m], self.x[m], self.q[m], self.date_index[m],
                           self.instrument, self.market, self.seed, self.mode, dict(self.meta))

    def dates(self) -> np.ndarray:
        return np.unique(self.date_index)


def payoff(inst: Instrument, z_T):
    z_T = np.asarray(z_T, dtype=float)
    if inst.kind == "european_call":
        out = np.maximum(z_T - inst.strike, 0.0)
    else:
        out = (z_T > inst.strike).astype(float)
    return float(out) if out.ndim == 0 else out


def call_diff_label(inst: Instrument, z_T, tangent):
    z_T = np.asarray(z_T, dtype=float)
    out = np.where(z_T > inst.strike, np.asarray(tangent, dtype=float), 0.0)
    return float(out) if out.ndim == 0 else out


def digital_diff_label(inst: Instrument, z_T, tangent, bandwidth_n: float):
    if not bandwidth_n > 0:
        raise DomainError(f"bandwidth_n must be positive, got {bandwidth_n}")
    d = np.asarray(z_T, dtype=float) - inst.strike
    out = np.sqrt(bandwidth_n / np.pi) * np.exp(-bandwidth_n * d * d) * np.asarray(tangent, dtype=float)
    return float(out) if np.ndim(out) == 0 else out


def default_bandwidth(z_T) -> float:
    """Kernel parameter ``n**0.4 / (2 h**2)`` with ``h`` the sample std of ``z_T``.

    Equivalent to a Gaussian kernel of width ``h * n**(-1/5)``.
    """
    z_T = np.asarray(z_T, dtype=float)
    h = np.std(z_T, ddof=1) if z_T.size > 1 else 0.0
    if not h > 0:
        raise DomainError("cannot choose a kernel bandwidth for degenerate terminal spots")
    return z_T.size ** 0.4 / (2.0 * h * h)


def diff_label(inst: Instrument, z_T, tangent, bandwidth_n: float | None = None):
    if inst.kind == "european_call":
        return call_diff_label(inst, z_T, tangent)
    if bandwidth_n is None:
        raise DomainError("digital labels need a bandwidth")
    return digital_diff_label(inst, z_T, tangent, bandwidth_n)


def build_training_set(
    batch: PathBatch,
    inst: Instrument,
    mode: str = "time_feature",
    dates=None,
    seed: int = 0,
    bandwidth_n: float | None = None,
) -> TrainingSet:
    """Assemble labelled rows from a simulated batch.

    Parameters
    ----------
    dates
        Grid indices to sample from, all strictly before maturity. Defaults to
        every rebalance date ``0..n_steps-1``.
    mode
        ``"time_feature"``: one row per path at a date drawn uniformly from
        ``dates`` using ``seed``. ``"per_date"``: one row per path for every date.
    bandwidth_n
        Kernel parameter for digital labels; defaults to :func:`default_bandwidth`
        of the terminal spots.
    """
    if batch.n_paths < 1:
        raise DomainError("empty path batch")
    if not np.isclose(inst.maturity, batch.cfg.maturity):
        raise ConfigError("instrument maturity differs from the simulated horizon")
    if dates is None:
        dates = np.arange(batch.n_steps)
    dates = np.asarray(dates, dtype=np.int64).ravel()
    if dates.size == 0:
        raise DomainError("dates must be non-empty")
    if np.any(dates < 0) or np.any(dates >= batch.n_steps):
        bad = dates[(dates < 0) | (dates >= batch.n_steps)]
        raise DomainError(f"date indices {bad.tolist()} are not rebalance dates strictly before maturity")

    z_T = batch.terminal()
    x_path = payoff(inst, z_T)
    if inst.kind == "digital" and bandwidth_n is None:
        bandwidth_n = default_bandwidth(z_T)

    n = batch.n_paths
    if mode == "time_feature":
        rng = philox_generator(seed, 0)
        idx = dates[rng.integers(0, dates.size, size=n)]
        rows = np.arange(n)
    elif mode == "per_date":
        idx = np.repeat(dates, n)
        rows = np.tile(np.arange(n), dates.size)
    else:
        raise ConfigError(f"unknown sampling mode {mode!r}")

    z = batch.paths[rows, idx]
    tau = inst.maturity - batch.grid[idx]
    q = diff_label(inst, z_T[rows], batch.tangents[rows, idx], bandwidth_n)
    meta = {"bandwidth_n": bandwidth_n} if bandwidth_n is not None else {}
    return TrainingSet(z, tau, np.asarray(x_path)[rows], np.asarray(q), idx, inst, batch.cfg,
                       int(seed), mode, meta)


def write_training_csv(ts: TrainingSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z", "tau", "x", "q"])
        for row in zip(ts.z, ts.tau, ts.x, ts.q):
            w.writerow([repr(float(v)) for v in row])
