"""Risk-neutral Black-Scholes paths on a uniform grid with pathwise tangents.

Paths follow the multiplicative Euler scheme

    Z[j+1] = Z[j] * (1 + r*dt + sigma*sqrt(dt)*N[j])

so the sensitivity of the terminal spot to the spot at grid point ``j`` is the
product of the remaining per-step factors. Draws come from counter-based
Philox streams keyed on ``(seed, block index)``; path ``i`` always consumes the
same normals regardless of ``n_paths``, which keeps batches prefix-stable and
order-independent.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError

__all__ = [
    "MarketConfig",
    "PathBatch",
    "simulate",
    "propagate_tangents",
    "standard_normals",
    "write_paths_csv",
    "BLOCK_SIZE",
    "philox_generator",
]

BLOCK_SIZE = 4096
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class MarketConfig:
    s0: float = 100.0
    sigma: float = 0.2
    r: float = 0.0
    maturity: float = 1.0
    n_steps: int = 52

    def __post_init__(self):
        if not np.isfinite(self.s0) or self.s0 <= 0:
            raise ConfigError(f"s0 must be positive, got {self.s0}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")
        if not np.isfinite(self.maturity) or self.maturity <= 0:
            raise ConfigError(f"maturity must be positive, got {self.maturity}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be an integer >= 1, got {self.n_steps}")
        if not np.isfinite(self.r):
            raise ConfigError("r must be finite")

    @property
    def dt(self) -> float:
        return self.maturity / self.n_steps

    def grid(self) -> np.ndarray:
        g = np.linspace(0.0, self.maturity, self.n_steps + 1)
        g[-1] = self.maturity
        return g


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Simulated spots, stored normals and tangents ``dZ_T / dZ_{t_j}``.

    ``floored[i]`` is True when path ``i`` was absorbed at zero; ``floor_step[i]``
    is the index of the step whose factor crossed zero (``-1`` otherwise).
    """

    cfg: MarketConfig
    grid: np.ndarray
    paths: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray
    seed: int
    floored: np.ndarray = field(repr=False)
    floor_step: np.ndarray = field(repr=False)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def n_steps(self) -> int:
        return self.paths.shape[1] - 1

    def terminal(self) -> np.ndarray:
        return self.paths[:, -1]

    def step_factors(self) -> np.ndarray:
        dt = np.diff(self.grid)
        return 1.0 + self.cfg.r * dt + self.cfg.sigma * np.sqrt(dt) * self.normals


def philox_generator(seed: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & _U64, block])
    return np.random.Generator(np.random.Philox(ss))


def standard_normals(seed: int, n_paths: int, n_steps: int) -> np.ndarray:
    """Return the ``(n_paths, n_steps)`` normal draws owned by paths ``0..n_paths-1``."""
    out = np.empty((n_paths, n_steps))
    for block, start in enumerate(range(0, n_paths, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, n_paths)
        out[start:stop] = philox_generator(seed, block).standard_normal((stop - start, n_steps))
    return out


def simulate(cfg: MarketConfig, n_paths: int, seed: int) -> PathBatch:
    """Simulate ``n_paths`` Euler paths and their tangents.

    Identical ``(cfg, n_paths, seed)`` gives bit-identical output.
    """
    if int(n_paths) != n_paths or n_paths < 1:
        raise DomainError(f"n_paths must be a positive integer, got {n_paths}")
    if int(seed) != seed or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed}")
    n_paths = int(n_paths)
    grid = cfg.grid()
    normals = standard_normals(int(seed), n_paths, cfg.n_steps)
    dt = np.diff(grid)
    factors = 1.0 + cfg.r * dt + cfg.sigma * np.sqrt(dt) * normals

    paths = np.empty((n_paths, cfg.n_steps + 1))
    paths[:, 0] = cfg.s0
    floored = np.zeros(n_paths, dtype=bool)
    floor_step = np.full(n_paths, -1, dtype=np.int64)
    for j in range(cfg.n_steps):
        crossing = (factors[:, j] <= 0.0) & ~floored
        if crossing.any():
            floor_step[crossing] = j
            floored |= crossing
        paths[:, j + 1] = np.where(floored, 0.0, paths[:, j] * factors[:, j])

    batch = PathBatch(
        cfg=cfg,
        grid=grid,
        paths=paths,
        normals=normals,
        tangents=np.ones_like(paths),
        seed=int(seed),
        floored=floored,
        floor_step=floor_step,
    )
    return propagate_tangents(batch)


def propagate_tangents(batch: PathBatch) -> PathBatch:
    """Rebuild ``tangents[i, j] = prod_{k>=j} factor[i, k]`` from the stored normals.

    On an absorbed path the factor of the crossing step is 0 and later factors
    are 1 (the spot is frozen at zero), so tangents vanish up to the crossing
    step and stay 1 afterwards.
    """
    factors = batch.step_factors()
    if batch.floored.any():
        factors = factors.copy()
        steps = np.arange(batch.n_steps)
        for i in np.flatnonzero(batch.floored):
            k = batch.floor_step[i]
            factors[i, k] = 0.0
            factors[i, steps > k] = 1.0
    tangents = np.ones((batch.n_paths, batch.n_steps + 1))
    for j in range(batch.n_steps - 1, -1, -1):
        tangents[:, j] = tangents[:, j + 1] * factors[:, j]
    return replace(batch, tangents=tangents)


def write_paths_csv(batch: PathBatch, path: str | Path) -> None:
    """Write ``path_id,step,time,spot,tangent_to_T``, one row per (path, step)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "step", "time", "spot", "tangent_to_T"])
        for i in range(batch.n_paths):
            for j in range(batch.n_steps + 1):
                w.writerow([i, j, repr(float(batch.grid[j])), repr(float(batch.paths[i, j])),
                            repr(float(batch.tangents[i, j]))])
