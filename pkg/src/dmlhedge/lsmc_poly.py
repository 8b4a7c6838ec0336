"""Least-squares Monte Carlo with a monomial basis in the spot.

One regression of payoff on spot per rebalance date. Spots are standardized
per date before building the Vandermonde matrix and the least-squares problem
is solved through a QR factorization.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import qr, solve_triangular

from .errors import DomainError, FitError
from .instruments import TrainingSet

__all__ = ["PolyFit", "PolyModel", "fit_poly", "fit_poly_dates", "poly_price", "poly_delta"]

_RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class PolyFit:
    date: float
    degree: int
    beta: np.ndarray
    center: float
    scale: float

    def __post_init__(self):
        if len(self.beta) != self.degree + 1:
            raise DomainError("coefficient count must equal degree + 1")
        if not (np.isfinite(self.center) and np.isfinite(self.scale) and self.scale > 0):
            raise DomainError("scaling constants must be finite with positive scale")

    def price(self, z):
        u = (np.asarray(z, dtype=float) - self.center) / self.scale
        # Horner
        out = np.full_like(u, self.beta[-1])
        for b in self.beta[-2::-1]:
            out = out * u + b
        return out

    def delta(self, z):
        u = (np.asarray(z, dtype=float) - self.center) / self.scale
        out = np.zeros_like(u)
        for i in range(self.degree, 0, -1):
            out = out * u + i * self.beta[i]
        return out / self.scale


@dataclass(frozen=True, eq=False)
class PolyModel:
    fits: tuple[PolyFit, ...]

    @property
    def dates(self) -> np.ndarray:
        return np.array([f.date for f in self.fits])

    def fit_at(self, date: float) -> PolyFit:
        for f in self.fits:
            if np.isclose(f.date, date, rtol=0.0, atol=1e-12):
                return f
        raise LookupError(f"no polynomial fitted at date {date!r}")

    def nearest(self, date: float) -> PolyFit:
        """Fit at the closest fitted date; ties go to the later date."""
        d = np.abs(self.dates - date)
        best = np.flatnonzero(d <= d.min() + 1e-12)[-1]
        return self.fits[best]

    def to_json(self) -> dict:
        return {
            "kind": "lsmc_poly",
            "fits": [
                {"date": f.date, "degree": f.degree, "center": f.center, "scale": f.scale,
                 "beta": [float(b) for b in f.beta]}
                for f in self.fits
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PolyModel":
        return cls(tuple(PolyFit(float(f["date"]), int(f["degree"]), np.asarray(f["beta"], dtype=float),
                                 float(f["center"]), float(f["scale"])) for f in obj["fits"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def _fit_one(z: np.ndarray, x: np.ndarray, degree: int, date: float) -> PolyFit:
    if len(z) < degree + 2:
        raise FitError(f"date {date}: need at least {degree + 2} rows, got {len(z)}")
    center = float(np.mean(z))
    scale = float(np.std(z))
    if scale == 0.0:
        if degree > 0:
            raise FitError(f"date {date}: rank deficient basis (constant spot)")
        scale = 1.0
    u = (z - center) / scale
    V = np.vander(u, degree + 1, increasing=True)
    Q, R = qr(V, mode="economic")
    diag = np.abs(np.diag(R))
    if diag.min() <= _RANK_TOL * diag.max():
        raise FitError(f"date {date}: rank deficient basis at degree {degree}")
    beta = solve_triangular(R, Q.T @ x)
    return PolyFit(float(date), int(degree), beta, center, scale)


def fit_poly(ts: TrainingSet, degree: int = 5, date: float | None = None) -> PolyFit:
    """Fit one date's regression of ``x`` on ``z``.

    ``ts`` must hold rows of a single date; ``date`` defaults to the date
    implied by the rows' time to maturity.
    """
    if degree < 0:
        raise DomainError(f"degree must be non-negative, got {degree}")
    if date is None:
        taus = np.unique(ts.tau)
        if taus.size != 1:
            raise DomainError("fit_poly expects rows from a single date")
        date = ts.instrument.maturity - float(taus[0])
    return _fit_one(np.asarray(ts.z, dtype=float), np.asarray(ts.x, dtype=float), degree, date)


def fit_poly_dates(ts: TrainingSet, degree: int = 5) -> PolyModel:
    """Fit one polynomial per date present in a per-date training set.

    Dates whose spots are all equal (the initial date) cannot carry a slope
    and are skipped for ``degree > 0``; hedging falls back to the nearest
    fitted date there.
    """
    if degree < 0:
        raise DomainError(f"degree must be non-negative, got {degree}")
    grid = ts.market.grid()
    fits = []
    for idx in ts.dates():
        sub = ts.at_date(int(idx))
        if degree > 0 and np.ptp(sub.z) == 0.0:
            continue
        fits.append(_fit_one(sub.z, sub.x, degree, float(grid[idx])))
    if not fits:
        raise FitError("no date with spread-out spots to fit")
    return PolyModel(tuple(fits))


def poly_price(model: PolyModel, date: float, z):
    return model.fit_at(date).price(z)


def poly_delta(model: PolyModel, date: float, z):
    return model.fit_at(date).delta(z)
