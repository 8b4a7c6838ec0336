"""Run configuration, seed derivation and per-method training used by the CLI."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import twin_net
from .analytic import bs_call, bs_digital
from .errors import ConfigError, DmlError, MethodError
from .hedging import ANALYTIC, DeltaSource, analytic_source, net_source, poly_source, zero_source
from .instruments import Instrument, build_training_set
from .lsmc_poly import fit_poly_dates
from .market_sim import MarketConfig, PathBatch

METHODS = ("lsmc_poly", "lsmc_nn", "diff_nn")
BENCHMARKS = (ANALYTIC, "no_hedge")
CURVE_SPOTS = np.arange(60.0, 161.0, 1.0)

# key -> default; the default's type is the parsing type
DEFAULTS: dict[str, object] = {
    "seed": 20240601,
    "market.s0": 100.0,
    "market.sigma": 0.2,
    "market.r": 0.0,
    "market.maturity": 1.0,
    "market.n_steps": 52,
    "instrument.kind": "european_call",
    "instrument.strike": 110.0,
    "instrument.maturity": 1.0,
    "method": "diff_nn",
    "sim.paths": 10,
    "train.paths": 7000,
    "test.paths": 10_000,
    "poly.degree": 5,
    "net.lam": 1.0,
    "net.epochs": 100,
    "net.batch_size": 256,
    "net.learning_rate": 0.01,
    "net.hidden_width": 20,
    "net.hidden_layers": 4,
    "table1.sizes": (1000, 3000, 5000, 7000),
    "table1.seeds": 5,
    "table1.methods": METHODS,
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) for s in items) if isinstance(default[0], int) else tuple(items)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    """Resolved flat configuration with typed accessors."""

    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        values = dict(base.values if base is not None else DEFAULTS)
        for key, raw in pairs.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def parse_text(cls, text: str) -> "RunConfig":
        pairs = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            pairs[key.strip()] = raw
        return cls.from_pairs(pairs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.parse_text(text)

    def format(self) -> str:
        return "".join(f"{k}={_format_value(self.values[k])}\n" for k in sorted(self.values))

    def echo(self) -> dict:
        return {k: _format_value(self.values[k]) for k in sorted(self.values)}

    def __getitem__(self, key):
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        if not 0 <= v["seed"] < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for key in ("sim.paths", "train.paths", "test.paths", "table1.seeds"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be positive")
        if v["method"] not in METHODS + BENCHMARKS:
            raise ConfigError(f"method must be one of {', '.join(METHODS + BENCHMARKS)}")
        bad = [m for m in v["table1.methods"] if m not in METHODS]
        if bad:
            raise ConfigError(f"table1.methods: unknown {bad}")
        if v["net.lam"] < 0:
            raise ConfigError("net.lam must be non-negative")
        self.market()
        self.instrument()
        self.train_config(0, 1.0)

    def market(self) -> MarketConfig:
        v = self.values
        return MarketConfig(v["market.s0"], v["market.sigma"], v["market.r"], v["market.maturity"], v["market.n_steps"])

    def instrument(self) -> Instrument:
        v = self.values
        return Instrument(v["instrument.kind"], v["instrument.strike"], v["instrument.maturity"])

    def train_config(self, seed: int, lam: float) -> twin_net.TrainConfig:
        v = self.values
        return twin_net.TrainConfig(lam=lam, epochs=v["net.epochs"], batch_size=v["net.batch_size"],
                                    learning_rate=v["net.learning_rate"], seed=seed,
                                    hidden_width=v["net.hidden_width"], hidden_layers=v["net.hidden_layers"])


def substream(root: int, label: str) -> int:
    """Seed for a named substream; independent of every other label."""
    digest = hashlib.blake2b(f"{root}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class CellSeeds:
    sim: int
    label: int
    net: int

    @classmethod
    def for_cell(cls, root: int, size: int, rep: int) -> "CellSeeds":
        tag = f"{size}.{rep}"
        return cls(substream(root, f"sim.train.{tag}"), substream(root, f"label.dates.{tag}"),
                   substream(root, f"net.init.{tag}"))


@dataclass
class Fitted:
    method: str
    source: DeltaSource
    model: dict | None
    history: list
    initial_loss: float | None

    def curve(self, t: float, spots: np.ndarray, inst: Instrument) -> tuple[np.ndarray, np.ndarray]:
        """Model price and delta at date ``t``."""
        raise NotImplementedError


@dataclass
class _PolyFitted(Fitted):
    poly: object = None

    def curve(self, t, spots, inst):
        f = self.poly.nearest(t)
        return f.price(spots), f.delta(spots)


@dataclass
class _NetFitted(Fitted):
    params: twin_net.NetParams | None = None

    def curve(self, t, spots, inst):
        out = twin_net.predict(self.params, spots, inst.maturity - t)
        return out.y, out.dy_dz


@dataclass
class _OracleFitted(Fitted):
    cfg: MarketConfig | None = None
    zero: bool = False

    def curve(self, t, spots, inst):
        if self.zero:
            return np.zeros_like(spots), np.zeros_like(spots)
        q = (bs_call if inst.kind == "european_call" else bs_digital)(spots, inst.strike, self.cfg.sigma,
                                                                      inst.maturity - t, self.cfg.r)
        return q.price, q.delta


def fit_method(method: str, batch: PathBatch, run: RunConfig, seeds: CellSeeds) -> Fitted:
    """Train one method on ``batch``; errors carry the method tag."""
    inst = run.instrument()
    try:
        if method == "lsmc_poly":
            ts = build_training_set(batch, inst, "per_date")
            model = fit_poly_dates(ts, run["poly.degree"])
            resid = []
            for f in model.fits:
                rows = ts.at_date(_date_index(batch, f.date))
                resid.append(f.price(rows.z) - rows.x)
            mse = float(np.mean(np.concatenate(resid) ** 2))
            return _PolyFitted(method, poly_source(model, method), model.to_json(), [mse], None, poly=model)
        if method in ("lsmc_nn", "diff_nn"):
            ts = build_training_set(batch, inst, "time_feature", seed=seeds.label)
            lam = 0.0 if method == "lsmc_nn" else run["net.lam"]
            res = twin_net.train(ts, run.train_config(seeds.net, lam), value_only=(method == "lsmc_nn"))
            model = res.params.to_json()
            model.update(method=method, lam=lam, seed=seeds.net)
            return _NetFitted(method, net_source(res.params, inst, method), model, list(res.history),
                              res.initial_loss, params=res.params)
        if method == ANALYTIC:
            return _OracleFitted(method, analytic_source(batch.cfg, inst, method), None, [], None, cfg=batch.cfg)
        if method == "no_hedge":
            return _OracleFitted(method, zero_source(method), None, [], None, cfg=batch.cfg, zero=True)
    except DmlError as exc:
        raise MethodError(f"{method}: {exc}", method=method) from exc
    raise ConfigError(f"unknown method {method!r}")


def _date_index(batch: PathBatch, t: float) -> int:
    return int(np.argmin(np.abs(batch.grid - t)))


def curve_date(cfg: MarketConfig) -> float:
    """First rebalance date after the origin, where every method has a fitted curve."""
    return float(cfg.grid()[1])


def curve_table(fitted: Fitted, cfg: MarketConfig, inst: Instrument, spots: np.ndarray = CURVE_SPOTS) -> np.ndarray:
    """Columns ``spot, model_price, model_delta, bs_price, bs_delta``."""
    t = curve_date(cfg)
    price, delta = fitted.curve(t, spots, inst)
    q = (bs_call if inst.kind == "european_call" else bs_digital)(spots, inst.strike, cfg.sigma,
                                                                  inst.maturity - t, cfg.r)
    return np.column_stack([spots, price, delta, q.price, q.delta])


def curve_stats(table: np.ndarray) -> dict:
    spots, price, delta, bs_p, bs_d = table.T
    core = (spots >= 80) & (spots <= 140)
    return {
        "price_rmse": float(np.sqrt(np.mean((price - bs_p) ** 2))),
        "delta_rmse": float(np.sqrt(np.mean((delta - bs_d) ** 2))),
        "delta_max_dev": float(np.max(np.abs(delta - bs_d))),
        "delta_max_dev_80_140": float(np.max(np.abs(delta[core] - bs_d[core]))),
    }
