"""Asset data model and the portfolio return functions.

Three asset return kinds are supported, all stated per unit of capital in
the underlying instrument:

* ``stock``: direct holding, y = z / purchase_price.
* ``call_expiry``: European call held to expiry, y = (max(0, z - K) - b) / b.
* ``call_delta_gamma``: resale of the call priced by a second-order
  delta-gamma approximation, y = delta * eps + gamma * eps^2 / 2 with
  eps = z - purchase_price (an absolute price change, not a ratio).

The portfolio return is the weight-linear combination sum_i x_i y_i(z_i).
Asset parameters ship as a CSV transcription of a 20-stock snapshot dated
2022-07-13.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .risk import NormalPriceModel

__all__ = [
    "Asset",
    "AssetUniverse",
    "AssetDataError",
    "RETURN_KINDS",
    "default_asset_path",
    "load_assets",
    "price_model",
    "y_stock",
    "y_call_expiry",
    "y_call_delta_gamma",
    "portfolio_return",
    "return_matrix",
]

RETURN_KINDS = ("stock", "call_expiry", "call_delta_gamma")

_COLUMNS = ("ticker", "price", "hist_mean_pct", "hist_sd_pct", "strike", "bid", "delta", "gamma")


class AssetDataError(ValueError):
    """Raised for malformed asset data files."""


@dataclass(frozen=True)
class Asset:
    ticker: str
    purchase_price: float
    hist_mean_pct: float
    hist_sd_pct: float
    strike: float
    bid: float
    delta: float
    gamma: float

    def __post_init__(self):
        for name in ("purchase_price", "hist_sd_pct", "strike", "bid"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{self.ticker}: {name} must be positive")


@dataclass(frozen=True)
class AssetUniverse:
    assets: tuple[Asset, ...]

    def __post_init__(self):
        tickers = [a.ticker for a in self.assets]
        if len(set(tickers)) != len(tickers):
            raise AssetDataError("duplicate tickers in universe")

    def __len__(self) -> int:
        return len(self.assets)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(a, name) for a in self.assets])


def default_asset_path() -> Path:
    """Path of the shipped 2022-07-13 asset table."""
    return Path(resources.files("cvarbo").joinpath("data/assets_2022-07-13.csv"))


def load_assets(path=None) -> AssetUniverse:
    """Parse an asset CSV (header required, one row per asset)."""
    path = Path(path) if path is not None else default_asset_path()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise AssetDataError(f"{path}: empty file")
        missing = [c for c in _COLUMNS if c not in reader.fieldnames]
        if missing:
            raise AssetDataError(f"{path}: missing columns {missing}")
        assets = []
        seen = set()
        for i, row in enumerate(reader, start=2):  # header is line 1
            try:
                asset = Asset(
                    ticker=row["ticker"].strip(),
                    purchase_price=float(row["price"]),
                    hist_mean_pct=float(row["hist_mean_pct"]),
                    hist_sd_pct=float(row["hist_sd_pct"]),
                    strike=float(row["strike"]),
                    bid=float(row["bid"]),
                    delta=float(row["delta"]),
                    gamma=float(row["gamma"]),
                )
            except (TypeError, ValueError) as exc:
                raise AssetDataError(f"{path}: row {i}: {exc}") from None
            if asset.ticker in seen:
                raise AssetDataError(f"{path}: row {i}: duplicate ticker {asset.ticker}")
            seen.add(asset.ticker)
            assets.append(asset)
    if not assets:
        raise AssetDataError(f"{path}: no asset rows")
    return AssetUniverse(assets=tuple(assets))


def price_model(u: AssetUniverse) -> NormalPriceModel:
    """Future-price distribution: mean = price * (1 + mu%/100), sd = price * sd%/100."""
    prices = u.column("purchase_price")
    means = prices * (1.0 + u.column("hist_mean_pct") / 100.0)
    sds = prices * u.column("hist_sd_pct") / 100.0
    return NormalPriceModel(means=means, sds=sds)


def y_stock(z, a: Asset):
    return np.asarray(z, dtype=float) / a.purchase_price


def y_call_expiry(z, a: Asset):
    return (np.maximum(0.0, np.asarray(z, dtype=float) - a.strike) - a.bid) / a.bid


def y_call_delta_gamma(z, a: Asset):
    eps = np.asarray(z, dtype=float) - a.purchase_price
    return a.delta * eps + 0.5 * a.gamma * eps * eps


def return_matrix(z: np.ndarray, kind: str, u: AssetUniverse) -> np.ndarray:
    """Per-asset returns for a (n, N) matrix of prices; vectorized per kind."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    if z.shape[1] != len(u):
        raise ValueError(f"price vector has {z.shape[1]} assets, universe has {len(u)}")
    if kind == "stock":
        return z / u.column("purchase_price")
    if kind == "call_expiry":
        bid = u.column("bid")
        return (np.maximum(0.0, z - u.column("strike")) - bid) / bid
    if kind == "call_delta_gamma":
        eps = z - u.column("purchase_price")
        return u.column("delta") * eps + 0.5 * u.column("gamma") * eps * eps
    raise ValueError(f"unknown return kind {kind!r}; choose from {RETURN_KINDS}")


def portfolio_return(w, z, kind: str, u: AssetUniverse):
    """Weighted portfolio return sum_i w_i y_i(z_i).

    w is an N-vector of non-negative weights with sum <= 1; z is a single
    N-vector of prices or an (n, N) matrix of scenarios. Returns a scalar
    for a single scenario, else an (n,) vector.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.shape[0] != len(u):
        raise ValueError(f"weights have shape {w.shape}, universe has {len(u)} assets")
    if np.any(w < -1e-12) or w.sum() > 1.0 + 1e-12:
        raise ValueError("weights must be non-negative and sum to at most 1")
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    out = return_matrix(z, kind, u) @ w
    return float(out[0]) if single else out
