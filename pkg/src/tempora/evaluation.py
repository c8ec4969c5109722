"""Forecast evaluation: MAE/RMSE/sMAPE/MASE/Theil's U2, Diebold-Mariano
comparisons with Newey-West long-run variance, per-origin error trajectories,
cumulative newsvendor profit, and deterministic report emission.

Conventions, documented so emitted numbers are self-describing:
  - sMAPE uses the 200-scaled symmetric form with 0/0 terms read as 0.
  - MASE scales each series by the in-sample MAE of a seasonal-naive
    forecaster (season 7 by default) on the training range; zero-scale
    series are excluded and counted.
  - Theil's U2 compares against the last-value naive per target date.
  - Per-series metrics pool by record-count weighting.
  - TSE is the mean absolute error across SKUs per origin date.
  - CPOI is cumulative newsvendor profit with order quantity round(yhat).
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import SeriesPanel, SplitSpec

__all__ = [
    "EvalError",
    "KeyMismatch",
    "ForecastSet",
    "MetricContext",
    "DmResult",
    "EvalReport",
    "METRIC_KINDS",
    "make_metric_context",
    "metric",
    "metric_detail",
    "dm_test",
    "tse_trajectory",
    "cpoi",
    "build_report",
    "report_emit",
]

METRIC_KINDS = ("mae", "rmse", "smape", "mase", "theil_u2")


class EvalError(ValueError):
    """Evaluation input violated a contract."""


class KeyMismatch(EvalError):
    """Two forecast sets do not cover the same (sku, origin, horizon) keys."""


@dataclass
class ForecastSet:
    """Aligned (sku, origin date, horizon, prediction, actual) records."""

    label: str
    target_mode: str
    sku: np.ndarray      # object array of sku ids
    origin: np.ndarray   # datetime64[D]
    h: np.ndarray        # int64
    yhat: np.ndarray     # fp64, original units
    y: np.ndarray        # fp64, original units

    def __post_init__(self):
        n = len(self.sku)
        if not (len(self.origin) == len(self.h) == len(self.yhat) == len(self.y) == n):
            raise EvalError("forecast set columns have mismatched lengths")
        if n and not (np.isfinite(self.yhat).all() and np.isfinite(self.y).all()):
            raise EvalError(f"forecast set '{self.label}' contains non-finite values")
        keys = self.key_tuples()
        if len(set(keys)) != n:
            raise EvalError(f"forecast set '{self.label}' has duplicate (sku, origin, h) keys")

    def __len__(self) -> int:
        return len(self.sku)

    def key_tuples(self) -> list[tuple]:
        return list(zip(self.sku.tolist(), self.origin.astype("datetime64[D]").tolist(), self.h.tolist()))

    def horizons(self) -> list[int]:
        return sorted(set(int(v) for v in self.h))

    def filter_h(self, horizon: int) -> "ForecastSet":
        mask = self.h == horizon
        return ForecastSet(
            label=self.label,
            target_mode=self.target_mode,
            sku=self.sku[mask],
            origin=self.origin[mask],
            h=self.h[mask],
            yhat=self.yhat[mask],
            y=self.y[mask],
        )

    @classmethod
    def from_records(cls, label, target_mode, records) -> "ForecastSet":
        """records: iterable of (sku, origin date, h, yhat, y)."""
        rows = list(records)
        return cls(
            label=label,
            target_mode=target_mode,
            sku=np.array([r[0] for r in rows], dtype=object),
            origin=np.array([np.datetime64(r[1], "D") for r in rows]),
            h=np.array([int(r[2]) for r in rows], dtype=np.int64),
            yhat=np.array([float(r[3]) for r in rows]),
            y=np.array([float(r[4]) for r in rows]),
        )

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sku", "origin", "h", "yhat", "y"])
            for i in range(len(self)):
                writer.writerow(
                    [
                        self.sku[i],
                        str(self.origin[i].astype("datetime64[D]")),
                        int(self.h[i]),
                        repr(float(self.yhat[i])),
                        repr(float(self.y[i])),
                    ]
                )

    @classmethod
    def read_csv(cls, path: str | os.PathLike, label: str | None = None,
                 target_mode: str = "demand") -> "ForecastSet":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["sku", "origin", "h", "yhat", "y"]:
                raise EvalError(f"{path}: expected header sku,origin,h,yhat,y, got {header}")
            for row in reader:
                rows.append((row[0], dt.date.fromisoformat(row[1]), int(row[2]), float(row[3]), float(row[4])))
        name = label if label is not None else os.path.splitext(os.path.basename(path))[0]
        return cls.from_records(name, target_mode, rows)


@dataclass
class MetricContext:
    """Training-range series per sku, for MASE scaling and naive references."""

    series: dict[str, np.ndarray]   # full target series per sku, original units
    start_date: dt.date
    train_end_idx: int
    season: int = 7

    def index_of(self, origin: np.datetime64) -> int:
        return (origin.astype("datetime64[D]").astype(dt.date) - self.start_date).days

    def seasonal_scale(self, sku: str) -> float:
        """In-sample MAE of the seasonal-naive forecaster on the training range."""
        y = self.series[sku][: self.train_end_idx + 1]
        if len(y) <= self.season:
            return 0.0
        return float(np.mean(np.abs(y[self.season :] - y[: -self.season])))


def make_metric_context(
    panel: SeriesPanel, spec: SplitSpec, target_mode: str = "demand", season: int = 7
) -> MetricContext:
    target = panel.target_matrix(target_mode)
    return MetricContext(
        series={sku: target[i] for i, sku in enumerate(panel.sku_ids)},
        start_date=panel.start_date,
        train_end_idx=panel.index_of(spec.train_end),
        season=season,
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def metric(kind: str, fs: ForecastSet, ctx: MetricContext | None = None) -> float:
    value, _used, _excluded = metric_detail(kind, fs, ctx)
    return value


def metric_detail(
    kind: str, fs: ForecastSet, ctx: MetricContext | None = None
) -> tuple[float, int, int]:
    """Returns (value, records_used, series_excluded)."""
    if kind not in METRIC_KINDS:
        raise EvalError(f"unknown metric '{kind}'")
    if len(fs) == 0:
        raise EvalError("metric on an empty forecast set")
    err = fs.yhat - fs.y
    if kind == "mae":
        return float(np.mean(np.abs(err))), len(fs), 0
    if kind == "rmse":
        return float(np.sqrt(np.mean(err**2))), len(fs), 0
    if kind == "smape":
        denom = np.abs(fs.y) + np.abs(fs.yhat)
        terms = np.where(denom > 0, np.abs(err) / np.where(denom > 0, denom, 1.0), 0.0)
        return float(200.0 * np.mean(terms)), len(fs), 0
    if ctx is None:
        raise EvalError(f"metric '{kind}' needs a MetricContext")
    if kind == "mase":
        scaled, used, excluded = [], 0, 0
        for sku in sorted(set(fs.sku.tolist())):
            mask = fs.sku == sku
            scale = ctx.seasonal_scale(sku)
            if scale == 0.0:
                excluded += 1
                continue
            scaled.append(np.abs(fs.yhat[mask] - fs.y[mask]) / scale)
            used += int(mask.sum())
        if not scaled:
            raise EvalError("mase: every series has a constant training range")
        return float(np.mean(np.concatenate(scaled))), used, excluded
    # theil_u2: per-series ratio against the last-value naive, record-count weighted
    total, weight, excluded = 0.0, 0, 0
    for sku in sorted(set(fs.sku.tolist())):
        mask = fs.sku == sku
        series = ctx.series[sku]
        t_idx = np.array([ctx.index_of(o) for o in fs.origin[mask]]) + fs.h[mask]
        prev = series[t_idx - 1]
        num = float(np.sum((fs.yhat[mask] - fs.y[mask]) ** 2))
        den = float(np.sum((prev - fs.y[mask]) ** 2))
        if den == 0.0:
            excluded += 1
            continue
        total += math.sqrt(num / den) * int(mask.sum())
        weight += int(mask.sum())
    if weight == 0:
        raise EvalError("theil_u2: naive reference error is zero for every series")
    return total / weight, weight, excluded


# ---------------------------------------------------------------------------
# Diebold-Mariano
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DmResult:
    stat: float
    p: float
    lag: int
    n: int
    loss: str
    horizon: int


def dm_test(fs_a: ForecastSet, fs_b: ForecastSet, loss: str, horizon: int) -> DmResult:
    """DM statistic for equal forecast accuracy at one horizon.

    The loss differential series is ordered by (origin, sku); the long-run
    variance uses Newey-West with h-1 lags and Bartlett weights. Identical
    forecasts give (0, p=1) by convention.
    """
    if loss not in ("squared", "absolute"):
        raise EvalError(f"unknown DM loss kind '{loss}'")
    a = fs_a.filter_h(horizon)
    b = fs_b.filter_h(horizon)
    keys_a = a.key_tuples()
    keys_b = b.key_tuples()
    if set(keys_a) != set(keys_b):
        missing = sorted(set(keys_a) ^ set(keys_b))[0]
        raise KeyMismatch(
            f"forecast sets '{fs_a.label}' and '{fs_b.label}' disagree at h={horizon}; "
            f"first unmatched key {missing}"
        )
    order_a = np.lexsort((a.sku.astype(str), a.origin))
    order_b = np.lexsort((b.sku.astype(str), b.origin))
    e_a = (a.yhat - a.y)[order_a]
    e_b = (b.yhat - b.y)[order_b]
    if loss == "squared":
        d = e_a**2 - e_b**2
    else:
        d = np.abs(e_a) - np.abs(e_b)
    n = len(d)
    if n == 0:
        raise EvalError(f"no records at horizon {horizon}")
    if np.all(d == 0.0):
        return DmResult(stat=0.0, p=1.0, lag=horizon - 1, n=n, loss=loss, horizon=horizon)
    d_bar = float(np.mean(d))
    centered = d - d_bar
    lag = horizon - 1
    variance = float(np.mean(centered**2))
    for k in range(1, min(lag, n - 1) + 1):
        gamma = float(np.sum(centered[k:] * centered[:-k])) / n
        variance += 2.0 * (1.0 - k / (lag + 1.0)) * gamma
    if variance <= 0.0:
        stat = math.copysign(math.inf, d_bar)
        return DmResult(stat=stat, p=0.0, lag=lag, n=n, loss=loss, horizon=horizon)
    stat = d_bar / math.sqrt(variance / n)
    p = math.erfc(abs(stat) / math.sqrt(2.0))
    return DmResult(stat=stat, p=p, lag=lag, n=n, loss=loss, horizon=horizon)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def tse_trajectory(fs: ForecastSet, horizon: int) -> tuple[list[np.datetime64], list[float]]:
    """Mean absolute error across SKUs per origin date, chronological."""
    if len(fs) == 0:
        raise EvalError("tse_trajectory on an empty forecast set")
    part = fs.filter_h(horizon) if horizon is not None else fs
    dates = np.unique(part.origin)
    values = [float(np.mean(np.abs(part.yhat[part.origin == d] - part.y[part.origin == d]))) for d in dates]
    return list(dates.astype("datetime64[D]")), values


def cpoi(fs: ForecastSet, price: float, cost: float) -> tuple[list[np.datetime64], list[float]]:
    """Cumulative newsvendor profit per origin date with order q = max(0, round(yhat))."""
    if not (price > cost > 0):
        raise EvalError(f"cpoi needs price > cost > 0, got price={price} cost={cost}")
    q = np.maximum(0.0, np.rint(fs.yhat))
    profit = price * np.minimum(q, fs.y) - cost * q
    dates = np.unique(fs.origin)
    per_date = [float(profit[fs.origin == d].sum()) for d in dates]
    return list(dates.astype("datetime64[D]")), list(np.cumsum(per_date))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    models: list[dict]                 # [{label, metrics: {h1: {...}, pooled: {...}}}]
    dm: list[dict]                     # [{a, b, h, loss, stat, p}]
    tse: dict[str, dict[str, tuple]]   # label -> f"h{h}" -> (dates, values)
    cpoi_curves: dict[str, tuple]      # label -> (dates, values)
    cpoi_params: dict[str, float]
    dataset_hash: str
    config_echo: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)


def build_report(
    forecast_sets: list[ForecastSet],
    ctx: MetricContext,
    dataset_hash: str,
    config_echo: dict | None = None,
    dm_loss: str = "squared",
    cpoi_price: float = 1.0,
    cpoi_cost: float = 0.5,
    metrics: tuple[str, ...] = METRIC_KINDS,
) -> EvalReport:
    if not forecast_sets:
        raise EvalError("build_report needs at least one forecast set")
    models = []
    tse_all: dict[str, dict[str, tuple]] = {}
    cpoi_all: dict[str, tuple] = {}
    for fs in forecast_sets:
        table: dict[str, dict[str, float]] = {}
        for h in fs.horizons():
            part = fs.filter_h(h)
            table[f"h{h}"] = {kind: metric(kind, part, ctx) for kind in metrics}
        table["pooled"] = {kind: metric(kind, fs, ctx) for kind in metrics}
        models.append({"label": fs.label, "metrics": table})
        tse_all[fs.label] = {f"h{h}": tse_trajectory(fs, h) for h in fs.horizons()}
        cpoi_all[fs.label] = cpoi(fs, cpoi_price, cpoi_cost)

    dm_rows = []
    for i in range(len(forecast_sets)):
        for j in range(i + 1, len(forecast_sets)):
            common = sorted(
                set(forecast_sets[i].horizons()) & set(forecast_sets[j].horizons())
            )
            for h in common:
                res = dm_test(forecast_sets[i], forecast_sets[j], dm_loss, h)
                dm_rows.append(
                    {
                        "a": forecast_sets[i].label,
                        "b": forecast_sets[j].label,
                        "h": h,
                        "loss": res.loss,
                        "stat": res.stat,
                        "p": res.p,
                    }
                )
    return EvalReport(
        models=models,
        dm=dm_rows,
        tse=tse_all,
        cpoi_curves=cpoi_all,
        cpoi_params={"p": cpoi_price, "c": cpoi_cost},
        dataset_hash=dataset_hash,
        config_echo=config_echo or {},
        notes={
            "smape": "200-scaled symmetric, 0/0 terms read as 0",
            "mase": f"seasonal-naive scale, season {ctx.season}, training range only",
            "tse": "mean absolute error across SKUs per origin date",
            "cpoi": "cumulative newsvendor profit, order = max(0, round(yhat))",
        },
    )


def report_emit(report: EvalReport, out_dir: str | os.PathLike) -> None:
    """Write report.json plus plot-ready metrics.csv, tse.csv, cpoi.csv.

    Emission is deterministic: identical reports produce identical bytes.
    """
    if not report.models:
        raise EvalError("report_emit needs at least one model report")
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "models": report.models,
        "dm": report.dm,
        "cpoi_params": report.cpoi_params,
        "dataset_hash": report.dataset_hash,
        "config_echo": report.config_echo,
        "notes": report.notes,
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        kinds = sorted({k for m in report.models for v in m["metrics"].values() for k in v})
        writer.writerow(["model", "horizon"] + kinds)
        for m in report.models:
            for hkey in sorted(m["metrics"]):
                writer.writerow(
                    [m["label"], hkey] + [repr(m["metrics"][hkey][k]) for k in kinds]
                )

    with open(os.path.join(out_dir, "tse.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "horizon", "origin", "tse"])
        for label in sorted(report.tse):
            for hkey in sorted(report.tse[label]):
                dates, values = report.tse[label][hkey]
                for d, v in zip(dates, values):
                    writer.writerow([label, hkey, str(np.datetime64(d, "D")), repr(v)])

    with open(os.path.join(out_dir, "cpoi.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "origin", "cumulative_profit"])
        for label in sorted(report.cpoi_curves):
            dates, values = report.cpoi_curves[label]
            for d, v in zip(dates, values):
                writer.writerow([label, str(np.datetime64(d, "D")), repr(v)])
