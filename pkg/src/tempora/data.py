"""Transaction ingest, daily SKU panels, features, and leakage-free window splits.

The pipeline is: ingest_csv -> clean -> aggregate_daily -> SeriesPanel, then
make_splits turns a panel plus split dates into train/val/test WindowSamples
whose features only ever derive from dates at or before each window's origin.
Synthetic panels (synth_generate) provide seeded desk-scale test data.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataError",
    "TransactionRecord",
    "SeriesPanel",
    "SynthParams",
    "FeatureScaling",
    "SplitSpec",
    "WindowSample",
    "SplitWindows",
    "REQUIRED_COLUMNS",
    "FEATURE_NAMES",
    "N_FEATURES",
    "TARGET_COL",
    "ingest_csv",
    "clean",
    "aggregate_daily",
    "synth_generate",
    "save_panel",
    "load_panel",
    "build_raw_features",
    "fit_scaling",
    "make_splits",
    "make_inference_window",
]


class DataError(ValueError):
    """Input data violated the dataset module's contracts."""


# Online Retail II published header, exact order.
REQUIRED_COLUMNS = (
    "Invoice",
    "StockCode",
    "Description",
    "Quantity",
    "InvoiceDate",
    "Price",
    "Customer ID",
    "Country",
)

_DATE_FORMATS = ("%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M")


@dataclass(frozen=True)
class TransactionRecord:
    invoice_id: str
    stock_code: str
    description: str | None
    quantity: int
    invoice_datetime: dt.datetime
    unit_price: float
    customer_id: str | None
    country: str


def ingest_csv(path: str | os.PathLike) -> tuple[list[TransactionRecord], int]:
    """Parse a transactions CSV into records.

    Returns (records, skipped) where skipped counts rows whose quantity,
    price, or date failed to parse. A missing or renamed required column is
    rejected outright, naming the column.
    """
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty, expected a header row") from None
        header = [h.strip() for h in header]
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise DataError(f"{path}: required column '{col}' missing from header")
        if tuple(header) != REQUIRED_COLUMNS:
            raise DataError(
                f"{path}: header {header} does not match the published schema "
                f"{list(REQUIRED_COLUMNS)}"
            )
        records: list[TransactionRecord] = []
        skipped = 0
        for row in reader:
            if len(row) != len(REQUIRED_COLUMNS):
                skipped += 1
                continue
            invoice, stock, desc, qty_s, date_s, price_s, cust, country = row
            try:
                quantity = int(qty_s)
                price = float(price_s)
                stamp = _parse_datetime(date_s)
            except ValueError:
                skipped += 1
                continue
            records.append(
                TransactionRecord(
                    invoice_id=invoice.strip(),
                    stock_code=stock.strip(),
                    description=desc.strip() or None,
                    quantity=quantity,
                    invoice_datetime=stamp,
                    unit_price=price,
                    customer_id=cust.strip() or None,
                    country=country.strip(),
                )
            )
    return records, skipped


def _parse_datetime(s: str) -> dt.datetime:
    s = s.strip()
    for fmt in _DATE_FORMATS:
        try:
            return dt.datetime.strptime(s, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparseable datetime {s!r}")


def clean(records: list[TransactionRecord]) -> list[TransactionRecord]:
    """Drop exact duplicates, nonpositive quantity/price, and cancellations.

    Cancellation invoices carry a leading "C" in this dataset's convention.
    Rows with a missing customer id are kept: SKU-level demand does not need
    the customer. Idempotent by construction.
    """
    seen: set[tuple] = set()
    out: list[TransactionRecord] = []
    for r in records:
        key = dataclasses.astuple(r)
        if key in seen:
            continue
        seen.add(key)
        if r.quantity <= 0 or r.unit_price <= 0 or r.invoice_id.startswith("C"):
            continue
        out.append(r)
    return out


# ---------------------------------------------------------------------------
# panel
# ---------------------------------------------------------------------------


@dataclass
class SeriesPanel:
    """Per-SKU daily demand/revenue matrices on a gapless calendar.

    demand[i][d] and revenue[i][d] are explicit zeros on days without
    transactions. mean_price is the quantity-weighted daily unit price,
    forward-filled across quiet days and back-filled at the series head.
    """

    sku_ids: list[str]
    start_date: dt.date
    demand: np.ndarray
    revenue: np.ndarray
    mean_price: np.ndarray
    country_code: np.ndarray
    countries: list[str]
    meta: dict = field(default_factory=dict)
    feature_scaling: "FeatureScaling | None" = None

    @property
    def n_skus(self) -> int:
        return len(self.sku_ids)

    @property
    def n_days(self) -> int:
        return self.demand.shape[1]

    def date_of(self, index: int) -> dt.date:
        return self.start_date + dt.timedelta(days=int(index))

    def index_of(self, date: dt.date) -> int:
        idx = (date - self.start_date).days
        if idx < 0 or idx >= self.n_days:
            raise DataError(f"date {date} outside panel calendar")
        return idx

    def dates(self) -> list[dt.date]:
        return [self.date_of(i) for i in range(self.n_days)]

    def target_matrix(self, target_mode: str) -> np.ndarray:
        if target_mode == "demand":
            return self.demand
        if target_mode == "revenue":
            return self.revenue
        raise DataError(f"unknown target mode '{target_mode}'")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.start_date.isoformat().encode())
        h.update("\x00".join(self.sku_ids).encode())
        h.update(self.demand.tobytes())
        h.update(self.revenue.tobytes())
        h.update(self.country_code.astype(np.int64).tobytes())
        return h.hexdigest()


def _ffill_bfill_price(price: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Carry the last observed price forward; fill the head backward."""
    out = price.copy()
    n_skus, n_days = out.shape
    for i in range(n_skus):
        last = np.nan
        for d in range(n_days):
            if observed[i, d]:
                last = out[i, d]
            else:
                out[i, d] = last
        row = out[i]
        valid = np.where(~np.isnan(row))[0]
        if valid.size:
            row[: valid[0]] = row[valid[0]]
        else:
            row[:] = 0.0
    return out


def aggregate_daily(records: list[TransactionRecord], min_active_days: int = 30) -> SeriesPanel:
    """Sum cleaned transactions into per-SKU daily demand and revenue.

    SKUs with fewer than min_active_days nonzero-demand days are excluded;
    the count of exclusions lands in panel.meta. A SKU's country code is its
    dominant country by total quantity (ties broken by name).
    """
    if not records:
        raise DataError("aggregate_daily on zero records")
    dates = [r.invoice_datetime.date() for r in records]
    start, end = min(dates), max(dates)
    n_days = (end - start).days + 1

    all_skus = sorted({r.stock_code for r in records})
    sku_index = {s: i for i, s in enumerate(all_skus)}
    demand = np.zeros((len(all_skus), n_days))
    revenue = np.zeros((len(all_skus), n_days))
    country_qty: dict[str, dict[str, int]] = {s: {} for s in all_skus}
    for r, day in zip(records, dates):
        i = sku_index[r.stock_code]
        d = (day - start).days
        demand[i, d] += r.quantity
        revenue[i, d] += r.quantity * r.unit_price
        bucket = country_qty[r.stock_code]
        bucket[r.country] = bucket.get(r.country, 0) + r.quantity

    active = (demand > 0).sum(axis=1)
    keep = active >= min_active_days
    excluded = int((~keep).sum())
    if not keep.any():
        raise DataError(
            f"no SKU has {min_active_days}+ active days ({len(all_skus)} candidates)"
        )
    kept_skus = [s for s, k in zip(all_skus, keep) if k]
    demand = demand[keep]
    revenue = revenue[keep]

    observed = demand > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        raw_price = np.where(observed, revenue / np.where(observed, demand, 1.0), np.nan)
    mean_price = _ffill_bfill_price(raw_price, observed)

    countries = sorted({r.country for r in records})
    country_to_code = {c: i for i, c in enumerate(countries)}
    codes = np.empty(len(kept_skus), dtype=np.int64)
    for i, s in enumerate(kept_skus):
        dominant = sorted(country_qty[s].items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        codes[i] = country_to_code[dominant]

    return SeriesPanel(
        sku_ids=kept_skus,
        start_date=start,
        demand=demand,
        revenue=revenue,
        mean_price=mean_price,
        country_code=codes,
        countries=countries,
        meta={
            "source": "transactions",
            "records_aggregated": len(records),
            "skus_excluded": excluded,
            "min_active_days": min_active_days,
        },
    )


# ---------------------------------------------------------------------------
# synthetic panels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    base_range: tuple[float, float] = (8.0, 40.0)
    trend_range: tuple[float, float] = (-0.03, 0.06)
    weekly_amp_range: tuple[float, float] = (1.0, 6.0)
    noise_sd: float = 2.0
    holiday_amp: float = 0.0
    price_range: tuple[float, float] = (1.0, 20.0)
    start_date: dt.date = dt.date(2010, 1, 4)


# fixed weekly shape, scaled per SKU by its amplitude draw
_WEEKLY = np.array([-1.2, -0.8, -0.4, 0.0, 0.4, 0.9, 1.1])


def synth_generate(
    seed: int, n_skus: int, n_days: int, params: SynthParams | None = None
) -> SeriesPanel:
    """Seeded seasonal panel: base + trend + weekly pattern + December spike + noise.

    Fully determined by (seed, n_skus, n_days, params); the generating draws
    are recorded in panel.meta.
    """
    params = params or SynthParams()
    if n_days < 21:
        raise DataError("synth_generate needs n_days >= 21")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    base = rng.uniform(*params.base_range, size=n_skus)
    trend = rng.uniform(*params.trend_range, size=n_skus)
    amp = rng.uniform(*params.weekly_amp_range, size=n_skus)
    price = rng.uniform(*params.price_range, size=n_skus)
    codes = rng.integers(0, 4, size=n_skus)
    noise = rng.normal(scale=params.noise_sd, size=(n_skus, n_days)) if params.noise_sd > 0 else 0.0

    days = np.arange(n_days)
    dates = [params.start_date + dt.timedelta(days=int(d)) for d in days]
    december = np.array([d.month == 12 for d in dates], dtype=float)
    level = (
        base[:, None]
        + trend[:, None] * days[None, :]
        + amp[:, None] * _WEEKLY[days % 7][None, :]
        + params.holiday_amp * december[None, :]
        + noise
    )
    demand = np.maximum(0.0, np.round(level))
    revenue = demand * price[:, None]
    mean_price = np.tile(price[:, None], (1, n_days))

    return SeriesPanel(
        sku_ids=[f"SYN{i:04d}" for i in range(n_skus)],
        start_date=params.start_date,
        demand=demand,
        revenue=revenue,
        mean_price=mean_price,
        country_code=codes.astype(np.int64),
        countries=["SYNA", "SYNB", "SYNC", "SYND"],
        meta={
            "source": "synth",
            "seed": int(seed),
            "n_skus": n_skus,
            "n_days": n_days,
            "params": {
                "base_range": list(params.base_range),
                "trend_range": list(params.trend_range),
                "weekly_amp_range": list(params.weekly_amp_range),
                "noise_sd": params.noise_sd,
                "holiday_amp": params.holiday_amp,
                "price_range": list(params.price_range),
                "start_date": params.start_date.isoformat(),
            },
        },
    )


# ---------------------------------------------------------------------------
# panel persistence
# ---------------------------------------------------------------------------

_PANEL_VERSION = 1


def save_panel(panel: SeriesPanel, out_dir: str | os.PathLike) -> None:
    """Write panel.json + demand.csv + revenue.csv (sku rows, ISO date columns)."""
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "format_version": _PANEL_VERSION,
        "start_date": panel.start_date.isoformat(),
        "n_days": panel.n_days,
        "sku_ids": panel.sku_ids,
        "country_code": [int(c) for c in panel.country_code],
        "countries": panel.countries,
        "meta": panel.meta,
        "scaling": panel.feature_scaling.to_dict() if panel.feature_scaling else None,
        "content_hash": panel.content_hash(),
    }
    with open(os.path.join(out_dir, "panel.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, matrix in (("demand.csv", panel.demand), ("revenue.csv", panel.revenue)):
        _write_matrix_csv(os.path.join(out_dir, name), panel, matrix)


def _write_matrix_csv(path: str, panel: SeriesPanel, matrix: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sku"] + [d.isoformat() for d in panel.dates()])
        for sku, row in zip(panel.sku_ids, matrix):
            writer.writerow([sku] + [repr(float(v)) for v in row])


def load_panel(panel_dir: str | os.PathLike) -> SeriesPanel:
    """Read a persisted panel; mean_price is re-derived from revenue/demand."""
    meta_path = os.path.join(panel_dir, "panel.json")
    if not os.path.exists(meta_path):
        raise DataError(f"{panel_dir}: panel.json not found")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != _PANEL_VERSION:
        raise DataError(f"{panel_dir}: unsupported panel format {meta.get('format_version')}")
    sku_ids = meta["sku_ids"]
    n_days = meta["n_days"]
    demand = _read_matrix_csv(os.path.join(panel_dir, "demand.csv"), sku_ids, n_days)
    revenue = _read_matrix_csv(os.path.join(panel_dir, "revenue.csv"), sku_ids, n_days)
    observed = demand > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        raw_price = np.where(observed, revenue / np.where(observed, demand, 1.0), np.nan)
    scaling = meta.get("scaling")
    return SeriesPanel(
        sku_ids=sku_ids,
        start_date=dt.date.fromisoformat(meta["start_date"]),
        demand=demand,
        revenue=revenue,
        mean_price=_ffill_bfill_price(raw_price, observed),
        country_code=np.array(meta["country_code"], dtype=np.int64),
        countries=meta["countries"],
        meta=meta.get("meta", {}),
        feature_scaling=FeatureScaling.from_dict(scaling) if scaling else None,
    )


def _read_matrix_csv(path: str, sku_ids: list[str], n_days: int) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != n_days + 1:
            raise DataError(f"{path}: expected {n_days} date columns, found {len(header) - 1}")
        out = np.empty((len(sku_ids), n_days))
        for i, row in enumerate(reader):
            if i >= len(sku_ids) or row[0] != sku_ids[i]:
                raise DataError(f"{path}: sku order disagrees with panel.json at row {i + 1}")
            out[i] = [float(v) for v in row[1:]]
    return out


# ---------------------------------------------------------------------------
# features and scaling
# ---------------------------------------------------------------------------

FEATURE_NAMES = (
    ["target_log1p", "price_log1p"]
    + [f"dow_{i}" for i in range(7)]
    + [f"month_{m}" for m in range(1, 13)]
    + ["is_december", "country"]
)
N_FEATURES = len(FEATURE_NAMES)
TARGET_COL = 0
PRICE_COL = 1
COUNTRY_COL = N_FEATURES - 1
_NUMERIC_COLS = (TARGET_COL, PRICE_COL, COUNTRY_COL)


@dataclass
class FeatureScaling:
    """Per-feature mean/std, fit on the training date range only.

    Calendar dummies keep identity scaling; the target and price columns are
    log1p then z-scored. The target column's stats double as the transform
    that maps model-space predictions back to units.
    """

    mean: np.ndarray
    std: np.ndarray

    def transform(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.mean) / self.std

    @property
    def target_mean(self) -> float:
        return float(self.mean[TARGET_COL])

    @property
    def target_std(self) -> float:
        return float(self.std[TARGET_COL])

    @property
    def scaled_zero(self) -> float:
        """Feature value representing zero units."""
        return (0.0 - self.target_mean) / self.target_std

    def units_to_feature(self, units: np.ndarray | float) -> np.ndarray | float:
        return (np.log1p(units) - self.target_mean) / self.target_std

    def feature_to_units(self, scaled: np.ndarray | float) -> np.ndarray | float:
        """Invert to original units; demand cannot be negative."""
        return np.maximum(0.0, np.expm1(self.target_mean + self.target_std * scaled))

    def to_dict(self) -> dict:
        return {
            "feature_names": FEATURE_NAMES,
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureScaling":
        return cls(mean=np.array(d["mean"]), std=np.array(d["std"]))


def build_raw_features(panel: SeriesPanel, target_mode: str = "demand") -> np.ndarray:
    """Unscaled feature tensor (sku, day, feature)."""
    target = panel.target_matrix(target_mode)
    S, D = target.shape
    raw = np.zeros((S, D, N_FEATURES))
    raw[:, :, TARGET_COL] = np.log1p(target)
    raw[:, :, PRICE_COL] = np.log1p(np.maximum(panel.mean_price, 0.0))
    dates = panel.dates()
    for d, date in enumerate(dates):
        raw[:, d, 2 + date.weekday()] = 1.0
        raw[:, d, 9 + date.month - 1] = 1.0
        if date.month == 12:
            raw[:, d, 21] = 1.0
    raw[:, :, COUNTRY_COL] = panel.country_code[:, None].astype(float)
    return raw


def fit_scaling(raw: np.ndarray, train_end_idx: int) -> FeatureScaling:
    """Mean/std for the numeric columns over dates <= train_end; dummies pass through."""
    mean = np.zeros(N_FEATURES)
    std = np.ones(N_FEATURES)
    window = raw[:, : train_end_idx + 1, :]
    for col in _NUMERIC_COLS:
        vals = window[:, :, col]
        mean[col] = vals.mean()
        s = vals.std()
        std[col] = s if s > 1e-12 else 1.0
    return FeatureScaling(mean=mean, std=std)


# ---------------------------------------------------------------------------
# splits and windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_end: dt.date
    val_end: dt.date
    test_end: dt.date

    def __post_init__(self):
        if not (self.train_end < self.val_end < self.test_end):
            raise DataError(
                f"split dates must be ordered: {self.train_end} < {self.val_end} < {self.test_end}"
            )

    @classmethod
    def from_fractions(cls, panel: SeriesPanel, train_frac: float, val_frac: float) -> "SplitSpec":
        n = panel.n_days
        n_train = int(n * train_frac)
        n_val = int(n * val_frac)
        if n_train < 1 or n_val < 1 or n_train + n_val >= n:
            raise DataError(f"fractions {train_frac}/{val_frac} leave an empty split on {n} days")
        return cls(
            train_end=panel.date_of(n_train - 1),
            val_end=panel.date_of(n_train + n_val - 1),
            test_end=panel.date_of(n - 1),
        )

    def to_dict(self) -> dict:
        return {
            "train_end": self.train_end.isoformat(),
            "val_end": self.val_end.isoformat(),
            "test_end": self.test_end.isoformat(),
        }


@dataclass(frozen=True)
class WindowSample:
    """One rolling-origin training/evaluation example.

    features is (lookback, n_features) in scaled space, rows ending at the
    origin date. future_features carries the deterministic calendar rows for
    the next max(horizons) days (price carried forward, target column set to
    the scaled zero placeholder) for recursive decoding. targets are raw
    units at origin + h; None for pure-inference windows.
    """

    sku_id: str
    origin: int
    lookback: int
    features: np.ndarray
    future_features: np.ndarray
    targets: np.ndarray | None
    horizons: tuple[int, ...]


@dataclass
class SplitWindows:
    train: list[WindowSample]
    val: list[WindowSample]
    test: list[WindowSample]
    spec: SplitSpec
    scaling: FeatureScaling
    lookback: int
    horizons: tuple[int, ...]
    target_mode: str


def _future_rows(
    panel: SeriesPanel,
    scaling: FeatureScaling,
    scaled: np.ndarray,
    sku_idx: int,
    origin: int,
    max_h: int,
) -> np.ndarray:
    rows = np.zeros((max_h, N_FEATURES))
    rows[:, TARGET_COL] = scaling.scaled_zero
    rows[:, PRICE_COL] = scaled[sku_idx, origin, PRICE_COL]
    rows[:, COUNTRY_COL] = scaled[sku_idx, origin, COUNTRY_COL]
    for step in range(1, max_h + 1):
        date = panel.date_of(origin + step) if origin + step < panel.n_days else (
            panel.date_of(panel.n_days - 1) + dt.timedelta(days=origin + step - panel.n_days + 1)
        )
        rows[step - 1, 2 + date.weekday()] = 1.0
        rows[step - 1, 9 + date.month - 1] = 1.0
        if date.month == 12:
            rows[step - 1, 21] = 1.0
    return rows


def make_splits(
    panel: SeriesPanel,
    spec: SplitSpec,
    lookback: int,
    horizons: tuple[int, ...] | list[int],
    target_mode: str = "demand",
) -> SplitWindows:
    """Enumerate rolling-origin windows and partition them by split.

    A window with origin t belongs to train iff t + max(H) <= train_end, to
    val iff train_end < t + max(H) <= val_end, and to test likewise, so no
    target crosses its split boundary. Feature scaling is fit on dates
    <= train_end only. Any empty split is rejected with the counts.
    """
    horizons = tuple(sorted(set(int(h) for h in horizons)))
    if not horizons or horizons[0] < 1:
        raise DataError(f"horizons must be positive integers, got {horizons}")
    if lookback < 1:
        raise DataError("lookback must be >= 1")
    train_end = panel.index_of(spec.train_end)
    val_end = panel.index_of(spec.val_end)
    test_end = panel.index_of(spec.test_end)
    max_h = horizons[-1]

    raw = build_raw_features(panel, target_mode)
    scaling = fit_scaling(raw, train_end)
    scaled = scaling.transform(raw)
    target = panel.target_matrix(target_mode)

    train: list[WindowSample] = []
    val: list[WindowSample] = []
    test: list[WindowSample] = []
    for i in range(panel.n_skus):
        for t in range(lookback - 1, test_end - max_h + 1):
            reach = t + max_h
            if reach <= train_end:
                bucket = train
            elif reach <= val_end:
                bucket = val
            else:
                bucket = test
            bucket.append(
                WindowSample(
                    sku_id=panel.sku_ids[i],
                    origin=t,
                    lookback=lookback,
                    features=scaled[i, t - lookback + 1 : t + 1, :].copy(),
                    future_features=_future_rows(panel, scaling, scaled, i, t, max_h),
                    targets=target[i, [t + h for h in horizons]].copy(),
                    horizons=horizons,
                )
            )
    if not (train and val and test):
        raise DataError(
            f"empty split: train={len(train)} val={len(val)} test={len(test)} "
            f"(lookback {lookback}, horizons {horizons}, {panel.n_days} days)"
        )
    return SplitWindows(
        train=train,
        val=val,
        test=test,
        spec=spec,
        scaling=scaling,
        lookback=lookback,
        horizons=horizons,
        target_mode=target_mode,
    )


def make_inference_window(
    panel: SeriesPanel,
    scaling: FeatureScaling,
    sku_id: str,
    origin_date: dt.date,
    lookback: int,
    horizons: tuple[int, ...],
    target_mode: str = "demand",
) -> WindowSample:
    """Build a single window at an arbitrary origin, without targets."""
    horizons = tuple(sorted(set(int(h) for h in horizons)))
    try:
        sku_idx = panel.sku_ids.index(sku_id)
    except ValueError:
        raise DataError(f"sku '{sku_id}' not in panel") from None
    t = panel.index_of(origin_date)
    if t < lookback - 1:
        raise DataError(f"origin {origin_date} leaves fewer than {lookback} lookback days")
    raw = build_raw_features(panel, target_mode)
    scaled = scaling.transform(raw)
    return WindowSample(
        sku_id=sku_id,
        origin=t,
        lookback=lookback,
        features=scaled[sku_idx, t - lookback + 1 : t + 1, :].copy(),
        future_features=_future_rows(panel, scaling, scaled, sku_idx, t, horizons[-1]),
        targets=None,
        horizons=horizons,
    )
