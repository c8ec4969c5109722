import datetime as dt
import json
import math

import numpy as np
import pytest

from tempora.data import SplitSpec, synth_generate
from tempora.evaluation import (
    DmResult,
    EvalError,
    ForecastSet,
    KeyMismatch,
    build_report,
    cpoi,
    dm_test,
    make_metric_context,
    metric,
    metric_detail,
    report_emit,
    tse_trajectory,
)

START = dt.date(2010, 1, 4)


def _fs(label, rows, target_mode="demand"):
    return ForecastSet.from_records(label, target_mode, rows)


def _panel_and_ctx(seed=0, n_skus=4, n_days=120):
    panel = synth_generate(seed, n_skus, n_days)
    spec = SplitSpec(
        train_end=panel.date_of(int(n_days * 0.7) - 1),
        val_end=panel.date_of(int(n_days * 0.85) - 1),
        test_end=panel.date_of(n_days - 1),
    )
    return panel, spec, make_metric_context(panel, spec)


def _random_forecast_set(panel, spec, rng, label="m"):
    train_end = panel.index_of(spec.train_end)
    test_end = panel.index_of(spec.test_end)
    rows = []
    for i, sku in enumerate(panel.sku_ids):
        for t in range(train_end + 1, test_end - 14, 3):
            for h in (1, 7, 14):
                y = panel.demand[i, t + h]
                rows.append((sku, panel.date_of(t), h, max(0.0, y + rng.normal(scale=3.0)), y))
    return _fs(label, rows)


# ---------------------------------------------------------------------------
# metric values
# ---------------------------------------------------------------------------


def test_perfect_forecast_zero_errors():
    fs = _fs("m", [("A", START, 1, 5.0, 5.0), ("A", START, 7, 2.0, 2.0)])
    assert metric("mae", fs) == 0.0
    assert metric("rmse", fs) == 0.0
    assert metric("smape", fs) == 0.0


def test_smape_single_record_value():
    fs = _fs("m", [("A", START, 1, 110.0, 100.0)])
    assert metric("smape", fs) == pytest.approx(200.0 * 10.0 / 210.0, abs=1e-12)


def test_smape_zero_zero_convention_and_bounds():
    fs = _fs("m", [("A", START, 1, 0.0, 0.0), ("A", START, 7, 3.0, 0.0)])
    v = metric("smape", fs)
    assert v == pytest.approx(100.0, abs=1e-12)  # one 0/0 term, one 200 term
    rng = np.random.default_rng(0)
    rows = [("A", START + dt.timedelta(d), 1, abs(rng.normal()), abs(rng.normal())) for d in range(50)]
    assert 0.0 <= metric("smape", _fs("m", rows)) <= 200.0


def test_mase_definition_forced_to_one():
    # a forecast whose MAE equals the in-sample seasonal-naive MAE has MASE 1
    panel, spec, ctx = _panel_and_ctx()
    sku = panel.sku_ids[0]
    train_end = panel.index_of(spec.train_end)
    rows = [
        (sku, panel.date_of(d - 1), 1, panel.demand[0, d - 7], panel.demand[0, d])
        for d in range(7, train_end + 1)
    ]
    fs = _fs("insample_snaive", rows)
    assert metric("mase", fs, ctx) == pytest.approx(1.0, abs=1e-12)


def test_mase_constant_series_excluded():
    panel, spec, ctx = _panel_and_ctx()
    ctx.series["FLAT"] = np.full(panel.n_days, 3.0)
    rows = [
        ("FLAT", panel.date_of(100), 1, 4.0, 3.0),
        (panel.sku_ids[0], panel.date_of(100), 1, 5.0, panel.demand[0, 101]),
    ]
    value, used, excluded = metric_detail("mase", _fs("m", rows), ctx)
    assert excluded == 1 and used == 1
    with pytest.raises(EvalError, match="constant training range"):
        metric("mase", _fs("m", [("FLAT", panel.date_of(100), 1, 4.0, 3.0)]), ctx)


def test_theil_u2_naive_reference_is_one():
    panel, spec, ctx = _panel_and_ctx()
    sku = panel.sku_ids[1]
    rows = []
    for t in range(90, 110):
        for h in (1, 7):
            rows.append((sku, panel.date_of(t), h, panel.demand[1, t + h - 1], panel.demand[1, t + h]))
    assert metric("theil_u2", _fs("m", rows), ctx) == pytest.approx(1.0, abs=1e-12)


def test_metric_oracle_equivalence_100_sets():
    # independent direct-definition loops vs the implementation, 100 seeded sets
    panel, spec, ctx = _panel_and_ctx(seed=3)
    rng = np.random.default_rng(42)
    for trial in range(100):
        fs = _random_forecast_set(panel, spec, rng, label=f"m{trial}")
        # oracles
        abs_err = [abs(p - a) for p, a in zip(fs.yhat, fs.y)]
        mae_o = sum(abs_err) / len(abs_err)
        rmse_o = math.sqrt(sum((p - a) ** 2 for p, a in zip(fs.yhat, fs.y)) / len(fs))
        smape_terms = [
            0.0 if (abs(p) + abs(a)) == 0 else abs(p - a) / (abs(p) + abs(a))
            for p, a in zip(fs.yhat, fs.y)
        ]
        smape_o = 200.0 * sum(smape_terms) / len(smape_terms)
        scaled = []
        for sku, p, a in zip(fs.sku, fs.yhat, fs.y):
            series = ctx.series[sku][: ctx.train_end_idx + 1]
            scale = np.mean(np.abs(series[7:] - series[:-7]))
            scaled.append(abs(p - a) / scale)
        mase_o = sum(scaled) / len(scaled)
        u2_num, u2_den = 0.0, 0
        for sku in sorted(set(fs.sku.tolist())):
            nums = dens = 0.0
            count = 0
            for s, o, h, p, a in zip(fs.sku, fs.origin, fs.h, fs.yhat, fs.y):
                if s != sku:
                    continue
                t_idx = ctx.index_of(o) + int(h)
                nums += (p - a) ** 2
                dens += (ctx.series[sku][t_idx - 1] - a) ** 2
                count += 1
            u2_num += math.sqrt(nums / dens) * count
            u2_den += count
        u2_o = u2_num / u2_den

        assert abs(metric("mae", fs) - mae_o) < 1e-10
        assert abs(metric("rmse", fs) - rmse_o) < 1e-10
        assert abs(metric("smape", fs) - smape_o) < 1e-10
        assert abs(metric("mase", fs, ctx) - mase_o) < 1e-10
        assert abs(metric("theil_u2", fs, ctx) - u2_o) < 1e-10


def test_duplicate_keys_rejected():
    with pytest.raises(EvalError, match="duplicate"):
        _fs("m", [("A", START, 1, 1.0, 1.0), ("A", START, 1, 2.0, 2.0)])


# ---------------------------------------------------------------------------
# Diebold-Mariano
# ---------------------------------------------------------------------------


def _paired_sets(rng, n=200, h=7, spread=1.0):
    rows_a, rows_b = [], []
    for t in range(n):
        origin = START + dt.timedelta(days=t)
        y = 10.0 + rng.normal()
        rows_a.append(("A", origin, h, y + rng.normal(scale=spread), y))
        rows_b.append(("A", origin, h, y + rng.normal(scale=2.0 * spread), y))
    return _fs("a", rows_a), _fs("b", rows_b)


def test_dm_identical_inputs_degenerate():
    rng = np.random.default_rng(0)
    fs_a, _ = _paired_sets(rng)
    res = dm_test(fs_a, fs_a, "squared", 7)
    assert res.stat == 0.0 and res.p == 1.0


def test_dm_antisymmetry_exact():
    rng = np.random.default_rng(1)
    fs_a, fs_b = _paired_sets(rng)
    r1 = dm_test(fs_a, fs_b, "squared", 7)
    r2 = dm_test(fs_b, fs_a, "squared", 7)
    assert r1.stat == -r2.stat
    assert r1.p == r2.p


def test_dm_dominance_case_matches_brute_force():
    # e_a^2 uniformly below e_b^2 -> negative significant statistic
    rng = np.random.default_rng(2)
    rows_a, rows_b = [], []
    for t in range(200):
        origin = START + dt.timedelta(days=t)
        y = 10.0
        ea = rng.uniform(0.1, 0.5)
        eb = rng.uniform(1.0, 2.0)
        rows_a.append(("A", origin, 7, y + ea, y))
        rows_b.append(("A", origin, 7, y + eb, y))
    fs_a, fs_b = _fs("a", rows_a), _fs("b", rows_b)
    res = dm_test(fs_a, fs_b, "squared", 7)
    assert res.stat < 0 and res.p < 0.05

    # brute-force oracle: explicit loops for the Newey-West variance
    d = [(ra[3] - ra[4]) ** 2 - (rb[3] - rb[4]) ** 2 for ra, rb in zip(rows_a, rows_b)]
    n = len(d)
    dbar = sum(d) / n
    centered = [v - dbar for v in d]
    lag = 6
    var = sum(v * v for v in centered) / n
    for k in range(1, lag + 1):
        gamma = sum(centered[i + k] * centered[i] for i in range(n - k)) / n
        var += 2.0 * (1.0 - k / (lag + 1.0)) * gamma
    stat_o = dbar / math.sqrt(var / n)
    p_o = math.erfc(abs(stat_o) / math.sqrt(2.0))
    assert abs(res.stat - stat_o) < 1e-10
    assert abs(res.p - p_o) < 1e-10


def test_dm_h1_uses_plain_sample_variance():
    rng = np.random.default_rng(3)
    fs_a, fs_b = _paired_sets(rng, h=1)
    res = dm_test(fs_a, fs_b, "absolute", 1)
    assert res.lag == 0
    d = np.abs(fs_a.yhat - fs_a.y) - np.abs(fs_b.yhat - fs_b.y)
    var = float(np.mean((d - d.mean()) ** 2))
    assert res.stat == pytest.approx(float(d.mean()) / math.sqrt(var / len(d)), abs=1e-12)


def test_dm_key_mismatch_reports_first_key():
    fs_a = _fs("a", [("A", START, 1, 1.0, 1.0)])
    fs_b = _fs("b", [("B", START, 1, 1.0, 1.0)])
    with pytest.raises(KeyMismatch, match="first unmatched key"):
        dm_test(fs_a, fs_b, "squared", 1)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def test_tse_perfect_forecast_is_zero():
    rows = [("A", START + dt.timedelta(d), 1, 4.0, 4.0) for d in range(5)]
    _, values = tse_trajectory(_fs("m", rows), 1)
    assert values == [0.0] * 5


def test_tse_single_sku_is_abs_error_sequence():
    rows = [("A", START + dt.timedelta(d), 1, 4.0 + d, 4.0) for d in range(4)]
    _, values = tse_trajectory(_fs("m", rows), 1)
    assert values == [0.0, 1.0, 2.0, 3.0]


def test_tse_two_skus_mean():
    rows = [("A", START, 1, 5.0, 4.0), ("B", START, 1, 1.0, 4.0)]
    _, values = tse_trajectory(_fs("m", rows), 1)
    assert values == [2.0]


def test_cpoi_direct_value():
    dates, values = cpoi(_fs("m", [("A", START, 1, 10.0, 8.0)]), 1.0, 0.5)
    assert values == [3.0]  # 1*min(10,8) - 0.5*10


def test_cpoi_perfect_forecast_is_max_profit():
    y = 9.0
    _, values = cpoi(_fs("m", [("A", START, 1, y, y)]), 1.0, 0.5)
    assert values == [(1.0 - 0.5) * y]


def test_cpoi_zero_order_zero_profit():
    _, values = cpoi(_fs("m", [("A", START, 1, 0.0, 50.0)]), 1.0, 0.5)
    assert values == [0.0]


def test_cpoi_perfect_dominates_everything():
    rng = np.random.default_rng(4)
    rows_true, rows_other = [], []
    for d in range(60):
        origin = START + dt.timedelta(days=d)
        y = float(np.round(rng.uniform(0, 30)))
        rows_true.append(("A", origin, 1, y, y))
        rows_other.append(("A", origin, 1, max(0.0, y + rng.normal(scale=4.0)), y))
    _, perfect = cpoi(_fs("t", rows_true), 1.0, 0.5)
    _, other = cpoi(_fs("o", rows_other), 1.0, 0.5)
    assert all(pv >= ov for pv, ov in zip(perfect, other))


def test_cpoi_rejects_bad_params():
    fs = _fs("m", [("A", START, 1, 1.0, 1.0)])
    with pytest.raises(EvalError, match="price > cost"):
        cpoi(fs, 0.5, 1.0)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def test_report_emit_deterministic_and_recomputable(tmp_path):
    panel, spec, ctx = _panel_and_ctx(seed=9)
    rng = np.random.default_rng(5)
    fs1 = _random_forecast_set(panel, spec, rng, label="hybrid")
    fs2 = _random_forecast_set(panel, spec, rng, label="naive")
    report = build_report([fs1, fs2], ctx, dataset_hash=panel.content_hash())

    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    report_emit(report, out1)
    report_emit(report, out2)
    for name in ("report.json", "metrics.csv", "tse.csv", "cpoi.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    # round-trip: re-read the emitted forecast set and recompute the metrics
    fs1.write_csv(tmp_path / "fs_hybrid.csv")
    back = ForecastSet.read_csv(tmp_path / "fs_hybrid.csv", label="hybrid")
    emitted = json.loads((out1 / "report.json").read_text())
    stored = next(m for m in emitted["models"] if m["label"] == "hybrid")["metrics"]["pooled"]
    for kind in ("mae", "rmse", "smape", "mase", "theil_u2"):
        assert abs(metric(kind, back, ctx) - stored[kind]) < 1e-12


def test_report_requires_models():
    panel, spec, ctx = _panel_and_ctx()
    with pytest.raises(EvalError):
        build_report([], ctx, dataset_hash="x")


def test_forecast_csv_round_trip(tmp_path):
    rows = [("A", START, 1, 1.25, 1.0), ("B", START + dt.timedelta(1), 7, 0.1, 0.5)]
    fs = _fs("m", rows)
    fs.write_csv(tmp_path / "fs.csv")
    back = ForecastSet.read_csv(tmp_path / "fs.csv")
    assert back.key_tuples() == fs.key_tuples()
    assert np.array_equal(back.yhat, fs.yhat)
    assert np.array_equal(back.y, fs.y)
