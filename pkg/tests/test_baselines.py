import math

import numpy as np
import pytest

import tempora.autodiff as ad
from tempora.autodiff import Tape, finite_difference_check, mean_all
from tempora.baselines import (
    BaselineError,
    BaselineSpec,
    fit_predict,
    gru_cell_step,
    gru_init,
    ridge_coefficients,
    ridge_objective,
)
from tempora.data import SeriesPanel, SplitSpec, SynthParams, make_splits, synth_generate
from tempora.evaluation import make_metric_context, metric
import datetime as dt


def _setup(panel):
    n = panel.n_days
    spec = SplitSpec(
        train_end=panel.date_of(int(n * 0.7) - 1),
        val_end=panel.date_of(int(n * 0.85) - 1),
        test_end=panel.date_of(n - 1),
    )
    return spec, make_splits(panel, spec, lookback=14, horizons=(1, 7, 14))


def _constant_panel(value=5.0, n_days=90):
    base = synth_generate(0, 2, n_days)
    demand = np.full_like(base.demand, value)
    return SeriesPanel(
        sku_ids=base.sku_ids,
        start_date=base.start_date,
        demand=demand,
        revenue=demand * 2.0,
        mean_price=np.full_like(demand, 2.0),
        country_code=base.country_code,
        countries=base.countries,
        meta={"source": "test"},
    )


def test_naive_last_on_constant_series_is_exact():
    panel = _constant_panel()
    _, sw = _setup(panel)
    fs = fit_predict(BaselineSpec("naive_last"), panel, sw)
    assert metric("mae", fs) == 0.0


def test_seasonal_naive_on_periodic_series_is_exact():
    params = SynthParams(noise_sd=0.0, trend_range=(0.0, 0.0), holiday_amp=0.0)
    panel = synth_generate(3, 3, 90, params)
    _, sw = _setup(panel)
    fs = fit_predict(BaselineSpec("seasonal_naive"), panel, sw)
    for h in (1, 7, 14):
        assert metric("mae", fs.filter_h(h)) == 0.0


def test_seasonal_naive_insample_mase_is_one():
    panel = synth_generate(5, 3, 120)
    spec, sw = _setup(panel)
    ctx = make_metric_context(panel, spec)
    # seasonal-naive evaluated on its own training range
    rows = []
    train_end = panel.index_of(spec.train_end)
    for i, sku in enumerate(panel.sku_ids):
        for d in range(7, train_end + 1):
            rows.append((sku, panel.date_of(d - 1), 1, panel.demand[i, d - 7], panel.demand[i, d]))
    from tempora.evaluation import ForecastSet

    fs = ForecastSet.from_records("snaive_insample", "demand", rows)
    assert metric("mase", fs, ctx) == pytest.approx(1.0, abs=1e-12)


def test_ridge_ar_recovers_doubling_coefficient():
    # y_t = 2 * y_{t-1}, noise free; one lag and a tiny ridge recover coef 2
    n_days = 40
    y = 0.01 * 2.0 ** np.arange(n_days)
    base = synth_generate(0, 1, n_days)
    panel = SeriesPanel(
        sku_ids=["GROW"],
        start_date=base.start_date,
        demand=y[None, :],
        revenue=y[None, :],
        mean_price=np.ones((1, n_days)),
        country_code=np.zeros(1, dtype=np.int64),
        countries=["X"],
        meta={},
    )
    spec = SplitSpec(
        train_end=panel.date_of(30), val_end=panel.date_of(34), test_end=panel.date_of(39)
    )
    sw = make_splits(panel, spec, lookback=5, horizons=(1,))
    spec_b = BaselineSpec("ridge_ar", lag_order=1, ridge=1e-8)
    beta = ridge_coefficients(spec_b, panel, sw)
    assert beta[0, 1] == pytest.approx(2.0, abs=1e-6)


def test_ridge_ar_singular_advises_ridge():
    panel = _constant_panel()  # collinear lags: constant columns
    _, sw = _setup(panel)
    with pytest.raises(BaselineError, match="ridge > 0"):
        fit_predict(BaselineSpec("ridge_ar", lag_order=3, ridge=0.0), panel, sw)


def test_ridge_ar_local_optimality():
    panel = synth_generate(7, 2, 100)
    _, sw = _setup(panel)
    spec_b = BaselineSpec("ridge_ar", lag_order=4, ridge=0.5)
    betas = ridge_coefficients(spec_b, panel, sw)
    rng = np.random.default_rng(0)
    for j in range(betas.shape[0]):
        at_solution = ridge_objective(panel, sw, spec_b, betas[j], j)
        for _ in range(100):
            perturbed = betas[j] + rng.normal(scale=0.05, size=betas[j].shape)
            assert ridge_objective(panel, sw, spec_b, perturbed, j) >= at_solution


def test_ridge_ar_predictions_close_on_learnable_panel():
    params = SynthParams(noise_sd=0.5, trend_range=(0.0, 0.01))
    panel = synth_generate(11, 3, 120, params)
    _, sw = _setup(panel)
    fs = fit_predict(BaselineSpec("ridge_ar", lag_order=7, ridge=1e-3), panel, sw)
    naive = fit_predict(BaselineSpec("naive_last"), panel, sw)
    assert metric("rmse", fs) < metric("rmse", naive)


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------


def test_gru_zero_weights_halves_state():
    tape = Tape()
    p = {}
    for gate in ("z", "r", "h"):
        p[f"gru.w{gate}"] = tape.leaf(np.zeros((2, 3)))
        p[f"gru.u{gate}"] = tape.leaf(np.zeros((3, 3)))
        p[f"gru.b{gate}"] = tape.leaf(np.zeros((1, 3)))
    h_prev = tape.leaf(np.array([[1.0, -2.0, 4.0]]))
    h = gru_cell_step(tape.leaf(np.ones((1, 2))), h_prev, p)
    assert np.allclose(h.data, 0.5 * h_prev.data)


def test_gru_update_gate_saturated_low_keeps_state():
    rng = np.random.default_rng(1)
    tape = Tape()
    p = {}
    for gate in ("z", "r", "h"):
        p[f"gru.w{gate}"] = tape.leaf(rng.normal(size=(2, 3)))
        p[f"gru.u{gate}"] = tape.leaf(rng.normal(size=(3, 3)))
        p[f"gru.b{gate}"] = tape.leaf(np.zeros((1, 3)))
    p["gru.bz"] = tape.leaf(np.full((1, 3), -30.0))
    h_prev = tape.leaf(rng.normal(size=(1, 3)))
    h = gru_cell_step(tape.leaf(rng.normal(size=(1, 2))), h_prev, p)
    assert np.max(np.abs(h.data - h_prev.data)) < 1e-9


def test_gru_cell_gradient_check():
    rng = np.random.default_rng(2)
    arrays = gru_init(2, 3, 1, seed=0)
    xv = rng.normal(size=(2, 2))
    hv = rng.normal(size=(2, 3))

    worst = 0.0
    for name in sorted(k for k in arrays if k.startswith("gru.")):
        def f(t, name=name):
            tape = t.tape
            p = {k: (t if k == name else tape.leaf(v)) for k, v in arrays.items()}
            h = gru_cell_step(tape.leaf(xv), tape.leaf(hv), p)
            return mean_all(ad.square(h))

        if "head" in name:
            continue
        worst = max(worst, finite_difference_check(f, arrays[name], 1e-5))
    assert worst < 1e-6


def test_vanilla_gru_learns_and_emits_forecast_set():
    params = SynthParams(noise_sd=0.5)
    panel = synth_generate(13, 2, 100, params)
    _, sw = _setup(panel)
    fs = fit_predict(
        BaselineSpec("vanilla_gru", hidden_width=8, iterations=80, seed=3), panel, sw
    )
    assert len(fs) == len(sw.test) * 3
    assert np.isfinite(fs.yhat).all()
    fs2 = fit_predict(
        BaselineSpec("vanilla_gru", hidden_width=8, iterations=80, seed=3), panel, sw
    )
    assert np.array_equal(fs.yhat, fs2.yhat)


def test_baselines_share_window_keys_with_each_other():
    panel = synth_generate(17, 2, 90)
    _, sw = _setup(panel)
    fs_a = fit_predict(BaselineSpec("naive_last"), panel, sw)
    fs_b = fit_predict(BaselineSpec("seasonal_naive"), panel, sw)
    assert set(fs_a.key_tuples()) == set(fs_b.key_tuples())
