"""Batch command-line surface: ingest -> train -> evaluate -> forecast -> compare.

Config precedence is flag > file > default, and the resolved config is echoed
into every artifact directory. Exit codes are a stable contract: 0 success,
2 input/schema, 3 training abort, 4 artifact mismatch, 5 comparison mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as dt
import json
import os
import sys

import numpy as np

from .baselines import BaselineError, BaselineSpec, fit_predict
from .data import (
    DataError,
    SplitSpec,
    SynthParams,
    aggregate_daily,
    clean,
    ingest_csv,
    load_panel,
    make_inference_window,
    make_splits,
    save_panel,
    synth_generate,
    FeatureScaling,
)
from .evaluation import (
    EvalError,
    ForecastSet,
    KeyMismatch,
    build_report,
    dm_test,
    make_metric_context,
    metric,
    report_emit,
)
from .model import (
    AttentionConfig,
    ModelConfig,
    ModelError,
    MsTcnConfig,
    forecast,
    forecast_batch,
    init_params,
)
from .objectives import LossConfig, RlConfig
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingAbort,
    load_checkpoint,
    save_checkpoint,
    save_history,
    train,
)

__all__ = ["main", "ConfigError", "ArtifactMismatch", "load_config"]


class ConfigError(ValueError):
    """Run configuration is malformed or contains unknown keys."""


class ArtifactMismatch(ValueError):
    """Artifacts passed to a command do not fit together."""


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_intlist(s: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in s.split(",") if v.strip())


def _parse_strlist(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


# (section, key) -> (parser, default-as-string)
CONFIG_SCHEMA: dict[tuple[str, str], tuple] = {
    ("run", "seed"): (int, "0"),
    ("data", "source"): (str, "synth"),
    ("data", "csv_path"): (str, ""),
    ("data", "min_active_days"): (int, "30"),
    ("data", "target"): (str, "demand"),
    ("data", "synth_seed"): (int, "42"),
    ("data", "synth_skus"): (int, "20"),
    ("data", "synth_days"): (int, "200"),
    ("data", "synth_noise"): (float, "2.0"),
    ("data", "synth_holiday"): (float, "0.0"),
    ("split", "mode"): (str, "fractions"),
    ("split", "train_frac"): (float, "0.7"),
    ("split", "val_frac"): (float, "0.15"),
    ("split", "train_end"): (str, ""),
    ("split", "val_end"): (str, ""),
    ("split", "test_end"): (str, ""),
    ("model", "lookback"): (int, "28"),
    ("model", "horizons"): (_parse_intlist, "1,7,14"),
    ("model", "kernel_widths"): (_parse_intlist, "1,2,3"),
    ("model", "branch_channels"): (int, "8"),
    ("model", "conv_activation"): (str, "tanh"),
    ("model", "projection_width"): (int, "16"),
    ("model", "hidden_width"): (int, "32"),
    ("model", "phi"): (str, "tanh"),
    ("model", "attention_variant"): (str, "multiplicative"),
    ("model", "d_k"): (int, "16"),
    ("model", "horizon_embed_width"): (int, "4"),
    ("model", "head_width"): (int, "16"),
    ("model", "decode"): (str, "direct"),
    ("model", "l2"): (float, "1e-4"),
    ("model", "input_grad"): (float, "1e-3"),
    ("model", "smooth"): (float, "1e-3"),
    ("model", "rl_weight"): (float, "0.1"),
    ("model", "entropy_weight"): (float, "-0.01"),
    ("model", "grad_flatness"): (float, "0.0"),
    ("model", "fd_eps"): (float, "1e-3"),
    ("model", "rl_actions"): (int, "11"),
    ("model", "rl_grid_low"): (float, "0.8"),
    ("model", "rl_grid_high"): (float, "1.25"),
    ("model", "rl_baseline_decay"): (float, "0.99"),
    ("model", "rl_reward"): (str, "neg_smape"),
    ("train", "learning_rate"): (float, "0.005"),
    ("train", "max_iterations"): (int, "1200"),
    ("train", "batch_size"): (int, "64"),
    ("train", "adam_beta1"): (float, "0.9"),
    ("train", "adam_beta2"): (float, "0.999"),
    ("train", "adam_eps"): (float, "1e-8"),
    ("train", "clip_norm"): (float, "5.0"),
    ("train", "patience"): (int, "50"),
    ("train", "val_every"): (int, "10"),
    ("eval", "baselines"): (_parse_strlist, "naive_last,seasonal_naive,ridge_ar"),
    ("eval", "metrics"): (_parse_strlist, "mae,rmse,smape,mase,theil_u2"),
    ("eval", "cpoi_price"): (float, "1.0"),
    ("eval", "cpoi_cost"): (float, "0.5"),
    ("eval", "dm_loss"): (str, "squared"),
    ("eval", "mase_season"): (int, "7"),
    ("eval", "ridge"): (float, "1e-4"),
    ("eval", "lag_order"): (int, "7"),
    ("eval", "gru_hidden"): (int, "16"),
    ("eval", "gru_iterations"): (int, "300"),
}


def load_config(path: str | None, overrides: list[str] | None = None,
                seed: int | None = None) -> dict:
    """Resolve defaults, file values, then --set overrides into a nested dict."""
    values: dict[str, dict] = {}
    for (section, key), (parser, default) in CONFIG_SCHEMA.items():
        values.setdefault(section, {})[key] = parser(default)
    if path:
        ini = configparser.ConfigParser()
        read = ini.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in ini.sections():
            for key, raw in ini.items(section):
                if (section, key) not in CONFIG_SCHEMA:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                parser, _ = CONFIG_SCHEMA[(section, key)]
                try:
                    values[section][key] = parser(raw)
                except ValueError as err:
                    raise ConfigError(f"bad value for [{section}] {key}: {err}") from err
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if (section, key) not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key [{section}] {key}")
        parser, _ = CONFIG_SCHEMA[(section, key)]
        try:
            values[section][key] = parser(raw)
        except ValueError as err:
            raise ConfigError(f"bad value for [{section}] {key}: {err}") from err
    if seed is not None:
        values["run"]["seed"] = int(seed)
    return values


def _echo_dict(cfg: dict) -> dict:
    # TEMPORA_THREADS deliberately stays out: an execution knob must not
    # change artifact bytes (worker count never affects results)
    out = {}
    for section in sorted(cfg):
        out[section] = {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg[section].items())
        }
    return out


def _write_echo(cfg: dict, out_dir: str, extra: dict | None = None) -> dict:
    echo = _echo_dict(cfg)
    if extra:
        echo.update(extra)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_echo.json"), "w", encoding="utf-8") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return echo


def _split_spec(cfg: dict, panel) -> SplitSpec:
    split = cfg["split"]
    if split["mode"] == "fractions":
        return SplitSpec.from_fractions(panel, split["train_frac"], split["val_frac"])
    if split["mode"] == "dates":
        try:
            return SplitSpec(
                train_end=dt.date.fromisoformat(split["train_end"]),
                val_end=dt.date.fromisoformat(split["val_end"]),
                test_end=dt.date.fromisoformat(split["test_end"]),
            )
        except ValueError as err:
            raise ConfigError(f"bad split dates: {err}") from err
    raise ConfigError(f"unknown split mode '{split['mode']}'")


def _model_config(cfg: dict, target_transform) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        lookback=m["lookback"],
        horizons=m["horizons"],
        mstcn=MsTcnConfig(
            kernel_widths=m["kernel_widths"],
            branch_channels=m["branch_channels"],
            activation=m["conv_activation"],
            projection_width=m["projection_width"],
        ),
        hidden_width=m["hidden_width"],
        phi=m["phi"],
        attention=AttentionConfig(variant=m["attention_variant"], d_k=m["d_k"]),
        horizon_embed_width=m["horizon_embed_width"],
        head_width=m["head_width"],
        decode=m["decode"],
        target_transform=target_transform,
    )


def _loss_config(cfg: dict) -> LossConfig:
    m = cfg["model"]
    return LossConfig(
        l2=m["l2"],
        input_grad=m["input_grad"],
        smooth=m["smooth"],
        rl_weight=m["rl_weight"],
        entropy_weight=m["entropy_weight"],
        grad_flatness=m["grad_flatness"],
        fd_eps=m["fd_eps"],
        rl=RlConfig(
            n_actions=m["rl_actions"],
            grid_low=m["rl_grid_low"],
            grid_high=m["rl_grid_high"],
            baseline_decay=m["rl_baseline_decay"],
            reward=m["rl_reward"],
        ),
    )


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"],
        max_iterations=t["max_iterations"],
        batch_size=t["batch_size"],
        adam_beta1=t["adam_beta1"],
        adam_beta2=t["adam_beta2"],
        adam_eps=t["adam_eps"],
        clip_norm=t["clip_norm"],
        patience=t["patience"],
        val_every=t["val_every"],
        seed=cfg["run"]["seed"],
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(cfg: dict, out_dir: str) -> int:
    data = cfg["data"]
    if data["source"] == "synth":
        panel = synth_generate(
            data["synth_seed"],
            data["synth_skus"],
            data["synth_days"],
            SynthParams(noise_sd=data["synth_noise"], holiday_amp=data["synth_holiday"]),
        )
        stats = {
            "mode": "synth",
            "n_skus": panel.n_skus,
            "n_days": panel.n_days,
            "seed": data["synth_seed"],
        }
    elif data["source"] == "csv":
        if not data["csv_path"]:
            raise ConfigError("data.source=csv needs data.csv_path")
        records, skipped = ingest_csv(data["csv_path"])
        cleaned = clean(records)
        panel = aggregate_daily(cleaned, min_active_days=data["min_active_days"])
        stats = {
            "mode": "csv",
            "rows_read": len(records) + skipped,
            "rows_skipped": skipped,
            "rows_dropped": len(records) - len(cleaned),
            "rows_kept": len(cleaned),
            "skus_kept": panel.n_skus,
            "skus_excluded": panel.meta.get("skus_excluded", 0),
        }
    else:
        raise ConfigError(f"unknown data source '{data['source']}'")
    save_panel(panel, out_dir)
    stats["content_hash"] = panel.content_hash()
    with open(os.path.join(out_dir, "ingest_stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_echo(cfg, out_dir)
    print(f"panel written to {out_dir} ({panel.n_skus} skus x {panel.n_days} days)")
    return 0


def cmd_train(cfg: dict, panel_dir: str, out_dir: str) -> int:
    panel = load_panel(panel_dir)
    spec = _split_spec(cfg, panel)
    sw = make_splits(
        panel, spec, cfg["model"]["lookback"], cfg["model"]["horizons"], cfg["data"]["target"]
    )
    model_cfg = _model_config(cfg, (sw.scaling.target_mean, sw.scaling.target_std))
    model = init_params(model_cfg, cfg["run"]["seed"])
    result = train(model, sw.train, sw.val, _loss_config(cfg), _train_config(cfg))
    os.makedirs(out_dir, exist_ok=True)
    echo = _write_echo(
        cfg,
        out_dir,
        extra={
            "dataset_hash": panel.content_hash(),
            "split": spec.to_dict(),
            "scaling": sw.scaling.to_dict(),
        },
    )
    save_checkpoint(
        result.model,
        result.state,
        os.path.join(out_dir, "checkpoint.bin"),
        policy_head=result.policy_head,
        extra=echo,
    )
    save_history(result.history, os.path.join(out_dir, "history.csv"))
    print(
        f"trained {result.state.iteration} iterations, "
        f"best val {result.state.best_val:.6f} at iteration {result.state.best_iteration}"
    )
    return 0


def _hybrid_forecast_set(model, sw, panel) -> ForecastSet:
    scaled = forecast_batch(model, sw.test)
    units = model.to_units(scaled)
    target = panel.target_matrix(sw.target_mode)
    sku_index = {s: i for i, s in enumerate(panel.sku_ids)}
    records = []
    for k, w in enumerate(sw.test):
        i = sku_index[w.sku_id]
        for j, h in enumerate(model.config.horizons):
            records.append((w.sku_id, panel.date_of(w.origin), h, units[k, j], target[i, w.origin + h]))
    return ForecastSet.from_records("hybrid", sw.target_mode, records)


def cmd_evaluate(cfg: dict, checkpoint: str, panel_dir: str, out_dir: str) -> int:
    model, _head, _state, ckpt_echo = load_checkpoint(checkpoint)
    if tuple(cfg["model"]["horizons"]) != model.config.horizons:
        raise ArtifactMismatch(
            f"config horizons {cfg['model']['horizons']} do not match the "
            f"checkpoint's {model.config.horizons}"
        )
    panel = load_panel(panel_dir)
    spec = _split_spec(cfg, panel)
    sw = make_splits(panel, spec, model.config.lookback, model.config.horizons, cfg["data"]["target"])

    sets = [_hybrid_forecast_set(model, sw, panel)]
    ev = cfg["eval"]
    for kind in ev["baselines"]:
        spec_b = BaselineSpec(
            kind=kind,
            season=ev["mase_season"],
            lag_order=ev["lag_order"],
            ridge=ev["ridge"],
            hidden_width=ev["gru_hidden"],
            iterations=ev["gru_iterations"],
            seed=cfg["run"]["seed"],
        )
        sets.append(fit_predict(spec_b, panel, sw))

    ctx = make_metric_context(panel, spec, sw.target_mode, season=ev["mase_season"])
    echo = _write_echo(cfg, out_dir, extra={"checkpoint_echo": ckpt_echo})
    report = build_report(
        sets,
        ctx,
        dataset_hash=panel.content_hash(),
        config_echo=echo,
        dm_loss=ev["dm_loss"],
        cpoi_price=ev["cpoi_price"],
        cpoi_cost=ev["cpoi_cost"],
        metrics=tuple(ev["metrics"]),
    )
    report_emit(report, out_dir)
    for fs in sets:
        fs.write_csv(os.path.join(out_dir, f"forecasts_{fs.label}.csv"))
    pooled = report.models[0]["metrics"]["pooled"]
    print("hybrid pooled: " + " ".join(f"{k}={v:.4f}" for k, v in sorted(pooled.items())))
    return 0


def cmd_forecast(checkpoint: str, panel_dir: str, sku: str, origin: str) -> int:
    model, _head, _state, echo = load_checkpoint(checkpoint)
    panel = load_panel(panel_dir)
    scaling_dict = echo.get("scaling")
    if not scaling_dict:
        raise ArtifactMismatch("checkpoint carries no feature scaling; cannot build windows")
    scaling = FeatureScaling.from_dict(scaling_dict)
    window = make_inference_window(
        panel,
        scaling,
        sku,
        dt.date.fromisoformat(origin),
        model.config.lookback,
        model.config.horizons,
    )
    units = forecast(model, window)
    payload = {
        "sku": sku,
        "origin": origin,
        "predictions": {str(h): float(u) for h, u in zip(window.horizons, units)},
    }
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_compare(paths: list[str], out_dir: str, dm_loss: str) -> int:
    if len(paths) < 2:
        raise ConfigError("compare needs at least two forecast-set CSVs")
    sets = [ForecastSet.read_csv(p) for p in paths]
    base_keys = set(sets[0].key_tuples())
    for fs in sets[1:]:
        keys = set(fs.key_tuples())
        if keys != base_keys:
            offending = sorted(base_keys ^ keys)[0]
            raise KeyMismatch(
                f"'{fs.label}' does not cover the same keys as '{sets[0].label}'; "
                f"first offending key {offending}"
            )
    horizons = sets[0].horizons()
    rows = []
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            for h in horizons:
                res = dm_test(sets[i], sets[j], dm_loss, h)
                rows.append(
                    {
                        "a": sets[i].label,
                        "b": sets[j].label,
                        "h": h,
                        "loss": res.loss,
                        "stat": res.stat,
                        "p": res.p,
                        "n": res.n,
                    }
                )
    table = {
        fs.label: {
            f"h{h}": {k: metric(k, fs.filter_h(h)) for k in ("mae", "rmse", "smape")}
            for h in horizons
        }
        | {"pooled": {k: metric(k, fs) for k in ("mae", "rmse", "smape")}}
        for fs in sets
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "compare.json"), "w", encoding="utf-8") as fh:
        json.dump({"dm": rows, "metrics": table}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = ["| a | b | h | loss | stat | p |", "|---|---|---|------|------|---|"]
    for r in rows:
        lines.append(
            f"| {r['a']} | {r['b']} | {r['h']} | {r['loss']} | {r['stat']:.4f} | {r['p']:.4g} |"
        )
    with open(os.path.join(out_dir, "compare.md"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"compared {len(sets)} forecast sets over horizons {horizons}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tempora", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--set", action="append", default=[], metavar="section.key=value",
                       help="override one config value")
        p.add_argument("--out", required=True, help="output directory")

    p_ingest = sub.add_parser("ingest", help="build a panel from csv or synth data")
    common(p_ingest)

    p_train = sub.add_parser("train", help="train the hybrid forecaster")
    common(p_train)
    p_train.add_argument("--panel", required=True)

    p_eval = sub.add_parser("evaluate", help="forecast the test split and emit a report")
    common(p_eval)
    p_eval.add_argument("--panel", required=True)
    p_eval.add_argument("--checkpoint", required=True)

    p_fc = sub.add_parser("forecast", help="single-window inference to stdout")
    p_fc.add_argument("--checkpoint", required=True)
    p_fc.add_argument("--panel", required=True)
    p_fc.add_argument("--sku", required=True)
    p_fc.add_argument("--origin", required=True, help="ISO date of the forecast origin")

    p_cmp = sub.add_parser("compare", help="pairwise DM tests over forecast-set CSVs")
    p_cmp.add_argument("--out", required=True)
    p_cmp.add_argument("--loss", default="squared", choices=("squared", "absolute"))
    p_cmp.add_argument("forecast_sets", nargs="+")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "ingest":
            cfg = load_config(args.config, args.set, args.seed)
            return cmd_ingest(cfg, args.out)
        if args.command == "train":
            cfg = load_config(args.config, args.set, args.seed)
            return cmd_train(cfg, args.panel, args.out)
        if args.command == "evaluate":
            cfg = load_config(args.config, args.set, args.seed)
            return cmd_evaluate(cfg, args.checkpoint, args.panel, args.out)
        if args.command == "forecast":
            return cmd_forecast(args.checkpoint, args.panel, args.sku, args.origin)
        if args.command == "compare":
            return cmd_compare(args.forecast_sets, args.out, args.loss)
        raise ConfigError(f"unknown command {args.command}")
    except KeyMismatch as err:
        print(f"error: {err}", file=sys.stderr)
        return 5
    except (ArtifactMismatch, CheckpointError, ModelError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 4
    except TrainingAbort as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (ConfigError, DataError, BaselineError, EvalError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
