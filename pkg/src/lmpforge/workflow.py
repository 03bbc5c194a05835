"""Run configuration and the train / forecast / evaluate workflow shared by the CLI and tests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .data import FeatureSet, GridMap, NormalizationParams, fit_normalization, window_dataset
from .evaluation import EvalReport, evaluate, plot_frame
from .forecast import CALIBRATION_WINDOW, Forecaster, records_to_frame, rolling_forecast, write_forecast_csv
from .models import GAN, ConfigError, ModelConfig
from .tensor import DimensionError
from .trainer import TrainConfig, TrainLog, train

log = logging.getLogger(__name__)

CASE_ALIASES = {"hourly": "case1", "daily": "case2", "case1": "case1", "case2": "case2"}
SIDECAR = "sidecar.json"
CHECKPOINT = "checkpoint.ckpt"

DATA_DEFAULTS = {"prices": None, "grid": None, "train_start": None, "train_end": None}
FORECAST_DEFAULTS = {"mode": None, "calibration_window": CALIBRATION_WINDOW, "windows": []}
EVAL_DEFAULTS = {"near_zero_threshold": 1.0}


def _merge(section: str, defaults: dict, given: Mapping | None) -> dict:
    given = dict(given or {})
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    return {**defaults, **given}


@dataclass
class RunConfig:
    """JSON run configuration with sections data, model, train, forecast and eval.

    ``model`` holds overrides applied on top of the case defaults; grid size and
    feature list always follow the data and the case.
    """

    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    forecast: dict = field(default_factory=lambda: dict(FORECAST_DEFAULTS))
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RunConfig":
        unknown = set(raw) - {"data", "model", "train", "forecast", "eval"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model = dict(raw.get("model") or {})
        bad = set(model) - (set(ModelConfig.__dataclass_fields__) - {"case", "rows", "cols", "features"})
        if bad:
            raise ConfigError(f"unknown or data-derived model config keys: {sorted(bad)}")
        try:
            tc = TrainConfig.from_dict(dict(raw.get("train") or {}))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(
            _merge("data", DATA_DEFAULTS, raw.get("data")),
            model,
            tc,
            _merge("forecast", FORECAST_DEFAULTS, raw.get("forecast")),
            _merge("eval", EVAL_DEFAULTS, raw.get("eval")),
        )
        if cfg.forecast["mode"] not in (None, "hour", "day"):
            raise ConfigError(f"forecast mode must be 'hour' or 'day', got {cfg.forecast['mode']!r}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def model_config(self, grid: GridMap) -> ModelConfig:
        build = ModelConfig.case2 if self.train.case == "case2" else ModelConfig.case1
        return build(grid.rows, grid.cols, history=self.train.history, **self.model)

    def resolved(self, grid: GridMap | None = None) -> dict:
        model = self.model_config(grid).to_dict() if grid is not None else dict(self.model)
        return {
            "data": self.data,
            "model": model,
            "train": self.train.to_dict(),
            "forecast": {**self.forecast, "mode": self.forecast["mode"] or step_mode(self.train.case)},
            "eval": self.eval,
        }


def step_mode(case: str) -> str:
    return "day" if case == "case2" else "hour"


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _period(features: FeatureSet, start, end) -> FeatureSet:
    index = features[features.names[0]].time_index
    lo = 0 if start is None else int(np.searchsorted(index, np.datetime64(start, "h")))
    hi = len(index) if end is None else int(np.searchsorted(index, np.datetime64(end, "h")))
    if hi - lo < 1:
        raise DimensionError(f"training period [{start}, {end}) selects no data")
    return FeatureSet({name: features[name].slice_steps(lo, hi) for name in features.names})


def fit_feature_params(features: FeatureSet, names: Sequence[str]) -> dict[str, NormalizationParams]:
    return {name: fit_normalization(features[name]) for name in names}


def training_dataset(features: FeatureSet, cfg: ModelConfig, params: Mapping[str, NormalizationParams]):
    """Normalised sliding-window samples in the model's step unit (hours or days)."""
    helper = Forecaster(None, cfg, params)
    channels, _ = helper.step_tensor(features)
    return window_dataset(helper.normalize_channels(channels), cfg.history, len(cfg.features))


@dataclass
class Sidecar:
    """Everything besides the weights that a forecast run needs."""

    model: ModelConfig
    params: dict[str, NormalizationParams]
    grid: GridMap
    train: dict

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "normalization": {k: v.to_dict() for k, v in self.params.items()},
            "grid": self.grid.to_dict(),
            "train": self.train,
        }

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "Sidecar":
        raw = json.loads(Path(path).read_text())
        grid = raw["grid"]
        return cls(
            ModelConfig.from_dict(raw["model"]),
            {k: NormalizationParams.from_dict(v) for k, v in raw["normalization"].items()},
            GridMap(grid["rows"], grid["cols"], {k: tuple(v) for k, v in grid["nodes"].items()}),
            raw["train"],
        )


def run_training(features: FeatureSet, grid: GridMap, run: RunConfig, out_dir) -> tuple[GAN, TrainLog]:
    """Fit normalisation on the training period, train, and write checkpoint plus sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = run.model_config(grid)
    period = _period(features, run.data["train_start"], run.data["train_end"])
    params = fit_feature_params(period, cfg.features)
    dataset = training_dataset(period, cfg, params)
    if len(dataset) < run.train.batch_size:
        log.warning("only %d training windows for minibatch size %d", len(dataset), run.train.batch_size)
    gan = GAN.initialize(cfg, run.train.seed)
    write_json(out / "run_config.json", run.resolved(grid))
    sidecar = Sidecar(cfg, params, grid, run.train.to_dict())
    trainlog = train(gan, run.train, dataset, out, save_extra=lambda d: sidecar.save(d / SIDECAR))
    return gan, trainlog


def load_model(checkpoint) -> tuple[GAN, Sidecar]:
    path = Path(checkpoint)
    if path.is_dir():
        path = path / CHECKPOINT
    sidecar_path = path.with_name(SIDECAR)
    if not sidecar_path.exists():
        raise ConfigError(f"no {SIDECAR} next to {path}")
    gan = GAN.load(path)
    sidecar = Sidecar.load(sidecar_path)
    if gan.config != sidecar.model:
        raise ConfigError(f"{path} and {sidecar_path} describe different models")
    return gan, sidecar


def check_compatible(sidecar: Sidecar, grid: GridMap) -> None:
    if (grid.rows, grid.cols) != (sidecar.grid.rows, sidecar.grid.cols):
        raise DimensionError(
            f"data grid {grid.rows} x {grid.cols} differs from the trained {sidecar.grid.rows} x {sidecar.grid.cols}"
        )
    moved = sorted(k for k in sidecar.grid.nodes if tuple(grid.nodes.get(k, ())) != tuple(sidecar.grid.nodes[k]))
    if moved:
        raise DimensionError(f"nodes placed differently from training: {moved[:5]}")


def _step_of(index: np.ndarray, stamp, mode: str) -> int:
    stamp = np.datetime64(stamp, "h")
    step = np.timedelta64(24 if mode == "day" else 1, "h")
    offset = stamp - index[0]
    if offset % step:
        raise DimensionError(f"{stamp} is not aligned to the {mode} steps of the data")
    return int(offset // step)


def run_forecast(gan: GAN, sidecar: Sidecar, features: FeatureSet, windows: Sequence | None = None,
                 calibration_window: int = CALIBRATION_WINDOW) -> pd.DataFrame:
    """Rolling forecasts for each ``[start, end)`` window (first target step, exclusive end).

    Without windows, every step that has a full history is forecast, plus one
    step beyond the data.
    """
    forecaster = Forecaster.from_gan(gan, sidecar.params)
    mode = forecaster.step_mode
    _, index = forecaster.step_tensor(features)
    T = len(index)
    n = gan.config.history
    spans = []
    for start, end in windows or [(None, None)]:
        lo = n if start is None else _step_of(index, start, mode)
        hi = T + 1 if end is None else _step_of(index, end, mode)
        spans.append((max(lo, n), hi))
    frames = []
    for lo, hi in spans:
        records = rolling_forecast(forecaster, features, lo, hi, calibration_window)
        frames.append(records_to_frame(records, sidecar.grid.nodes, mode))
    return pd.concat(frames, ignore_index=True)


def write_reports(frame: pd.DataFrame, out_dir, mode: str, threshold: float) -> EvalReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(frame, mode, threshold)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    plot = plot_frame(frame, mode)
    plot["timestamp"] = plot["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%S")
    plot.to_csv(out / "plot.csv", index=False, float_format="%.6f", lineterminator="\n")
    return report


__all__ = [
    "RunConfig",
    "Sidecar",
    "check_compatible",
    "fit_feature_params",
    "load_model",
    "run_forecast",
    "run_training",
    "training_dataset",
    "write_forecast_csv",
    "write_reports",
]
