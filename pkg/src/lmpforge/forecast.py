"""Rolling one-step-ahead forecasting with moving-average bias calibration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal, Mapping, Sequence

import numpy as np
import pandas as pd

from .data import (
    FeatureSet,
    NormalizationParams,
    build_daily_tensor,
    denormalize,
    merge_feature_tensors,
    normalize,
    unbuild_daily_tensor,
)
from .models import GAN, ModelConfig, generator_forward
from .tensor import DimensionError

CALIBRATION_WINDOW = 4
FORECAST_COLUMNS = [
    "timestamp",
    "node_id",
    "ground_truth",
    "forecast_raw",
    "forecast_calibrated",
    "calibrated_flag",
]

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class ForecastRecord:
    """One forecast step in price units; day-mode matrices are 4m x 6n blocks."""

    timestamp: np.datetime64
    truth: np.ndarray | None
    raw: np.ndarray
    calibrated: np.ndarray
    calibrated_flag: bool


def calibrate(raw_next, past_raw: Sequence, past_truth: Sequence, window: int = CALIBRATION_WINDOW):
    """Subtract the mean of the last ``window`` forecast errors from ``raw_next``.

    Returns ``(forecast, calibrated_flag)``; with fewer than ``window`` past
    pairs the raw forecast comes back unchanged and flagged ``False``.
    """
    if len(past_raw) != len(past_truth):
        raise ValueError("past forecasts and truths must pair up")
    raw_next = np.asarray(raw_next, dtype=np.float64)
    if len(past_raw) < window:
        return raw_next.copy(), False
    errors = [np.asarray(r) - np.asarray(t) for r, t in zip(past_raw[-window:], past_truth[-window:])]
    return raw_next - sum(errors) / window, True


class Forecaster:
    """Wraps a normalised-space predictor with per-feature (de)normalisation.

    ``predict`` maps a batch of normalised generator inputs
    ``N x rows x cols x (history * features)`` to normalised forecasts
    ``N x rows x cols``.
    """

    def __init__(self, predict: Predictor, config: ModelConfig, params: Mapping[str, NormalizationParams]):
        missing = [f for f in config.features if f not in params]
        if missing:
            raise ValueError(f"no normalisation parameters for features {missing}")
        self.predict = predict
        self.config = config
        self.params = dict(params)

    @classmethod
    def from_gan(cls, gan: GAN, params: Mapping[str, NormalizationParams]) -> "Forecaster":
        def predict(batch):
            return generator_forward(gan.generator, batch, "infer").data

        return cls(predict, gan.config, params)

    @property
    def step_mode(self) -> Literal["hour", "day"]:
        return "day" if self.config.case == "case2" else "hour"

    def normalize_channels(self, channels: np.ndarray) -> np.ndarray:
        """Normalise interleaved channels; channel ``c`` belongs to feature ``c % F``."""
        feats = self.config.features
        out = np.empty_like(channels, dtype=np.float64)
        for i, name in enumerate(feats):
            out[..., i :: len(feats)] = normalize(channels[..., i :: len(feats)], self.params[name])
        return out

    def forecast_next(self, history: np.ndarray) -> np.ndarray:
        """Next-step RTLMP matrix ($/MWh) from raw history ``rows x cols x (n * features)``."""
        history = np.asarray(history, dtype=np.float64)
        expected = self.config.g_input_shape
        if history.shape != expected:
            raise DimensionError(f"history must have shape {expected}, got {history.shape}")
        norm = self.normalize_channels(history)
        return denormalize(self.predict(norm[None])[0], self.params["RTLMP"])

    def step_tensor(self, features: FeatureSet) -> tuple[np.ndarray, np.ndarray]:
        """Raw interleaved channels and step timestamps in this model's step unit."""
        feats = self.config.features
        for name in feats:
            if name not in features.tensors:
                raise DimensionError(f"data lacks feature {name} required by the model")
        if self.step_mode == "day":
            tensors = {name: build_daily_tensor(features[name]) for name in feats}
            index = tensors["RTLMP"].time_index
        else:
            tensors = {name: features[name] for name in feats}
            index = features["RTLMP"].time_index
        channels = merge_feature_tensors(tensors, feats)
        if channels.shape[:2] != (self.config.rows, self.config.cols):
            raise DimensionError(
                f"data grid {channels.shape[:2]} does not match the model's {self.config.rows} x {self.config.cols}"
            )
        return channels, index


def forecast_next(gan: GAN, history: np.ndarray, params: Mapping[str, NormalizationParams] | NormalizationParams):
    """Denormalised generator forecast for the step following ``history``."""
    if isinstance(params, NormalizationParams):
        params = {"RTLMP": params}
    return Forecaster.from_gan(gan, params).forecast_next(history)


def rolling_forecast(
    forecaster: Forecaster,
    features: FeatureSet,
    start: int,
    stop: int,
    window: int = CALIBRATION_WINDOW,
    batch_size: int = 256,
) -> list[ForecastRecord]:
    """Forecast steps ``start .. stop - 1`` one step ahead from realised history.

    Step indices are hours (case 1) or days (case 2) into ``features``. ``stop``
    may exceed the data by one step, giving a final record without ground truth.
    Each input window holds only observed data strictly before its target step.
    """
    if window < 1:
        raise ValueError(f"calibration window must be >= 1, got {window}")
    channels, index = forecaster.step_tensor(features)
    n, F = forecaster.config.history, len(forecaster.config.features)
    T = len(index)
    if start < n:
        raise DimensionError(f"forecasting step {start} needs {n} earlier steps of history")
    if not start < stop <= T + 1:
        raise DimensionError(f"step range [{start}, {stop}) is outside 0..{T}")
    steps = np.arange(start, stop)
    inputs = np.stack([channels[:, :, (t - n) * F : t * F] for t in steps])
    norm = forecaster.normalize_channels(inputs)
    raw_norm = np.concatenate([forecaster.predict(norm[i : i + batch_size]) for i in range(0, len(norm), batch_size)])
    raw = denormalize(raw_norm, forecaster.params["RTLMP"])
    truth_all = channels[:, :, ::F]
    step = index[1] - index[0] if T > 1 else np.timedelta64(24 if forecaster.step_mode == "day" else 1, "h")

    records: list[ForecastRecord] = []
    past_raw: list[np.ndarray] = []
    past_truth: list[np.ndarray] = []
    for k, t in enumerate(steps):
        truth = truth_all[:, :, t] if t < T else None
        calibrated, flag = calibrate(raw[k], past_raw, past_truth, window)
        stamp = index[t] if t < T else index[-1] + step
        records.append(ForecastRecord(stamp, truth, raw[k], calibrated, flag))
        if truth is not None:
            past_raw.append(raw[k])
            past_truth.append(truth)
    return records


def _hourly_rows(record: ForecastRecord, mode: str) -> list[tuple[np.datetime64, np.ndarray | None, np.ndarray, np.ndarray]]:
    if mode == "hour":
        return [(record.timestamp, record.truth, record.raw, record.calibrated)]
    expand = lambda a: None if a is None else unbuild_daily_tensor(a[:, :, None])  # noqa: E731
    truth, raw, cal = expand(record.truth), expand(record.raw), expand(record.calibrated)
    return [
        (record.timestamp + np.timedelta64(h, "h"), None if truth is None else truth[:, :, h], raw[:, :, h], cal[:, :, h])
        for h in range(24)
    ]


def records_to_frame(records: Sequence[ForecastRecord], node_grid: Mapping[str, Sequence[int]], mode: str) -> pd.DataFrame:
    """Flatten records to one row per (hour, node) in the forecast CSV schema."""
    nodes = sorted(node_grid, key=lambda k: tuple(node_grid[k]))
    rows = []
    for record in records:
        for stamp, truth, raw, cal in _hourly_rows(record, mode):
            for node in nodes:
                r, c = node_grid[node]
                rows.append(
                    (
                        stamp,
                        node,
                        np.nan if truth is None else float(truth[r, c]),
                        float(raw[r, c]),
                        float(cal[r, c]),
                        bool(record.calibrated_flag),
                    )
                )
    frame = pd.DataFrame(rows, columns=FORECAST_COLUMNS)
    frame["timestamp"] = pd.to_datetime(frame["timestamp"])
    return frame


def write_forecast_csv(path, frame: pd.DataFrame) -> int:
    """Write a forecast table; missing ground truth becomes an empty field."""
    out = frame.copy()
    out["timestamp"] = out["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%S")
    out["calibrated_flag"] = out["calibrated_flag"].astype(int)
    out.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return len(out)


def read_forecast_csv(path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"node_id": str})
    if list(frame.columns) != FORECAST_COLUMNS:
        raise ValueError(f"{path}: header must be {','.join(FORECAST_COLUMNS)}")
    frame["timestamp"] = pd.to_datetime(frame["timestamp"], format="ISO8601")
    for col in ("ground_truth", "forecast_raw", "forecast_calibrated"):
        frame[col] = pd.to_numeric(frame[col], errors="raise").astype(float)
    frame["calibrated_flag"] = frame["calibrated_flag"].astype(int).astype(bool)
    return frame
