"""Accuracy metrics, the persistence baseline and evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd

NEAR_ZERO = 1.0
APPROACHES = ("persistence", "raw", "calibrated")
_LAG = {"hour": 1, "day": 24}


class EvaluationError(ValueError):
    pass


def mape_counts(forecast, truth, threshold: float = NEAR_ZERO) -> tuple[float, int, int]:
    """MAPE (%) plus the number of points used and excluded as near-zero truth."""
    forecast = np.asarray(forecast, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if forecast.shape != truth.shape:
        raise EvaluationError(f"forecast and truth lengths differ: {forecast.size} vs {truth.size}")
    if truth.size == 0:
        raise EvaluationError("cannot compute MAPE of an empty series")
    keep = np.abs(truth) >= threshold
    if not keep.any():
        raise EvaluationError("every truth value is below the near-zero threshold")
    value = 100.0 * float(np.mean(np.abs(forecast[keep] - truth[keep]) / np.abs(truth[keep])))
    return value, int(keep.sum()), int((~keep).sum())


def mape(forecast, truth, threshold: float = NEAR_ZERO) -> float:
    """``100 * mean(|forecast - truth| / |truth|)``, skipping points with ``|truth| < threshold``."""
    return mape_counts(forecast, truth, threshold)[0]


def persistence_baseline(series, mode: Literal["hour", "day"] = "hour") -> np.ndarray:
    """Naive forecast along the last axis: the previous hour, or the same hour a day earlier.

    The first ``lag`` positions have no lookback and are NaN.
    """
    series = np.asarray(series, dtype=np.float64)
    lag = _LAG[mode]
    if series.shape[-1] <= lag:
        raise EvaluationError(f"{mode}-ahead persistence needs more than {lag} steps, got {series.shape[-1]}")
    out = np.full_like(series, np.nan)
    out[..., lag:] = series[..., :-lag]
    return out


@dataclass
class WindowReport:
    start: str
    end: str
    n_rows: int
    n_used: int
    n_warmup: int
    n_near_zero: int
    n_unscored: int
    mape: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvalReport:
    mode: str
    threshold: float
    nodes: list[str]
    windows: list[WindowReport]
    pooled: WindowReport
    window_mean: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "near_zero_threshold": self.threshold,
            "nodes": self.nodes,
            "windows": [w.to_dict() for w in self.windows],
            "pooled": self.pooled.to_dict(),
            "window_mean": self.window_mean,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        """Aligned MAPE (%) tables: one row per approach, one column per node."""
        cols = self.nodes + ["aggregate"]
        width = max(12, *(len(c) + 2 for c in cols))
        lines = [f"MAPE (%) - {self.mode}-ahead, |truth| < {self.threshold:g} excluded", ""]
        for title, w in [(f"window {w.start} .. {w.end}", w) for w in self.windows] + [("pooled", self.pooled)]:
            lines.append(f"{title}  (scored rows {w.n_used}, warm-up {w.n_warmup}, near-zero {w.n_near_zero})")
            lines.append(f"{'approach':<14}" + "".join(f"{c:>{width}}" for c in cols))
            for name in APPROACHES:
                row = w.mape.get(name, {})
                lines.append(f"{name:<14}" + "".join(f"{row.get(c, float('nan')):>{width}.2f}" for c in cols))
            lines.append("")
        lines.append("mean of per-window aggregates: " + ", ".join(f"{k} {v:.2f}" for k, v in self.window_mean.items()))
        return "\n".join(lines) + "\n"


def attach_baseline(frame: pd.DataFrame, mode: Literal["hour", "day"]) -> pd.DataFrame:
    """Add a ``baseline`` column: realised truth one hour (or one day) earlier, same node."""
    lag = pd.Timedelta(hours=_LAG[mode])
    lookup = frame[["timestamp", "node_id", "ground_truth"]].copy()
    lookup["timestamp"] = lookup["timestamp"] + lag
    lookup = lookup.rename(columns={"ground_truth": "baseline"})
    return frame.merge(lookup, on=["timestamp", "node_id"], how="left")


def split_windows(timestamps: pd.Series, step: pd.Timedelta) -> np.ndarray:
    """Window id per row: a new window starts wherever consecutive times jump by more than ``step``."""
    unique = np.sort(timestamps.unique())
    breaks = np.concatenate([[0], (np.diff(unique) > step).cumsum()])
    ids = dict(zip(unique, breaks))
    return timestamps.map(ids).to_numpy()


def _score(frame: pd.DataFrame, nodes: list[str], threshold: float) -> WindowReport:
    has_truth = frame["ground_truth"].notna()
    calibrated = frame["calibrated_flag"].astype(bool)
    has_base = frame["baseline"].notna()
    eligible = has_truth & calibrated & has_base
    near_zero = eligible & (frame["ground_truth"].abs() < threshold)
    used = frame[eligible & ~near_zero]
    columns = {"persistence": "baseline", "raw": "forecast_raw", "calibrated": "forecast_calibrated"}
    scores: dict[str, dict[str, float]] = {}
    if len(used):
        for name, col in columns.items():
            per = {}
            for node in nodes:
                sub = used[used["node_id"] == node]
                if len(sub):
                    per[node] = mape(sub[col], sub["ground_truth"], threshold)
            per["aggregate"] = mape(used[col], used["ground_truth"], threshold)
            scores[name] = per
    times = frame["timestamp"]
    return WindowReport(
        start=str(times.min()),
        end=str(times.max()),
        n_rows=int(len(frame)),
        n_used=int(len(used)),
        n_warmup=int((has_truth & ~calibrated).sum()),
        n_near_zero=int(near_zero.sum()),
        n_unscored=int(len(frame) - len(used)),
        mape=scores,
    )


def evaluate(frame: pd.DataFrame, mode: Literal["hour", "day"] = "hour", threshold: float = NEAR_ZERO) -> EvalReport:
    """Score a forecast table (the forecast CSV schema) per test window and pooled.

    Every approach is scored on the same rows: calibrated (past warm-up), with
    ground truth and a persistence lookback, and ``|truth| >= threshold``.
    Windows are maximal runs of consecutive hourly timestamps.
    """
    if frame.empty:
        raise EvaluationError("no forecast records to evaluate")
    frame = attach_baseline(frame, mode)
    nodes = sorted(frame["node_id"].unique())
    window_id = split_windows(frame["timestamp"], pd.Timedelta(hours=1))
    windows = [_score(frame[window_id == w], nodes, threshold) for w in np.unique(window_id)]
    pooled = _score(frame, nodes, threshold)
    if not pooled.n_used:
        raise EvaluationError("no rows left to score after warm-up and near-zero exclusions")
    scored = [w for w in windows if w.mape]
    window_mean = {name: float(np.mean([w.mape[name]["aggregate"] for w in scored])) for name in APPROACHES}
    return EvalReport(mode, threshold, nodes, windows, pooled, window_mean)


def plot_frame(frame: pd.DataFrame, mode: Literal["hour", "day"] = "hour") -> pd.DataFrame:
    """``timestamp,node_id,truth,raw,calibrated,baseline`` for external plotting."""
    out = attach_baseline(frame, mode)
    return out.rename(
        columns={"ground_truth": "truth", "forecast_raw": "raw", "forecast_calibrated": "calibrated"}
    )[["timestamp", "node_id", "truth", "raw", "calibrated", "baseline"]]
