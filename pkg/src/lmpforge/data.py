"""Price ingestion, tensor layouts and log-range normalisation.

Hourly tensors have shape ``m x n x T``; node ``k`` sits at the grid cell given
by the user's grid map. Daily block tensors tile each day's 24 hourly matrices
into a ``4m x 6n`` matrix, hour ``h`` at block row ``h // 6`` and block column
``h % 6``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Mapping

import numpy as np
import pandas as pd

from .tensor import DimensionError

log = logging.getLogger(__name__)

FEATURES = ("RTLMP", "DALMP", "DEMAND", "GENMIX")
MAX_GAP = 3
CLAMP_FLOOR = 1e-6
HOUR = np.timedelta64(1, "h")
DAY = np.timedelta64(24, "h")


class IngestionError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


@dataclass
class PriceTensor:
    values: np.ndarray
    node_grid: dict[str, tuple[int, int]]
    time_index: np.ndarray  # datetime64[h], one entry per step (day starts for daily tensors)
    granularity: Literal["hourly", "daily"] = "hourly"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.time_index = np.asarray(self.time_index, dtype="datetime64[h]")
        if self.values.ndim != 3:
            raise DimensionError(f"price tensor must be rows x cols x steps, got {self.values.shape}")
        if len(self.time_index) != self.values.shape[2]:
            raise DimensionError(f"{len(self.time_index)} timestamps for {self.values.shape[2]} steps")
        if len(self.time_index) > 1:
            step = np.diff(self.time_index)
            if np.any(step <= np.timedelta64(0, "h")) or np.any(step != step[0]):
                raise IngestionError("time index must be strictly increasing with uniform spacing")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def steps(self) -> int:
        return self.values.shape[2]

    def slice_steps(self, start: int, stop: int) -> "PriceTensor":
        return PriceTensor(self.values[:, :, start:stop], self.node_grid, self.time_index[start:stop], self.granularity)

    def locate(self, timestamp) -> int:
        """Index of the step whose time equals ``timestamp``."""
        ts = np.datetime64(pd.Timestamp(timestamp).to_datetime64(), "h")
        hits = np.nonzero(self.time_index == ts)[0]
        if not len(hits):
            raise IngestionError(f"timestamp {timestamp} not in the data range")
        return int(hits[0])


@dataclass(frozen=True)
class NormalizationParams:
    data_min: float
    shifted_max: float

    def to_dict(self) -> dict[str, float]:
        return {"data_min": self.data_min, "shifted_max": self.shifted_max}

    @classmethod
    def from_dict(cls, data: Mapping[str, float]) -> "NormalizationParams":
        return cls(float(data["data_min"]), float(data["shifted_max"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NormalizationParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class FeatureSet:
    """One tensor per market feature, all on the same grid and time index."""

    tensors: dict[str, PriceTensor]
    params: dict[str, NormalizationParams] = field(default_factory=dict)

    def __post_init__(self):
        names = list(self.tensors)
        if not names:
            raise IngestionError("empty feature set")
        ref = self.tensors[names[0]]
        for name in names[1:]:
            t = self.tensors[name]
            if t.node_grid != ref.node_grid or not np.array_equal(t.time_index, ref.time_index):
                raise IngestionError(f"feature {name} does not share the grid/time index of {names[0]}")
            if t.shape != ref.shape:
                raise DimensionError(f"feature {name} has shape {t.shape}, expected {ref.shape}")

    def __getitem__(self, name: str) -> PriceTensor:
        return self.tensors[name]

    @property
    def names(self) -> list[str]:
        return list(self.tensors)


# -- grid maps and CSV ingestion --------------------------------------------------


@dataclass(frozen=True)
class GridMap:
    rows: int
    cols: int
    nodes: dict[str, tuple[int, int]]

    def __post_init__(self):
        if len(self.nodes) != self.rows * self.cols:
            raise IngestionError(f"grid map has {len(self.nodes)} nodes, expected rows*cols = {self.rows * self.cols}")
        cells = set()
        for node, (r, c) in self.nodes.items():
            if not (0 <= r < self.rows and 0 <= c < self.cols):
                raise IngestionError(f"node {node} placed outside the {self.rows} x {self.cols} grid at ({r}, {c})")
            if (r, c) in cells:
                raise IngestionError(f"grid cell ({r}, {c}) assigned twice")
            cells.add((r, c))

    @classmethod
    def load(cls, path) -> "GridMap":
        try:
            raw = json.loads(Path(path).read_text())
            return cls(int(raw["rows"]), int(raw["cols"]), {str(k): (int(v[0]), int(v[1])) for k, v in raw["nodes"].items()})
        except (KeyError, TypeError, IndexError, json.JSONDecodeError) as exc:
            raise IngestionError(f"{path}: malformed grid map ({exc})") from exc

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "nodes": {k: list(v) for k, v in self.nodes.items()}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def node_at(self) -> list[list[str]]:
        table = [[""] * self.cols for _ in range(self.rows)]
        for node, (r, c) in self.nodes.items():
            table[r][c] = node
        return table


CSV_COLUMNS = ["timestamp", "node_id", "feature", "value"]


def _read_price_frame(path) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"node_id": str, "feature": str, "timestamp": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError as exc:
        raise IngestionError(f"{path}: empty file") from exc
    if list(frame.columns) != CSV_COLUMNS:
        raise IngestionError(f"{path}: header must be {','.join(CSV_COLUMNS)}, got {','.join(map(str, frame.columns))}")
    if frame.empty:
        raise IngestionError(f"{path}: no data rows")
    frame["row"] = np.arange(len(frame)) + 2  # 1-based file line numbers, header on line 1
    bad_feature = ~frame["feature"].isin(FEATURES)
    if bad_feature.any():
        row = frame.loc[bad_feature].iloc[0]
        raise IngestionError(f"{path}:{row['row']}: unknown feature {row['feature']!r}")
    values = pd.to_numeric(frame["value"], errors="coerce")
    if values.isna().any():
        row = frame.loc[values.isna()].iloc[0]
        raise IngestionError(f"{path}:{row['row']}: value {row['value']!r} is not a number")
    frame["value"] = values.astype(np.float64)
    stamps = pd.to_datetime(frame["timestamp"], format="ISO8601", errors="coerce", utc=True)
    if stamps.isna().any():
        row = frame.loc[stamps.isna()].iloc[0]
        raise IngestionError(f"{path}:{row['row']}: unparseable timestamp {row['timestamp']!r}")
    stamps = stamps.dt.tz_localize(None)
    off_hour = stamps != stamps.dt.floor("h")
    if off_hour.any():
        row = frame.loc[off_hour].iloc[0]
        raise IngestionError(f"{path}:{row['row']}: timestamp {row['timestamp']} is not on an hour boundary")
    frame["ts"] = stamps.values.astype("datetime64[h]")
    return frame


def _fill_gaps(series: np.ndarray, node: str, feature: str, index: np.ndarray) -> tuple[np.ndarray, int]:
    missing = np.isnan(series)
    if not missing.any():
        return series, 0
    if missing[0] or missing[-1]:
        raise IngestionError(f"{feature}/{node}: missing values at the start or end of the range cannot be interpolated")
    edges = np.diff(np.concatenate([[0], missing.astype(int), [0]]))
    starts, stops = np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]
    for a, b in zip(starts, stops):
        if b - a > MAX_GAP:
            raise IngestionError(f"{feature}/{node}: gap of {b - a} hours starting {index[a]} exceeds {MAX_GAP}")
    filled = series.copy()
    known = ~missing
    positions = np.arange(len(series))
    filled[missing] = np.interp(positions[missing], positions[known], series[known])
    for a, b in zip(starts, stops):
        log.warning("%s/%s: interpolated %d missing hour(s) from %s", feature, node, b - a, index[a])
    return filled, int(missing.sum())


def load_feature_set(path, grid: GridMap | str | Path, features=None) -> FeatureSet:
    """Read a ``timestamp,node_id,feature,value`` CSV into hourly tensors.

    Within each (node, feature) series timestamps must strictly increase in
    file order. Gaps of up to three consecutive hours are filled by linear
    interpolation (with a warning); anything longer is an error.
    """
    if not isinstance(grid, GridMap):
        grid = GridMap.load(grid)
    frame = _read_price_frame(path)
    unknown = ~frame["node_id"].isin(list(grid.nodes))
    if unknown.any():
        row = frame.loc[unknown].iloc[0]
        raise IngestionError(f"{path}:{row['row']}: unknown node_id {row['node_id']!r}")
    for (node, feature), group in frame.groupby(["node_id", "feature"], sort=False):
        steps = np.diff(group["ts"].values)
        bad = np.nonzero(steps <= np.timedelta64(0, "h"))[0]
        if len(bad):
            row = group.iloc[bad[0] + 1]
            raise IngestionError(f"{path}:{row['row']}: timestamps for {feature}/{node} are not strictly increasing")
    wanted = list(features) if features is not None else [f for f in FEATURES if f in set(frame["feature"])]
    stamps = frame["ts"].values.astype("datetime64[h]")
    start, stop = stamps.min(), stamps.max()
    index = np.arange(start, stop + HOUR, HOUR)
    tensors = {}
    for feature in wanted:
        sub = frame[frame["feature"] == feature]
        if sub.empty:
            raise IngestionError(f"{path}: no rows for feature {feature}")
        values = np.full((grid.rows, grid.cols, len(index)), np.nan)
        for node, (r, c) in grid.nodes.items():
            rows = sub[sub["node_id"] == node]
            if rows.empty:
                raise IngestionError(f"{path}: node {node} has no {feature} rows")
            pos = ((rows["ts"].values.astype("datetime64[h]") - start) // HOUR).astype(int)
            series = np.full(len(index), np.nan)
            series[pos] = rows["value"].values
            values[r, c], _ = _fill_gaps(series, node, feature, index)
        tensors[feature] = PriceTensor(values, dict(grid.nodes), index, "hourly")
    return FeatureSet(tensors)


def load_price_csv(path, node_grid_path, feature: str = "RTLMP") -> PriceTensor:
    return load_feature_set(path, node_grid_path, [feature])[feature]


def write_price_csv(path, features: FeatureSet) -> None:
    """Write hourly tensors back out in the ingestion CSV schema (sorted by time, feature, node)."""
    ref = features[features.names[0]]
    stamps = pd.DatetimeIndex(ref.time_index.astype("datetime64[ns]")).strftime("%Y-%m-%dT%H:%M:%S")
    nodes = sorted(ref.node_grid, key=lambda k: ref.node_grid[k])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for t, stamp in enumerate(stamps):
            for name in features.names:
                vals = features[name].values
                for node in nodes:
                    r, c = ref.node_grid[node]
                    fh.write(f"{stamp},{node},{name},{vals[r, c, t]:.6f}\n")


# -- tensor layouts ------------------------------------------------------------------


def build_daily_tensor(hourly: PriceTensor) -> PriceTensor:
    """Tile each day's 24 hourly ``m x n`` matrices into one ``4m x 6n`` matrix."""
    m, n, T = hourly.shape
    if T % 24:
        raise DimensionError(f"hourly tensor has {T} steps, not a whole number of days")
    days = T // 24
    blocks = hourly.values.reshape(m, n, days, 4, 6)  # hour = 6 * block_row + block_col
    daily = blocks.transpose(3, 0, 4, 1, 2).reshape(4 * m, 6 * n, days)
    return PriceTensor(daily, hourly.node_grid, hourly.time_index[::24], "daily")


def unbuild_daily_tensor(daily: PriceTensor | np.ndarray, node_grid=None, start=None) -> PriceTensor | np.ndarray:
    """Inverse of :func:`build_daily_tensor`; plain arrays map to plain arrays."""
    values = daily.values if isinstance(daily, PriceTensor) else np.asarray(daily)
    M, N, days = values.shape
    if M % 4 or N % 6:
        raise DimensionError(f"daily matrices must be 4m x 6n, got {M} x {N}")
    m, n = M // 4, N // 6
    hourly = values.reshape(4, m, 6, n, days).transpose(1, 3, 4, 0, 2).reshape(m, n, days * 24)
    if not isinstance(daily, PriceTensor):
        return hourly
    index = daily.time_index[0] + np.arange(days * 24) * HOUR
    return PriceTensor(hourly, daily.node_grid, index, "hourly")


def merge_feature_tensors(tensors: Mapping[str, np.ndarray | PriceTensor], order=FEATURES) -> np.ndarray:
    """Interleave daily feature tensors per day: ``out[..., k*d + f] = feature_f[..., d]``."""
    arrays = [tensors[f].values if isinstance(tensors[f], PriceTensor) else np.asarray(tensors[f]) for f in order]
    shape = arrays[0].shape
    for name, arr in zip(order, arrays):
        if arr.shape != shape:
            raise DimensionError(f"feature {name} has shape {arr.shape}, expected {shape}")
    refs = [tensors[f] for f in order if isinstance(tensors[f], PriceTensor)]
    for t in refs[1:]:
        if not np.array_equal(t.time_index, refs[0].time_index):
            raise IngestionError("feature tensors have different time indices")
    return np.stack(arrays, axis=-1).reshape(shape[0], shape[1], shape[2] * len(order))


def split_feature_tensors(merged: np.ndarray, order=FEATURES) -> dict[str, np.ndarray]:
    k = len(order)
    if merged.shape[2] % k:
        raise DimensionError(f"merged tensor depth {merged.shape[2]} is not a multiple of {k}")
    stacked = merged.reshape(merged.shape[0], merged.shape[1], -1, k)
    return {name: stacked[..., i].copy() for i, name in enumerate(order)}


# -- normalisation ---------------------------------------------------------------------


def fit_normalization(train) -> NormalizationParams:
    values = train.values if isinstance(train, PriceTensor) else np.asarray(train, dtype=np.float64)
    if values.size == 0:
        raise NormalizationError("cannot fit normalisation on an empty tensor")
    data_min = float(values.min())
    return NormalizationParams(data_min, float((values - data_min + 1.0).max()))


def normalize(x, params: NormalizationParams) -> np.ndarray:
    """Map prices to [-1, 1] on a log scale: training min -> -1, training max -> +1.

    Values more than 1 below the training minimum would leave the log's domain;
    their shifted value is clamped to ``1e-6`` with a warning.
    """
    if params.shifted_max <= 1.0:
        raise NormalizationError("degenerate normalisation range: the training data is constant")
    x = np.asarray(x.values if isinstance(x, PriceTensor) else x, dtype=np.float64)
    shifted = x - params.data_min + 1.0
    low = shifted <= 0
    if np.any(low):
        log.warning("%d value(s) below training minimum - 1 clamped before the log", int(low.sum()))
        shifted = np.where(low, CLAMP_FLOOR, shifted)
    half = math.log(params.shifted_max) / 2.0
    out = (np.log(shifted) - half) / half
    # np.log and math.log may differ by an ulp; keep the training extremes exact
    out = np.where(shifted == 1.0, -1.0, out)
    return np.where(shifted == params.shifted_max, 1.0, out)


def denormalize(x_norm, params: NormalizationParams) -> np.ndarray:
    half = math.log(params.shifted_max) / 2.0
    return np.exp((np.asarray(x_norm, dtype=np.float64) + 1.0) * half) + params.data_min - 1.0


# -- windowing ---------------------------------------------------------------------


@dataclass
class WindowDataset:
    """Training samples: generator inputs, discriminator history and targets.

    ``g_inputs`` is ``S x rows x cols x (history * features)``, ``d_history`` is
    ``S x rows x cols x history`` (RTLMP channels only) and ``targets`` is
    ``S x rows x cols``.
    """

    g_inputs: np.ndarray
    d_history: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def batch(self, index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.g_inputs[index], self.d_history[index], self.targets[index]


def window_samples(values: np.ndarray, history_n: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(window, next_step)`` pairs in time order; ``window`` is ``rows x cols x history_n``."""
    values = np.asarray(values.values if isinstance(values, PriceTensor) else values)
    T = values.shape[2]
    if T <= history_n:
        raise IngestionError(f"need more than {history_n} steps to form a window, got {T}")
    for t in range(history_n, T):
        yield values[:, :, t - history_n : t], values[:, :, t]


def window_dataset(channels: np.ndarray, history_n: int, n_features: int = 1) -> WindowDataset:
    """Sliding windows over a (possibly feature-interleaved) normalised tensor.

    With ``n_features`` interleaved features, step ``d`` occupies channels
    ``[d * n_features, (d + 1) * n_features)`` and RTLMP is the first of each group.
    """
    T = channels.shape[2] // n_features
    if channels.shape[2] % n_features:
        raise DimensionError(f"tensor depth {channels.shape[2]} is not a multiple of {n_features} features")
    if T <= history_n:
        raise IngestionError(f"need more than {history_n} steps to form a window, got {T}")
    span = history_n * n_features
    starts = np.arange(T - history_n)[:, None] * n_features + np.arange(span)[None, :]
    g_inputs = np.moveaxis(channels[:, :, starts], 2, 0)  # S x rows x cols x span
    d_history = g_inputs[..., ::n_features]
    targets = np.moveaxis(channels[:, :, history_n * n_features :: n_features], 2, 0)
    return WindowDataset(np.ascontiguousarray(g_inputs), np.ascontiguousarray(d_history), np.ascontiguousarray(targets))
