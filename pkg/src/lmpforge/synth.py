"""Seeded synthetic spatio-temporal market data.

For node ``k`` at grid cell ``(r, c)`` and hour ``t`` (counted from ``start``)::

    daily(t)   = sin(2*pi * (t - daily_peak_hour + 6) / 24)        # peaks at daily_peak_hour
    weekly(t)  = sin(2*pi * t / 168)
    season(k,t)= base_price
                 + spatial_row * (r - (rows - 1) / 2) + spatial_col * (c - (cols - 1) / 2)
                 + daily_amplitude[k] * daily(t) + weekly_amplitude[k] * weekly(t)
    RTLMP(k,t) = season(k,t) + noise_std * e1 + spike_magnitude * [u < spike_probability]
    DALMP(k,t) = mean(RTLMP(k, t-4 .. t))                            # trailing, truncated at start
    DEMAND(k,t)= demand_base * (1 + k / (10 * N)) * (1 + 0.25 daily(t) + 0.05 weekly(t) + 0.01 e2)
    GENMIX(k,t)= 30 - 10 * daily(t) + e3                             # renewable share, percent

``e1, e2, e3`` are independent standard normals and ``u`` is uniform on [0, 1),
all drawn in that order as full ``rows x cols x T`` arrays from one generator
seeded with ``seed``. Over a whole number of weeks the noise-free RTLMP of
node ``k`` averages exactly ``base_price`` plus its spatial offset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FEATURES, FeatureSet, GridMap, PriceTensor, HOUR


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    rows: int = 3
    cols: int = 3
    days: int = 60
    start: str = "2016-06-01T00:00:00"
    base_price: float = 30.0
    daily_amplitude: float | Sequence[float] = 8.0
    weekly_amplitude: float | Sequence[float] = 3.0
    daily_peak_hour: float = 17.0
    spatial_row: float = 2.0
    spatial_col: float = -1.5
    noise_std: float = 1.5
    spike_probability: float = 0.0
    spike_magnitude: float = 40.0
    demand_base: float = 1000.0
    seed: int = 0
    features: Sequence[str] = FEATURES

    def __post_init__(self):
        for name in ("daily_amplitude", "weekly_amplitude"):
            value = getattr(self, name)
            if not np.isscalar(value):
                value = tuple(float(v) for v in value)
                if len(value) != self.rows * self.cols:
                    raise SpecError(f"{name}: expected {self.rows * self.cols} per-node values, got {len(value)}")
                object.__setattr__(self, name, value)
        object.__setattr__(self, "features", tuple(self.features))
        if self.rows < 1 or self.cols < 1:
            raise SpecError("rows and cols must be positive")
        if self.days < 1:
            raise SpecError("days must be positive")
        if not 0.0 <= self.spike_probability < 1.0:
            raise SpecError(f"spike_probability must lie in [0, 1), got {self.spike_probability}")
        if self.noise_std < 0:
            raise SpecError(f"noise_std must be non-negative, got {self.noise_std}")
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not np.isfinite(value):
                raise SpecError(f"{f.name} must be finite")
        bad = [f for f in self.features if f not in FEATURES]
        if bad or "RTLMP" not in self.features:
            raise SpecError(f"features must include RTLMP and come from {FEATURES}, got {self.features}")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    def grid(self) -> GridMap:
        nodes = {f"N{r * self.cols + c + 1}": (r, c) for r in range(self.rows) for c in range(self.cols)}
        return GridMap(self.rows, self.cols, nodes)


def _per_node(value, rows: int, cols: int) -> np.ndarray:
    if np.isscalar(value):
        return np.full((rows, cols, 1), float(value))
    return np.asarray(value, dtype=np.float64).reshape(rows, cols, 1)


def seasonal_component(spec: SynthSpec) -> np.ndarray:
    """Noise- and spike-free RTLMP, ``rows x cols x hours``."""
    m, n = spec.rows, spec.cols
    t = np.arange(spec.days * 24, dtype=np.float64)
    daily = np.sin(2 * np.pi * (t - spec.daily_peak_hour + 6) / 24)
    weekly = np.sin(2 * np.pi * t / 168)
    r = np.arange(m, dtype=np.float64)[:, None, None] - (m - 1) / 2
    c = np.arange(n, dtype=np.float64)[None, :, None] - (n - 1) / 2
    return (
        spec.base_price
        + spec.spatial_row * r
        + spec.spatial_col * c
        + _per_node(spec.daily_amplitude, m, n) * daily
        + _per_node(spec.weekly_amplitude, m, n) * weekly
    )


def synth_generate(spec: SynthSpec) -> FeatureSet:
    m, n, T = spec.rows, spec.cols, spec.days * 24
    rng = np.random.default_rng(spec.seed)
    e1 = rng.standard_normal((m, n, T))
    e2 = rng.standard_normal((m, n, T))
    e3 = rng.standard_normal((m, n, T))
    u = rng.random((m, n, T))

    t = np.arange(T, dtype=np.float64)
    daily = np.sin(2 * np.pi * (t - spec.daily_peak_hour + 6) / 24)
    weekly = np.sin(2 * np.pi * t / 168)
    rt = seasonal_component(spec) + spec.noise_std * e1 + spec.spike_magnitude * (u < spec.spike_probability)

    csum = np.concatenate([np.zeros((m, n, 1)), np.cumsum(rt, axis=2)], axis=2)
    lo = np.maximum(np.arange(T) - 4, 0)
    da = (csum[:, :, np.arange(T) + 1] - csum[:, :, lo]) / (np.arange(T) + 1 - lo)

    k = np.arange(m * n, dtype=np.float64).reshape(m, n, 1)
    demand = spec.demand_base * (1 + k / (10 * m * n)) * (1 + 0.25 * daily + 0.05 * weekly + 0.01 * e2)
    genmix = 30.0 - 10.0 * daily + e3

    grid = spec.grid()
    start = np.datetime64(spec.start, "h")
    index = start + np.arange(T) * HOUR
    series = {"RTLMP": rt, "DALMP": da, "DEMAND": demand, "GENMIX": genmix}
    return FeatureSet({f: PriceTensor(series[f], dict(grid.nodes), index) for f in FEATURES if f in spec.features})
