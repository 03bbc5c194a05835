"""Generator and discriminator networks for the two forecasting set-ups.

Case 1 forecasts the next hourly ``m x n`` price matrix from the previous four
hours; case 2 forecasts the next day's ``4m x 6n`` block matrix from four days
of RTLMP, DALMP, DEMAND and GENMIX block matrices.

Both networks are plain layer stacks described by :class:`LayerSpec` lists.
A ``concat`` layer joins the running activations with the network's raw input,
acting as a skip connection: along channels when the spatial sizes agree,
otherwise as flattened feature vectors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Literal, Sequence

import numpy as np

from . import nn
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .data import FEATURES
from .tensor import DimensionError, Tensor, as_tensor

INIT_SCALE = 0.05

LAYER_KINDS = (
    "conv2d",
    "conv2d_transpose",
    "dense",
    "batch_norm",
    "relu",
    "leaky_relu",
    "dropout",
    "concat",
    "tanh",
    "sigmoid",
)
_CONV_KINDS = ("conv2d", "conv2d_transpose")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] | None = None
    padding: str | None = None
    features: int | None = None
    rate: float | None = None
    slope: float | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        conv = self.kind in _CONV_KINDS
        if conv != (self.kernel is not None) or conv != (self.stride is not None):
            raise ConfigError(f"{self.kind}: kernel/stride must be given exactly for convolutional layers")
        if conv:
            object.__setattr__(self, "kernel", tuple(int(v) for v in self.kernel))
            object.__setattr__(self, "stride", tuple(int(v) for v in self.stride))
            if self.padding not in ("same", "valid"):
                raise ConfigError(f"{self.kind}: padding must be 'same' or 'valid', got {self.padding!r}")
        if self.kind in _CONV_KINDS + ("dense",) and (self.features is None or self.features < 1):
            raise ConfigError(f"{self.kind}: needs a positive feature-map count")
        if self.kind == "dropout" and not (self.rate is not None and 0.0 <= self.rate < 1.0):
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.kind == "leaky_relu" and not (self.slope is not None and 0.0 < self.slope < 1.0):
            raise ConfigError(f"leaky slope must lie in (0, 1), got {self.slope}")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict) -> "LayerSpec":
        return cls(**data)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters; defaults reproduce the case-1 networks."""

    case: Literal["case1", "case2"] = "case1"
    history: int = 4
    rows: int = 3
    cols: int = 3
    features: tuple[str, ...] = ("RTLMP",)
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    g_maps: tuple[int, ...] = (64, 1024, 512, 64)
    d_conv_maps: int = 64
    d_dense: tuple[int, ...] = (1024, 512, 256)
    dropout_rate: float = 0.3
    leaky_slope: float = 0.2

    def __post_init__(self):
        for name in ("features", "kernel", "stride", "g_maps", "d_dense"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.case not in ("case1", "case2"):
            raise ConfigError(f"case must be 'case1' or 'case2', got {self.case!r}")
        if self.history < 1:
            raise ConfigError("history must be >= 1")
        if not self.features or self.features[0] != "RTLMP" or any(f not in FEATURES for f in self.features):
            raise ConfigError(f"features must start with RTLMP and be drawn from {FEATURES}, got {self.features}")
        if self.kernel[0] > self.rows or self.kernel[1] > self.cols:
            raise ConfigError(f"kernel {self.kernel} larger than the {self.rows} x {self.cols} grid")
        if len(self.g_maps) < 2:
            raise ConfigError("g_maps needs the first-layer count plus at least one later stage")

    @property
    def g_input_shape(self) -> tuple[int, int, int]:
        return (self.rows, self.cols, self.history * len(self.features))

    @property
    def d_input_shape(self) -> tuple[int, int, int]:
        return (self.rows, self.cols, self.history + 1)

    @classmethod
    def case1(cls, m: int = 3, n: int = 3, **overrides) -> "ModelConfig":
        return cls(**{"case": "case1", "rows": m, "cols": n, "kernel": (3, 3), **overrides})

    @classmethod
    def case2(cls, m: int = 3, n: int = 3, **overrides) -> "ModelConfig":
        base = dict(
            case="case2",
            rows=4 * m,
            cols=6 * n,
            features=FEATURES,
            kernel=(4 * m, 6 * n),
            g_maps=(64, 256, 128, 64),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def generator_specs(cfg: ModelConfig) -> list[LayerSpec]:
    def tconv(maps):
        return LayerSpec("conv2d_transpose", cfg.kernel, cfg.stride, "same", maps)

    first, *stages = cfg.g_maps
    specs = [tconv(first), LayerSpec("batch_norm"), LayerSpec("relu"), LayerSpec("concat")]
    for maps in stages:
        specs += [tconv(maps), LayerSpec("batch_norm"), LayerSpec("relu")]
    specs += [tconv(1), LayerSpec("tanh")]
    return specs


def discriminator_specs(cfg: ModelConfig) -> list[LayerSpec]:
    def block(layer):
        return [
            layer,
            LayerSpec("batch_norm"),
            LayerSpec("leaky_relu", slope=cfg.leaky_slope),
            LayerSpec("dropout", rate=cfg.dropout_rate),
        ]

    specs = block(LayerSpec("conv2d", cfg.kernel, cfg.stride, "valid", cfg.d_conv_maps))
    specs.append(LayerSpec("concat"))
    for units in cfg.d_dense:
        specs += block(LayerSpec("dense", features=units))
    specs += [LayerSpec("dense", features=1), LayerSpec("sigmoid")]
    return specs


class Network:
    """A feed-forward stack with its parameters and batch-norm running statistics.

    Parameters are named ``"<layer index>.<role>"`` and kept in declaration
    order, which is also the checkpoint order.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Sequence[int], rng: np.random.Generator | None = None):
        self.specs = tuple(specs)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[int, dict[str, np.ndarray]] = {}
        self.output_shape = self._build(rng)

    def _add(self, name: str, shape, rng, kind: str) -> None:
        if kind == "weight":
            data = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape) if rng is not None else np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        self.params[name] = Tensor(data, requires_grad=True)

    def _build(self, rng) -> tuple[int, ...]:
        shape = self.input_shape
        flat_input = int(np.prod(self.input_shape))
        for i, spec in enumerate(self.specs):
            if spec.kind == "conv2d":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: conv2d needs a spatial input, got {shape}")
                h, w, c = shape
                oh, _, _ = nn._axis_geometry(h, spec.kernel[0], spec.stride[0], spec.padding, "rows")
                ow, _, _ = nn._axis_geometry(w, spec.kernel[1], spec.stride[1], spec.padding, "cols")
                self._add(f"{i}.kernel", spec.kernel + (c, spec.features), rng, "weight")
                self._add(f"{i}.bias", (spec.features,), rng, "zeros")
                shape = (oh, ow, spec.features)
            elif spec.kind == "conv2d_transpose":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i}: conv2d_transpose needs a spatial input, got {shape}")
                h, w, c = shape
                if spec.padding == "same":
                    oh, ow = h * spec.stride[0], w * spec.stride[1]
                else:
                    oh = (h - 1) * spec.stride[0] + spec.kernel[0]
                    ow = (w - 1) * spec.stride[1] + spec.kernel[1]
                self._add(f"{i}.kernel", spec.kernel + (spec.features, c), rng, "weight")
                self._add(f"{i}.bias", (spec.features,), rng, "zeros")
                shape = (oh, ow, spec.features)
            elif spec.kind == "dense":
                d = int(np.prod(shape))
                self._add(f"{i}.weights", (d, spec.features), rng, "weight")
                self._add(f"{i}.bias", (spec.features,), rng, "zeros")
                shape = (spec.features,)
            elif spec.kind == "batch_norm":
                c = shape[-1]
                self._add(f"{i}.gamma", (c,), rng, "ones")
                self._add(f"{i}.beta", (c,), rng, "zeros")
                self.buffers[i] = {"mean": np.zeros(c), "var": np.ones(c)}
            elif spec.kind == "concat":
                if len(shape) == 3 and shape[:2] == self.input_shape[:2]:
                    shape = shape[:2] + (shape[2] + self.input_shape[2],)
                else:
                    shape = (int(np.prod(shape)) + flat_input,)
        return tuple(shape)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(
        self,
        x,
        mode: Literal["train", "infer"] = "infer",
        rng: np.random.Generator | None = None,
        *,
        update_stats: bool = False,
        frozen: bool = False,
    ) -> Tensor:
        """Evaluate the stack on a batch ``N x input_shape``.

        ``frozen`` evaluates with constant copies of the parameters so no gradient
        reaches them; ``update_stats`` lets train-mode batch norm refresh its
        running statistics.
        """
        x = as_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"network expects N x {self.input_shape} input, got {x.shape}")
        p = {k: Tensor(v.data) for k, v in self.params.items()} if frozen else self.params
        h = x
        for i, spec in enumerate(self.specs):
            kind = spec.kind
            if kind == "conv2d":
                h = nn.conv2d(h, p[f"{i}.kernel"], spec.stride, spec.padding) + p[f"{i}.bias"]
            elif kind == "conv2d_transpose":
                h = nn.conv2d_transpose(h, p[f"{i}.kernel"], spec.stride, spec.padding) + p[f"{i}.bias"]
            elif kind == "dense":
                h = nn.dense(h, p[f"{i}.weights"], p[f"{i}.bias"])
            elif kind == "batch_norm":
                running = self.buffers[i]
                if mode == "train":
                    h = nn.batch_norm(h, p[f"{i}.gamma"], p[f"{i}.beta"], "train", running if update_stats else None)
                else:
                    h = nn.batch_norm(h, p[f"{i}.gamma"], p[f"{i}.beta"], "infer", running)
            elif kind == "relu":
                h = nn.relu(h)
            elif kind == "leaky_relu":
                h = nn.leaky_relu(h, spec.slope)
            elif kind == "dropout":
                h = nn.dropout(h, spec.rate, mode, rng)
            elif kind == "concat":
                if h.ndim == 4 and h.shape[1:3] == x.shape[1:3]:
                    h = nn.concat([h, x])
                else:
                    h = nn.concat([nn.flatten(h), nn.flatten(x)])
            elif kind == "tanh":
                h = nn.tanh(h)
            elif kind == "sigmoid":
                h = nn.sigmoid(h)
        return h

    __call__ = forward

    # -- serialisation helpers ---------------------------------------------------
    def state_arrays(self, prefix: str) -> list[tuple[str, np.ndarray]]:
        out = [(f"{prefix}/{name}", t.data) for name, t in self.params.items()]
        for i, stats in self.buffers.items():
            out += [(f"{prefix}/{i}.running_mean", stats["mean"]), (f"{prefix}/{i}.running_var", stats["var"])]
        return out

    def describe(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [s.to_dict() for s in self.specs]}

    @classmethod
    def restore(cls, description: dict, arrays: dict[str, np.ndarray], prefix: str) -> "Network":
        net = cls([LayerSpec.from_dict(d) for d in description["layers"]], description["input_shape"], rng=None)
        for name, t in net.params.items():
            key = f"{prefix}/{name}"
            if key not in arrays or arrays[key].shape != t.shape:
                raise CheckpointError(f"checkpoint entry {key} missing or mis-shaped")
            t.data = arrays[key]
        for i, stats in net.buffers.items():
            stats["mean"] = arrays[f"{prefix}/{i}.running_mean"]
            stats["var"] = arrays[f"{prefix}/{i}.running_var"]
        return net


def build_generator(cfg: ModelConfig, rng: np.random.Generator) -> Network:
    return Network(generator_specs(cfg), cfg.g_input_shape, rng)


def build_discriminator(cfg: ModelConfig, rng: np.random.Generator) -> Network:
    return Network(discriminator_specs(cfg), cfg.d_input_shape, rng)


@dataclass
class GAN:
    """Generator/discriminator pair (the learnable state of a forecaster)."""

    config: ModelConfig
    generator: Network
    discriminator: Network
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int) -> "GAN":
        g_seq, d_seq = np.random.SeedSequence(seed).spawn(2)
        return cls(
            cfg,
            build_generator(cfg, np.random.default_rng(g_seq)),
            build_discriminator(cfg, np.random.default_rng(d_seq)),
        )

    def save(self, path) -> None:
        meta = {
            "model_config": self.config.to_dict(),
            "generator": self.generator.describe(),
            "discriminator": self.discriminator.describe(),
            **self.meta,
        }
        save_arrays(path, meta, self.generator.state_arrays("G") + self.discriminator.state_arrays("D"))

    @classmethod
    def load(cls, path) -> "GAN":
        meta, arrays = load_arrays(path)
        meta = dict(meta)
        cfg = ModelConfig.from_dict(meta.pop("model_config"))
        g = Network.restore(meta.pop("generator"), arrays, "G")
        d = Network.restore(meta.pop("discriminator"), arrays, "D")
        return cls(cfg, g, d, meta)


def generator_forward(G: Network, history, mode: Literal["train", "infer"] = "infer", **kwargs) -> Tensor:
    """Forecast matrices ``N x m x n`` (or ``m x n`` for an unbatched history)."""
    history = as_tensor(history)
    single = history.ndim == 3
    if single:
        history = history.reshape((1,) + history.shape)
    out = G.forward(history, mode, **kwargs)
    out = out.reshape(out.shape[:3])
    return out.reshape(out.shape[1:]) if single else out


def discriminator_input(history, candidate) -> Tensor:
    """Stack a history window and a candidate next step along the channel axis."""
    history, candidate = as_tensor(history), as_tensor(candidate)
    if candidate.ndim == history.ndim - 1:
        candidate = candidate.reshape(candidate.shape + (1,))
    return nn.concat([history, candidate])


def discriminator_forward(D: Network, history, candidate, mode: Literal["train", "infer"] = "infer", **kwargs) -> Tensor:
    """Probability (one per sample) that ``candidate`` is the true next step."""
    joined = discriminator_input(history, candidate)
    single = joined.ndim == 3
    if single:
        joined = joined.reshape((1,) + joined.shape)
    out = D.forward(joined, mode, **kwargs).reshape(-1)
    return out.reshape(()) if single else out
