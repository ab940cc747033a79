"""Quality networks: shared-weight feature extractor, fusion, and regression heads.

Four configurations are covered by :class:`ModelConfig`:

=============  ====  =========
model          task  pooling
=============  ====  =========
DIQaM-FR       fr    average
WaDIQaM-FR     fr    weighted
DIQaM-NR       nr    average
WaDIQaM-NR     nr    weighted
=============  ====  =========
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .nn import (
    DimensionError,
    ParamSet,
    Tensor,
    concat,
    conv3x3_nhwc,
    dropout,
    he_normal,
    linear,
    maxpool2x2_nhwc,
    relu,
    reshape,
    transpose,
)

PATCH_SIZE = 32

# "M" is a 2x2 max-pool, integers are conv3 output channels
FULL_LAYERS = (32, 32, "M", 64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M")
# The published shallow listing has four pools, leaving a 2x2x256 map; the trailing
# pool collapses it to the 256-vector the regression head (FC-256) is sized for.
SHALLOW_LAYERS = (32, 32, "M", 64, "M", 128, "M", 256, "M", "M")

TASKS = ("fr", "nr")
POOLINGS = ("average", "weighted")
FUSIONS = ("diff", "concat", "concat_diff")
DEPTHS = ("full", "shallow")


class ConfigError(ValueError):
    """Inconsistent model configuration or an op used outside its configuration."""


@dataclass(frozen=True)
class ModelConfig:
    task: str = "nr"
    pooling: str = "average"
    fusion: str | None = None
    depth: str = "full"
    epsilon: float = 1e-6
    dropout_keep: float = 0.5
    patch_size: int = field(default=PATCH_SIZE)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.depth not in DEPTHS:
            raise ConfigError(f"depth must be one of {DEPTHS}, got {self.depth!r}")
        if self.task == "fr":
            if self.fusion is None:
                object.__setattr__(self, "fusion", "diff")
            elif self.fusion not in FUSIONS:
                raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        elif self.fusion is not None:
            raise ConfigError("NR models take no fusion scheme")
        if self.patch_size != PATCH_SIZE:
            raise ConfigError(f"patch size is fixed at {PATCH_SIZE}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ConfigError("dropout_keep must lie in (0, 1]")

    @property
    def name(self) -> str:
        prefix = "WaDIQaM" if self.pooling == "weighted" else "DIQaM"
        return f"{prefix}-{self.task.upper()}"

    @property
    def layers(self) -> tuple:
        return FULL_LAYERS if self.depth == "full" else SHALLOW_LAYERS

    @property
    def feature_dim(self) -> int:
        return 512 if self.depth == "full" else 256

    @property
    def fused_dim(self) -> int:
        d = self.feature_dim
        return {None: d, "diff": d, "concat": 2 * d, "concat_diff": 3 * d}[self.fusion]

    def to_dict(self) -> dict[str, str]:
        return {k: ("" if v is None else str(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "ModelConfig":
        return cls(
            task=values.get("task", "nr"),
            pooling=values.get("pooling", "average"),
            fusion=values.get("fusion") or None,
            depth=values.get("depth", "full"),
            epsilon=float(values.get("epsilon", 1e-6)),
            dropout_keep=float(values.get("dropout_keep", 0.5)),
            patch_size=int(values.get("patch_size", PATCH_SIZE)),
        )


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list of every parameter the configuration implies."""
    shapes = []
    c_in, idx = 3, 0
    for item in config.layers:
        if item == "M":
            continue
        idx += 1
        shapes.append((f"feat.conv{idx}.weight", (item, c_in, 3, 3)))
        shapes.append((f"feat.conv{idx}.bias", (item,)))
        c_in = item
    hidden = config.feature_dim
    heads = ["quality", "weight"] if config.pooling == "weighted" else ["quality"]
    for head in heads:
        shapes.append((f"{head}.fc1.weight", (hidden, config.fused_dim)))
        shapes.append((f"{head}.fc1.bias", (hidden,)))
        shapes.append((f"{head}.fc2.weight", (1, hidden)))
        shapes.append((f"{head}.fc2.bias", (1,)))
    return shapes


def count_params(config: ModelConfig) -> int:
    return int(sum(np.prod(shape) for _, shape in param_shapes(config)))


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    params = ParamSet()
    for name, shape in param_shapes(config):
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = he_normal(shape, int(np.prod(shape[1:])), rng, dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def extract_features(patches: Tensor, params: ParamSet, config: ModelConfig) -> Tensor:
    """Run the conv/pool stack on ``[3,32,32]`` or ``[N,3,32,32]`` patches -> ``[D]`` or ``[N,D]``."""
    single = patches.data.ndim == 3
    x = reshape(patches, (1,) + patches.shape) if single else patches
    if x.data.ndim != 4 or x.shape[1:] != (3, PATCH_SIZE, PATCH_SIZE):
        raise DimensionError(f"patches must be [N,3,{PATCH_SIZE},{PATCH_SIZE}], got {patches.shape}")
    # channels-last internally; the final map is 1x1 so the flattened order is just channels
    x = transpose(x, (0, 2, 3, 1))
    idx = 0
    for item in config.layers:
        if item == "M":
            x = maxpool2x2_nhwc(x)
        else:
            idx += 1
            x = relu(conv3x3_nhwc(x, params[f"feat.conv{idx}.weight"], params[f"feat.conv{idx}.bias"]))
    x = reshape(x, (x.shape[0], -1))
    return reshape(x, (x.shape[1],)) if single else x


def fuse_features(f_r: Tensor | None, f_d: Tensor, scheme: str | None) -> Tensor:
    if f_r is None or scheme is None:
        raise ConfigError("feature fusion only applies to full-reference models")
    if f_r.shape != f_d.shape:
        raise DimensionError(f"reference/distorted feature shapes differ: {f_r.shape} vs {f_d.shape}")
    if scheme == "diff":
        return f_r - f_d
    if scheme == "concat":
        return concat([f_r, f_d], axis=-1)
    if scheme == "concat_diff":
        return concat([f_r, f_d, f_r - f_d], axis=-1)
    raise ConfigError(f"unknown fusion scheme {scheme!r}")


def _head(fused: Tensor, params: ParamSet, prefix: str, keep: float, train: bool, rng) -> Tensor:
    hidden = relu(linear(fused, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    hidden = dropout(hidden, keep, train, rng)
    out = linear(hidden, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])
    return reshape(out, out.shape[:-1])


def regress_quality(fused: Tensor, params: ParamSet, config: ModelConfig, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """FC -> ReLU -> dropout -> FC-1; one local quality per row of ``fused``."""
    return _head(fused, params, "quality", config.dropout_keep, train, rng)


def stabilize_weight(alpha: Tensor, epsilon: float) -> Tensor:
    return relu(alpha) + epsilon


def regress_weight(fused: Tensor, params: ParamSet, config: ModelConfig, train: bool = False,
                   rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Raw weight ``alpha`` and its strictly positive form ``max(0, alpha) + epsilon``."""
    if config.pooling != "weighted":
        raise ConfigError("weight branch exists only with weighted pooling")
    alpha = _head(fused, params, "weight", config.dropout_keep, train, rng)
    return alpha, stabilize_weight(alpha, config.epsilon)


class PatchOutputs(NamedTuple):
    quality: Tensor
    raw_weight: Tensor | None
    weight: Tensor | None


class QualityNet:
    """Binds a configuration to a parameter set."""

    def __init__(self, config: ModelConfig, params: ParamSet):
        expected = param_shapes(config)
        if [n for n, _ in expected] != list(params.keys()):
            raise ConfigError("parameter names do not match the configuration")
        for name, shape in expected:
            if params[name].shape != shape:
                raise DimensionError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> "QualityNet":
        return cls(config, init_params(config, rng, dtype))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def features(self, patches) -> Tensor:
        return extract_features(self._as_input(patches), self.params, self.config)

    def _as_input(self, patches) -> Tensor:
        if isinstance(patches, Tensor):
            return patches
        return Tensor(np.asarray(patches, dtype=self.dtype))

    def forward(self, distorted, reference=None, train: bool = False, rng: np.random.Generator | None = None,
                ref_transform: Callable[[np.ndarray], np.ndarray] | None = None) -> PatchOutputs:
        """Per-patch outputs for ``[N,3,32,32]`` distorted (and, for FR, aligned reference) patches.

        ``ref_transform`` maps the reference feature matrix to a replacement
        (used for PCA reduction); it is applied outside the gradient graph.
        """
        cfg = self.config
        f_d = self.features(distorted)
        if cfg.task == "fr":
            if reference is None:
                raise ConfigError("full-reference model needs reference patches")
            f_r = self.features(reference)
            if ref_transform is not None:
                f_r = Tensor(np.asarray(ref_transform(f_r.data), dtype=f_r.dtype))
            fused = fuse_features(f_r, f_d, cfg.fusion)
        else:
            fused = f_d
        y = regress_quality(fused, self.params, cfg, train, rng)
        if cfg.pooling == "weighted":
            alpha, alpha_star = regress_weight(fused, self.params, cfg, train, rng)
            return PatchOutputs(y, alpha, alpha_star)
        return PatchOutputs(y, None, None)
