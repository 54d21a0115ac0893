"""Duel classifier: a small CNN over stacked optical-flow fields.

Each sample is a 4-channel 64x64 tensor (u and v planes of two
consecutive flow fields). Convolution stages use same-padding 3x3
kernels with 2x2 max pooling between stages; the post-activation maps of
one stage are kept as the saliency tap. Dense layers reduce to a single
logit, and sigmoid gives P(Unstable).

Parameters are plain float64 arrays so checkpoints round-trip exactly;
each forward pass records a fresh tape for reverse-mode gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import Config
from .errors import FormatError, ShapeError, ValidationError
from .io_formats import (checkpoint_bytes, parse_checkpoint, read_checkpoint,
                         write_bytes_atomic)

CHECKPOINT_KIND = "swarmlens-model"
CLASS_NAMES = ("stable", "unstable")  # index matches the episode label


@dataclass(frozen=True)
class ModelSpec:
    """Architecture constants; the default matches the trained classifier."""

    in_channels: int = 4
    input_size: int = 64
    conv_channels: tuple[int, ...] = (8, 16, 32, 64)
    kernel: int = 3
    dense_units: tuple[int, ...] = (128, 32)
    tap_stage: int = 4

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "dense_units", tuple(self.dense_units))
        if self.in_channels < 1:
            raise ValidationError(f"in_channels must be >= 1, got {self.in_channels}")
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ValidationError(f"bad conv_channels {self.conv_channels}")
        if any(u < 1 for u in self.dense_units):
            raise ValidationError(f"bad dense_units {self.dense_units}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError(
                f"kernel must be odd for same-padding convolution, got {self.kernel}")
        if not 1 <= self.tap_stage <= len(self.conv_channels):
            raise ValidationError(
                f"tap_stage {self.tap_stage} outside 1..{len(self.conv_channels)}")
        pools = 2 ** (len(self.conv_channels) - 1)
        if self.input_size < pools or self.input_size % pools:
            raise ValidationError(
                f"input_size {self.input_size} not divisible by the "
                f"{len(self.conv_channels) - 1} pooling stages (x{pools})")

    @classmethod
    def from_config(cls, cfg: Config) -> "ModelSpec":
        return cls(input_size=int(cfg.get("flow", "size")),
                   conv_channels=tuple(cfg.int_list("model", "conv_channels")),
                   kernel=int(cfg.get("model", "kernel")),
                   dense_units=tuple(cfg.int_list("model", "dense_units")),
                   tap_stage=int(cfg.get("model", "tap_stage")))

    def stage_size(self, stage: int) -> int:
        """Spatial width of the feature maps produced by conv stage (1-based)."""
        return self.input_size // 2 ** (stage - 1)

    @property
    def tap_shape(self) -> tuple[int, int, int]:
        side = self.stage_size(self.tap_stage)
        return (self.conv_channels[self.tap_stage - 1], side, side)

    @property
    def flat_size(self) -> int:
        return self.conv_channels[-1] * self.stage_size(len(self.conv_channels)) ** 2

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes: list[tuple[str, tuple[int, ...]]] = []
        c_in = self.in_channels
        for i, c_out in enumerate(self.conv_channels, start=1):
            shapes.append((f"conv{i}.weight", (c_out, c_in, self.kernel, self.kernel)))
            shapes.append((f"conv{i}.bias", (c_out,)))
            c_in = c_out
        n_in = self.flat_size
        for i, n_out in enumerate((*self.dense_units, 1), start=1):
            shapes.append((f"dense{i}.weight", (n_out, n_in)))
            shapes.append((f"dense{i}.bias", (n_out,)))
            n_in = n_out
        return shapes

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.param_shapes())


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """He-initialized weights (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return Model(spec, params)


@dataclass
class ForwardPass:
    """One recorded forward evaluation; gradients come from its tape."""

    graph: ad.Graph
    x: ad.Tensor
    params: dict[str, ad.Tensor]
    tap: ad.Tensor
    logit: ad.Tensor
    prob: ad.Tensor

    @property
    def prob_value(self) -> float:
        return float(self.prob.data[0])

    @property
    def logit_value(self) -> float:
        return float(self.logit.data[0])


def forward_with_cache(model: Model, x: np.ndarray) -> ForwardPass:
    """Run the network on one sample, keeping the tape and the tap maps."""
    spec = model.spec
    x = np.asarray(x, dtype=np.float64)
    want = (spec.in_channels, spec.input_size, spec.input_size)
    if x.shape != want:
        raise ShapeError(f"input shape {x.shape} does not match {want}")
    if not np.isfinite(x).all():
        raise ValidationError("input contains non-finite values")

    g = ad.Graph()
    xt = g.leaf(x)
    pt = {name: g.leaf(arr, requires_grad=True) for name, arr in model.params.items()}

    h = xt
    tap = None
    n_conv = len(spec.conv_channels)
    for i in range(1, n_conv + 1):
        h = ad.relu(ad.conv2d(h, pt[f"conv{i}.weight"], pt[f"conv{i}.bias"],
                              pad=spec.kernel // 2))
        if i == spec.tap_stage:
            tap = h  # post-activation, before any pooling
        if i < n_conv:
            h, _ = ad.maxpool2d(h, 2, 2)

    h = ad.flatten(h)
    n_dense = len(spec.dense_units) + 1
    for i in range(1, n_dense + 1):
        h = ad.dense(h, pt[f"dense{i}.weight"], pt[f"dense{i}.bias"])
        if i < n_dense:
            h = ad.relu(h)
    logit = h
    prob = ad.sigmoid(logit)
    return ForwardPass(graph=g, x=xt, params=pt, tap=tap, logit=logit, prob=prob)


def class_score(fp: ForwardPass, target_class: str) -> ad.Tensor:
    """Scalar score whose gradient explains the chosen class.

    "unstable" is the logit itself; "stable" is its negation, so the two
    saliency directions are exact opposites.
    """
    name = target_class.strip().lower()
    if name == "unstable":
        return fp.logit
    if name == "stable":
        return ad.scale(fp.logit, -1.0)
    raise ValidationError(f"target_class must be one of {CLASS_NAMES}, got {target_class!r}")


def predict(model: Model, x: np.ndarray) -> float:
    return forward_with_cache(model, x).prob_value


def _spec_constants(spec: ModelSpec) -> dict:
    return {"kind": CHECKPOINT_KIND,
            "in_channels": spec.in_channels,
            "input_size": spec.input_size,
            "conv_channels": list(spec.conv_channels),
            "kernel": spec.kernel,
            "dense_units": list(spec.dense_units),
            "tap_stage": spec.tap_stage}


def model_bytes(model: Model) -> bytes:
    params = [(name, model.params[name]) for name, _ in model.spec.param_shapes()]
    return checkpoint_bytes(_spec_constants(model.spec), params)


def save_model(model: Model, path) -> None:
    write_bytes_atomic(path, model_bytes(model))


def _model_from_parsed(constants: dict, params: dict[str, np.ndarray], path) -> Model:
    if constants.get("kind") != CHECKPOINT_KIND:
        raise FormatError(f"{path}: not a model checkpoint "
                          f"(kind={constants.get('kind')!r})")
    try:
        spec = ModelSpec(in_channels=int(constants["in_channels"]),
                         input_size=int(constants["input_size"]),
                         conv_channels=tuple(constants["conv_channels"]),
                         kernel=int(constants["kernel"]),
                         dense_units=tuple(constants["dense_units"]),
                         tap_stage=int(constants["tap_stage"]))
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise FormatError(f"{path}: bad architecture constants: {exc}") from exc
    expected = spec.param_shapes()
    if [n for n, _ in expected] != list(params):
        raise FormatError(f"{path}: parameter names do not match the architecture")
    for name, shape in expected:
        if params[name].shape != shape:
            raise FormatError(f"{path}: parameter {name} has shape "
                              f"{params[name].shape}, expected {shape}")
    return Model(spec, params)


def load_model(path) -> Model:
    constants, params = read_checkpoint(path)
    return _model_from_parsed(constants, params, path)


def model_from_bytes(data: bytes) -> Model:
    constants, params = parse_checkpoint(data)
    return _model_from_parsed(constants, params, "<bytes>")
