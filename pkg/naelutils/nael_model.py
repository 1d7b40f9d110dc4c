# coding: utf-8
"""
The three networks of the noise-aware ensemble and the routing between them.

- PRN, the preliminary recognizer: SC block, FE stages, CE block, then global average pooling and a fully connected classifier.
- NAN, the noise-aware gate: a small fully connected classifier telling from the PRN gradient map whether the PRN decision is reliable.
- ARN, the advanced recognizer: deeper FE stages fed by an intermediate PRN output, only run when NAN flags the PRN decision as unreliable.

Gradient maps follow the usual class-activation recipe: channel importances are the spatially averaged gradients of the top logit with respect to the CE output, and the map is the rectified importance-weighted channel sum.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import polars as pl

from .definitions import (
    CLASS_NAMES,
    DEFAULT_SEED,
    DTYPE,
    NUM_CLASSES,
    VERDICTS,
    ContractError,
    DependencyError,
    GraphStateError,
    ParameterDomainError,
    ShapeError,
)
from .tensor_nn import (
    BatchNorm,
    DwConv2d,
    FlopsReport,
    LayerSpec,
    Linear,
    Module,
    PwConv2d,
    ScConv2d,
    Tensor,
    gap,
    grad,
    load_checkpoint,
    no_grad,
    relu6,
    save_checkpoint,
    softmax,
)
from .tfa import TFI

NETWORKS = ("prn", "nan", "arn")
RELIABLE, UNRELIABLE = 0, 1


@dataclass(frozen=True)
class FEStageConfig:
    """
    One FE stage: a first block changing channels (and maybe resolution), then `repeats - 1` residual blocks.

    Attributes
    ----------
    c_out : int
        Output channels
    alpha : int
        Channel expansion factor of the pointwise expansion
    repeats : int
        Number of blocks in the stage, at least 1
    stride : int
        Stride of the first block, 1 or 2
    """

    c_out: int
    alpha: int
    repeats: int
    stride: int

    def __post_init__(self) -> None:
        if self.c_out < 1 or self.alpha < 1 or self.repeats < 1:
            raise ParameterDomainError(f"invalid FE stage {self}")
        if self.stride not in (1, 2):
            raise ParameterDomainError(f"FE stage stride must be 1 or 2, got {self.stride}")


PRN_STAGES = (FEStageConfig(24, 2, 2, 2), FEStageConfig(32, 2, 2, 2), FEStageConfig(64, 2, 2, 2))
ARN_STAGES = (FEStageConfig(48, 4, 3, 2), FEStageConfig(96, 4, 3, 2), FEStageConfig(160, 4, 3, 2))


@dataclass(frozen=True)
class NetworkConfig:
    """
    Layout of the three networks. The default is the full 128x128 layout, `compact()` a 32x32 one for smoke runs and tests.

    Raises
    ------
    ParameterDomainError
        If the layout breaks one of the structural requirements: the PRN feature map must be 8x8 and match the NAN input, the ARN must end smaller and deeper than the PRN, and every ARN expansion factor must exceed every PRN one.
    """

    input_shape: tuple[int, int, int] = (1, 128, 128)
    sc_channels: int = 16
    sc_stride: int = 2
    prn_stages: tuple[FEStageConfig, ...] = PRN_STAGES
    prn_ce_channels: int = 256
    arn_reuse_point: int = 0
    arn_stages: tuple[FEStageConfig, ...] = ARN_STAGES
    arn_ce_channels: int = 512
    nan_dims: tuple[int, ...] = (64, 256, 512, 2)
    num_classes: int = NUM_CLASSES

    def __post_init__(self) -> None:
        object.__setattr__(self, "prn_stages", tuple(self.prn_stages))
        object.__setattr__(self, "arn_stages", tuple(self.arn_stages))
        if not self.prn_stages or not self.arn_stages:
            raise ParameterDomainError("PRN and ARN need at least one FE stage each")
        if not 0 <= self.arn_reuse_point < len(self.prn_stages):
            raise ParameterDomainError(f"ARN reuse point {self.arn_reuse_point} is not a PRN stage")
        _, prn_h, prn_w = self.feature_shape
        if (prn_h, prn_w) != (8, 8):
            raise ParameterDomainError(f"the PRN feature map must be 8x8, this layout gives {prn_h}x{prn_w}")
        if self.nan_dims[0] != prn_h * prn_w or self.nan_dims[-1] != 2 or len(self.nan_dims) < 3:
            raise ParameterDomainError(f"NAN dims {self.nan_dims} must go from {prn_h * prn_w} to 2 through hidden layers")
        arn_c, arn_h, arn_w = self.arn_stage_shapes[-1]
        prn_c = self.prn_stages[-1].c_out
        if not (arn_h < prn_h and arn_w < prn_w and arn_c > prn_c):
            raise ParameterDomainError("the ARN must end spatially smaller and deeper than the PRN")
        if min(s.alpha for s in self.arn_stages) <= max(s.alpha for s in self.prn_stages):
            raise ParameterDomainError("every ARN expansion factor must exceed every PRN one")

    @classmethod
    def compact(cls) -> "NetworkConfig":
        """32x32 input, narrow stages, same structure"""
        return cls(
            input_shape=(1, 32, 32),
            sc_channels=8,
            prn_stages=(FEStageConfig(12, 2, 1, 2), FEStageConfig(16, 2, 2, 1)),
            prn_ce_channels=32,
            arn_stages=(FEStageConfig(24, 3, 2, 2),),
            arn_ce_channels=48,
            nan_dims=(64, 32, 32, 2),
        )

    @cached_property
    def prn_stage_shapes(self) -> list[tuple[int, int, int]]:
        _, h, w = self.input_shape
        h, w = _halve(h, self.sc_stride), _halve(w, self.sc_stride)
        shapes = []
        for stage in self.prn_stages:
            h, w = _halve(h, stage.stride), _halve(w, stage.stride)
            shapes.append((stage.c_out, h, w))
        return shapes

    @cached_property
    def arn_stage_shapes(self) -> list[tuple[int, int, int]]:
        _, h, w = self.prn_stage_shapes[self.arn_reuse_point]
        shapes = []
        for stage in self.arn_stages:
            h, w = _halve(h, stage.stride), _halve(w, stage.stride)
            shapes.append((stage.c_out, h, w))
        return shapes

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        _, h, w = self.prn_stage_shapes[-1]
        return self.prn_ce_channels, h, w


def _halve(size: int, stride: int) -> int:
    # 3x3 kernel, padding 1
    return (size - 1) // stride + 1


def _chain(layers: Sequence[Module | str], in_shape: tuple[int, ...], prefix: str):
    """Static costs of a sequence of layers, "relu6" standing for the activation"""
    rows, shape = [], in_shape
    for layer in layers:
        if layer == "relu6":
            spatial = shape[1:] if len(shape) == 3 else (1, 1)
            rows.append((prefix + "relu6", LayerSpec("relu6", shape[0], shape[0]), *spatial))
            continue
        new_rows, shape = layer.describe(shape, prefix)
        rows.extend(new_rows)
    return rows, shape


class ScBlock(Module):
    """3x3 standard convolution (padding 1), BN, ReLU6"""

    def __init__(self, c_in: int, c_out: int, stride: int = 2, rng=None, dtype=DTYPE) -> None:
        self.conv = ScConv2d(c_in, c_out, 3, stride, 1, rng, dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        c_in = self.conv.weight.shape[1]
        if x.ndim != 4 or x.shape[1] != c_in:
            raise ShapeError(f"SC block expects (N, {c_in}, H, W), got {x.shape}")
        return relu6(self.bn(self.conv(x)))

    def describe(self, in_shape, prefix=""):
        return _chain([self.conv, self.bn, "relu6"], in_shape, prefix)


class FEFirstStage(Module):
    """
    First block of an FE stage: pointwise expansion by alpha (BN, ReLU6), 3x3 depthwise with the stage stride (BN, ReLU6), linear pointwise projection (BN). No skip connection.
    """

    def __init__(self, c_in: int, c_out: int, alpha: int, stride: int, rng=None, dtype=DTYPE) -> None:
        hidden = alpha * c_in
        self.expand = PwConv2d(c_in, hidden, rng, dtype)
        self.bn_expand = BatchNorm(hidden, dtype=dtype)
        self.dw = DwConv2d(hidden, 3, stride, 1, rng, dtype)
        self.bn_dw = BatchNorm(hidden, dtype=dtype)
        self.project = PwConv2d(hidden, c_out, rng, dtype)
        self.bn_project = BatchNorm(c_out, dtype=dtype)

    def residual(self, x: Tensor) -> Tensor:
        h = relu6(self.bn_expand(self.expand(x)))
        h = relu6(self.bn_dw(self.dw(h)))
        return self.bn_project(self.project(h))

    def forward(self, x: Tensor) -> Tensor:
        return self.residual(x)

    def describe(self, in_shape, prefix=""):
        layers = [self.expand, self.bn_expand, "relu6", self.dw, self.bn_dw, "relu6", self.project, self.bn_project]
        return _chain(layers, in_shape, prefix)


class FERepeatStage(FEFirstStage):
    """Residual FE block: same path at stride 1 projected back to the input channels, plus the input"""

    def __init__(self, channels: int, alpha: int, rng=None, dtype=DTYPE) -> None:
        super().__init__(channels, channels, alpha, 1, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.residual(x) + x


class FEBlock(Module):
    def __init__(self, c_in: int, stage: FEStageConfig, rng=None, dtype=DTYPE) -> None:
        self.blocks = [FEFirstStage(c_in, stage.c_out, stage.alpha, stage.stride, rng, dtype)] + [
            FERepeatStage(stage.c_out, stage.alpha, rng, dtype) for _ in range(stage.repeats - 1)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def describe(self, in_shape, prefix=""):
        rows, shape = [], in_shape
        for i, block in enumerate(self.blocks):
            new_rows, shape = block.describe(shape, f"{prefix}blocks.{i}.")
            rows.extend(new_rows)
        return rows, shape


class CEBlock(Module):
    """1x1 convolution to `c_e` channels, BN, ReLU6"""

    def __init__(self, c_in: int, c_e: int, rng=None, dtype=DTYPE) -> None:
        self.pw = PwConv2d(c_in, c_e, rng, dtype)
        self.bn = BatchNorm(c_e, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu6(self.bn(self.pw(x)))

    def describe(self, in_shape, prefix=""):
        return _chain([self.pw, self.bn, "relu6"], in_shape, prefix)


class ClassifierHead(Module):
    """Global average pooling then a fully connected layer to the class logits"""

    def __init__(self, c_e: int, num_classes: int, rng=None, dtype=DTYPE) -> None:
        self.fc = Linear(c_e, num_classes, rng, dtype)

    def forward(self, feature_map: Tensor) -> Tensor:
        return self.fc(gap(feature_map))

    def describe(self, in_shape, prefix=""):
        pooled = [(prefix + "gap", LayerSpec("gap", in_shape[0], in_shape[0]), 1, 1)]
        rows, shape = self.fc.describe((in_shape[0],), prefix)
        softmax_row = [(prefix + "softmax", LayerSpec("softmax", shape[0], shape[0]), 1, 1)]
        return pooled + rows + softmax_row, shape


@dataclass
class PRNOutput:
    """
    Attributes
    ----------
    logits : Tensor
        (N, classes), pre-softmax
    probabilities : np.ndarray
        (N, classes)
    feature_map : Tensor
        CE output F, (N, C_e, 8, 8)
    intermediates : list[Tensor]
        Output of every FE stage
    """

    logits: Tensor
    probabilities: np.ndarray
    feature_map: Tensor
    intermediates: list[Tensor]


class PRN(Module):
    def __init__(self, config: NetworkConfig, rng=None, dtype=DTYPE) -> None:
        rng = np.random.default_rng(rng)
        self.sc = ScBlock(config.input_shape[0], config.sc_channels, config.sc_stride, rng, dtype)
        c_in, stages = config.sc_channels, []
        for stage in config.prn_stages:
            stages.append(FEBlock(c_in, stage, rng, dtype))
            c_in = stage.c_out
        self.stages = stages
        self.ce = CEBlock(c_in, config.prn_ce_channels, rng, dtype)
        self.head = ClassifierHead(config.prn_ce_channels, config.num_classes, rng, dtype)

    def body(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Feature map F and the FE stage outputs"""
        h = self.sc(x)
        intermediates = []
        for stage in self.stages:
            h = stage(h)
            intermediates.append(h)
        return self.ce(h), intermediates

    def forward(self, x: Tensor) -> PRNOutput:
        feature_map, intermediates = self.body(x)
        logits = self.head(feature_map)
        return PRNOutput(logits, softmax(logits), feature_map, intermediates)

    def describe(self, in_shape, prefix=""):
        rows, shape = self.sc.describe(in_shape, prefix + "sc.")
        for i, stage in enumerate(self.stages):
            new_rows, shape = stage.describe(shape, f"{prefix}stages.{i}.")
            rows.extend(new_rows)
        for name, module in (("ce", self.ce), ("head", self.head)):
            new_rows, shape = module.describe(shape, f"{prefix}{name}.")
            rows.extend(new_rows)
        return rows, shape


class ARN(Module):
    def __init__(self, config: NetworkConfig, rng=None, dtype=DTYPE) -> None:
        rng = np.random.default_rng(rng)
        c_in, stages = config.prn_stages[config.arn_reuse_point].c_out, []
        for stage in config.arn_stages:
            stages.append(FEBlock(c_in, stage, rng, dtype))
            c_in = stage.c_out
        self.stages = stages
        self.ce = CEBlock(c_in, config.arn_ce_channels, rng, dtype)
        self.head = ClassifierHead(config.arn_ce_channels, config.num_classes, rng, dtype)

    def forward(self, reused: Tensor) -> Tensor:
        h = reused
        for stage in self.stages:
            h = stage(h)
        return self.head(self.ce(h))

    def describe(self, in_shape, prefix=""):
        rows, shape = [], in_shape
        for i, stage in enumerate(self.stages):
            new_rows, shape = stage.describe(shape, f"{prefix}stages.{i}.")
            rows.extend(new_rows)
        for name, module in (("ce", self.ce), ("head", self.head)):
            new_rows, shape = module.describe(shape, f"{prefix}{name}.")
            rows.extend(new_rows)
        return rows, shape


class NAN(Module):
    """Flattened gradient map through fully connected layers with BN and ReLU6, ending on (reliable, unreliable) logits"""

    def __init__(self, dims: Sequence[int] = (64, 256, 512, 2), rng=None, dtype=DTYPE) -> None:
        rng = np.random.default_rng(rng)
        self.hidden = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-2], dims[1:-1])]
        self.norms = [BatchNorm(b, dtype=dtype) for b in dims[1:-1]]
        self.out = Linear(dims[-2], dims[-1], rng, dtype)

    def forward(self, maps: Tensor) -> Tensor:
        h = maps.reshape(maps.shape[0], -1)
        for linear, norm in zip(self.hidden, self.norms):
            h = relu6(norm(linear(h)))
        return self.out(h)

    def describe(self, in_shape, prefix=""):
        rows, shape = [], (int(np.prod(in_shape)),)
        for i, (linear, norm) in enumerate(zip(self.hidden, self.norms)):
            new_rows, shape = _chain([linear, norm, "relu6"], shape, f"{prefix}hidden.{i}.")
            rows.extend(new_rows)
        new_rows, shape = self.out.describe(shape, prefix + "out.")
        rows.extend(new_rows)
        rows.append((prefix + "softmax", LayerSpec("softmax", shape[0], shape[0]), 1, 1))
        return rows, shape


def f_max(gradient_map: "GradientMap | np.ndarray") -> int:
    """
    Frequency row with the largest time-summed activation, ties to the lowest row.

    Examples
    --------
    >>> f_max(np.ones((8, 8)))
    0
    """
    values = gradient_map.values if isinstance(gradient_map, GradientMap) else np.asarray(gradient_map)
    if values.ndim != 2:
        raise ShapeError(f"a gradient map is 2D, got shape {values.shape}")
    return int(np.argmax(values.sum(axis=1)))


@dataclass
class GradientMap:
    """
    Rectified class-activation map over (frequency, time), frequency along rows.

    Attributes
    ----------
    values : np.ndarray
        (8, 8), nonnegative
    class_index : int
        Class whose logit was differentiated
    f_max : int
        Row of the largest time-summed activation
    """

    values: np.ndarray
    class_index: int
    f_max: int = field(init=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        self.f_max = f_max(self.values)

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(self.values, schema=[f"t{i}" for i in range(self.values.shape[1])], orient="row")


def importance_weights(
    feature_map: Tensor,
    logits: Tensor,
    classes: Sequence[int] | None = None,
) -> np.ndarray:
    """
    Spatial mean of the gradient of each sample's class logit with respect to the feature map.

    Parameters
    ----------
    feature_map : Tensor
        (N, C, H, W), a leaf requiring gradients or an intermediate with `retain_grad`
    logits : Tensor
        (N, classes), computed from `feature_map` with graph recording on
    classes : Sequence[int], optional
        Class per sample, by default the top logit

    Returns
    -------
    np.ndarray
        (N, C) importance weights

    Raises
    ------
    GraphStateError
        If no recorded forward pass links the feature map to the logits
    """
    if logits._ctx is None:
        raise GraphStateError("importance weights need the recorded forward pass of the logits")
    if classes is None:
        classes = logits.data.argmax(axis=1)
    # samples are independent in infer mode, so one reverse pass serves the whole batch
    (feature_grad,) = grad(logits.pick(classes).sum(), [feature_map])
    if feature_grad is None:
        raise GraphStateError("the feature map is not part of the recorded graph")
    return feature_grad.mean(axis=(2, 3))


def gradient_maps(feature_maps: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Batched ReLU(sum_k F^k w(k)), (N, C, H, W) and (N, C) to (N, H, W)"""
    feature_maps = feature_maps.data if isinstance(feature_maps, Tensor) else np.asarray(feature_maps)
    weights = np.asarray(weights)
    if feature_maps.ndim != 4 or weights.shape != feature_maps.shape[:2]:
        raise ShapeError(f"feature maps {feature_maps.shape} and weights {weights.shape} do not conform")
    return np.maximum(np.einsum("nchw,nc->nhw", feature_maps, weights), 0)


def gradient_map(feature_map: np.ndarray | Tensor, weights: np.ndarray, class_index: int) -> GradientMap:
    """Single-sample gradient map from F (C, H, W) and importance weights (C,)"""
    feature_map = feature_map.data if isinstance(feature_map, Tensor) else np.asarray(feature_map)
    weights = np.asarray(weights)
    if feature_map.ndim != 3 or weights.shape != feature_map.shape[:1]:
        raise ShapeError(f"feature map {feature_map.shape} and weights {weights.shape} do not conform")
    return GradientMap(gradient_maps(feature_map[None], weights[None])[0], class_index)


@dataclass
class PRNStageResult:
    """What the PRN stage hands to the rest of the ensemble, for a batch"""

    probabilities: np.ndarray
    predicted: np.ndarray
    maps: np.ndarray
    intermediates: list[Tensor]


@dataclass
class NaelDecision:
    """
    Attributes
    ----------
    predicted_class : int
        Final class, from ARN when it ran
    used_arn : bool
        Whether NAN judged the PRN decision unreliable
    nan_probs : tuple[float, float]
        (reliable, unreliable)
    flops_spent : int
        Multiply-accumulate products of this inference
    prn_class : int
        PRN decision, kept even when ARN overrode it
    f_max : int
        Frequency row of the PRN gradient map
    """

    predicted_class: int
    used_arn: bool
    nan_probs: tuple[float, float]
    flops_spent: int
    prn_class: int
    f_max: int

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.predicted_class]

    @property
    def verdict(self) -> str:
        return VERDICTS[int(self.used_arn)]


class NaelModel(object):
    """
    PRN, NAN and ARN together with the routing logic. All three networks start in eval mode, training puts one of them in train mode at a time.

    Parameters
    ----------
    config : NetworkConfig, optional
        Layout, by default the full 128x128 one
    seed : int, optional
        Seed of the weight initialization
    dtype : optional
        Floating type of parameters and activations
    """

    def __init__(self, config: NetworkConfig | None = None, seed: int = DEFAULT_SEED, dtype=DTYPE) -> None:
        self.config = NetworkConfig() if config is None else config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.prn = PRN(self.config, rng, self.dtype).eval()
        self.nan = NAN(self.config.nan_dims, rng, self.dtype).eval()
        self.arn = ARN(self.config, rng, self.dtype).eval()

    def network(self, name: str) -> Module:
        if name not in NETWORKS:
            raise ParameterDomainError(f"unknown network {name}, choose from {NETWORKS}")
        return getattr(self, name)

    def as_input(self, tfi: TFI | np.ndarray, check_normalized: bool = True) -> Tensor:
        """
        Shapes a TFI, an image, or a batch of images as (N, C, H, W) network input.

        Raises
        ------
        ContractError
            If an input is not normalized
        ShapeError
            If the spatial size does not match the configuration
        """
        if isinstance(tfi, TFI):
            if check_normalized and not tfi.normalized:
                raise ContractError("the PRN expects a normalized TFI")
            values = tfi.values[None, None]
            check_normalized = False
        else:
            values = np.asarray(tfi)
            if values.ndim == 2:
                values = values[None, None]
            elif values.ndim == 3:
                values = values[:, None]
        if values.ndim != 4 or values.shape[1:] != tuple(self.config.input_shape):
            raise ShapeError(f"network input must be {self.config.input_shape}, got {values.shape[1:]}")
        if check_normalized:
            flat = values.reshape(values.shape[0], -1).astype(np.float64)
            if np.any(np.abs(flat.mean(axis=1)) > 1e-3) or np.any(np.abs(flat.var(axis=1) - 1) > 1e-2):
                raise ContractError("the PRN expects normalized TFIs (zero mean, unit variance)")
        return Tensor(values.astype(self.dtype, copy=False))

    def prn_forward(self, tfi: TFI | np.ndarray) -> PRNOutput:
        """
        PRN inference with gradients kept from the feature map to the logits only.

        The returned feature map is a leaf, ready for `importance_weights`.
        """
        x = self.as_input(tfi)
        with no_grad():
            feature_map, intermediates = self.prn.body(x)
        feature_map = Tensor(feature_map.data, requires_grad=True)
        logits = self.prn.head(feature_map)
        return PRNOutput(logits, softmax(logits), feature_map, intermediates)

    def prn_stage(self, tfi: TFI | np.ndarray) -> PRNStageResult:
        """PRN decision and gradient map for a batch"""
        out = self.prn_forward(tfi)
        predicted = out.probabilities.argmax(axis=1)
        weights = importance_weights(out.feature_map, out.logits, predicted)
        maps = gradient_maps(out.feature_map, weights)
        return PRNStageResult(out.probabilities, predicted, maps, out.intermediates)

    def nan_forward(self, maps: GradientMap | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Reliability verdicts (0 reliable, 1 unreliable, ties to reliable) and probabilities for one map or a batch.
        """
        values = maps.values if isinstance(maps, GradientMap) else np.asarray(maps)
        map_shape = self.config.feature_shape[1:]
        if values.shape == map_shape:
            values = values[None]
        if values.ndim != 3 or values.shape[1:] != map_shape:
            raise ShapeError(f"NAN expects {map_shape} gradient maps, got {values.shape}")
        with no_grad():
            logits = self.nan(Tensor(values.astype(self.dtype, copy=False)))
        probabilities = softmax(logits).astype(np.float64)
        probabilities /= probabilities.sum(axis=1, keepdims=True)
        return probabilities.argmax(axis=1), probabilities

    def arn_forward(self, intermediates: Sequence[Tensor] | None) -> tuple[Tensor, np.ndarray]:
        """
        ARN on the reused PRN stage output.

        Raises
        ------
        GraphStateError
            If the PRN intermediates are missing
        """
        reuse = self.config.arn_reuse_point
        if not intermediates or len(intermediates) <= reuse:
            raise GraphStateError("the ARN needs the PRN intermediates of the same input")
        with no_grad():
            logits = self.arn(intermediates[reuse])
        return logits, softmax(logits)

    def nael_infer_batch(self, tfis: TFI | np.ndarray) -> list[NaelDecision]:
        """Routed inference over a batch, ARN running only on the flagged samples"""
        return self.decide(self.prn_stage(tfis))

    def decide(self, stage: PRNStageResult) -> list[NaelDecision]:
        """NAN verdicts on the PRN stage output of a batch, then ARN on the flagged samples"""
        verdicts, nan_probs = self.nan_forward(stage.maps)
        used = verdicts == UNRELIABLE
        predicted = stage.predicted.copy()
        if np.any(used):
            reused = [Tensor(t.data[used]) for t in stage.intermediates]
            _, arn_probs = self.arn_forward(reused)
            predicted[used] = arn_probs.argmax(axis=1)
        base, marginal = self.base_flops, self.arn_marginal_flops
        return [
            NaelDecision(
                predicted_class=int(predicted[i]),
                used_arn=bool(used[i]),
                nan_probs=(float(nan_probs[i, 0]), float(nan_probs[i, 1])),
                flops_spent=base + marginal * int(used[i]),
                prn_class=int(stage.predicted[i]),
                f_max=f_max(stage.maps[i]),
            )
            for i in range(len(predicted))
        ]

    def nael_infer(self, tfi: TFI | np.ndarray) -> NaelDecision:
        """Routed inference on one normalized TFI"""
        return self.nael_infer_batch(tfi)[0]

    def explain(self, tfi: TFI | np.ndarray) -> GradientMap:
        """Gradient map of the PRN decision on one TFI"""
        stage = self.prn_stage(tfi)
        return GradientMap(stage.maps[0], int(stage.predicted[0]))

    def flops_report(self) -> FlopsReport:
        """Static per-layer costs of PRN, gradient-map extraction, NAN and ARN"""
        config = self.config
        prn_rows, _ = self.prn.describe(config.input_shape)
        c_e, h, w = config.feature_shape
        # closed-form backward of the pooled linear head
        gradmap_rows = [("head_backward", LayerSpec("fc", c_e, config.num_classes), 1, 1)]
        nan_rows, _ = self.nan.describe((h, w))
        arn_rows, _ = self.arn.describe(config.prn_stage_shapes[config.arn_reuse_point])
        return FlopsReport.concat(
            [
                FlopsReport.from_layers("prn", prn_rows),
                FlopsReport.from_layers("gradient_map", gradmap_rows),
                FlopsReport.from_layers("nan", nan_rows),
                FlopsReport.from_layers("arn", arn_rows),
            ]
        )

    @cached_property
    def base_flops(self) -> int:
        """Cost of an inference accepted at the PRN"""
        return self.flops_report().total(("prn", "gradient_map", "nan"))

    @cached_property
    def arn_marginal_flops(self) -> int:
        return self.flops_report().total("arn")

    def save(self, directory: Path | str, networks: Sequence[str] = NETWORKS) -> list[Path]:
        """One checkpoint per network, named `<network>.ckpt`"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        return [save_checkpoint(self.network(name).state_dict(), directory / f"{name}.ckpt") for name in networks]

    def load(self, directory: Path | str, networks: Sequence[str] = NETWORKS) -> "NaelModel":
        """
        Loads the checkpoints of `networks` from `directory`.

        Raises
        ------
        DependencyError
            If a checkpoint file is missing
        CompatibilityError
            If a checkpoint does not match the configured layout
        """
        directory = Path(directory)
        for name in networks:
            path = directory / f"{name}.ckpt"
            if not path.is_file():
                raise DependencyError(name, f"no {name} checkpoint at {path}")
            self.network(name).load_state_dict(load_checkpoint(path))
            logging.debug(f"Loaded {name} from {path}")
        return self
