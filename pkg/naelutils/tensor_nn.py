# coding: utf-8
"""
A small dense-tensor neural network toolkit on top of numpy.

It provides the three convolution flavours (standard, depthwise, pointwise), batch normalization, ReLU6, fully connected layers, global average pooling and softmax cross-entropy, all with reverse-mode differentiation. Gradients are available for parameters and for any intermediate activation that asks for them with `Tensor.retain_grad`, or that is re-entered as a leaf.

It also holds the Adam optimizer, the multiply-accumulate cost model of every layer kind, and the binary checkpoint format.
"""
import struct
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Mapping, Sequence

import numpy as np
import polars as pl
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax as _softmax

from .definitions import (
    CHECKPOINT_MAGIC,
    DTYPE,
    FORMAT_VERSION,
    CompatibilityError,
    DegenerateBatchError,
    FormatError,
    GraphStateError,
    LabelError,
    ParameterDomainError,
    ShapeError,
    file_digest,
)

LayerKind = Literal["sc_conv", "dw_conv", "pw_conv", "batchnorm", "relu6", "fc", "gap", "softmax"]
LAYER_KINDS = ("sc_conv", "dw_conv", "pw_conv", "batchnorm", "relu6", "fc", "gap", "softmax")


_GRAD_ENABLED: ContextVar[bool] = ContextVar("grad_enabled", default=True)


def is_grad_enabled() -> bool:
    """Whether operations record the graph in the current thread or task"""
    return _GRAD_ENABLED.get()


class no_grad:
    """Context manager (and decorator) disabling graph recording in the current thread or task"""

    def __enter__(self):
        self._token = _GRAD_ENABLED.set(False)

    def __exit__(self, *exc_info):
        _GRAD_ENABLED.reset(self._token)

    def __call__(self, func):
        def wrapper_no_grad(*args, **kwargs):
            with no_grad():
                return func(*args, **kwargs)

        return wrapper_no_grad


class Tensor(object):
    """
    Dense array with an optional gradient and a link to the function that produced it.

    Parameters
    ----------
    data : array_like
        Values. Non-floating input is converted to float64.
    requires_grad : bool, optional
        Whether gradients flow to (and are stored on) this tensor
    """

    __slots__ = ("data", "grad", "requires_grad", "retains_grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False) -> None:
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.retains_grad = False
        self._ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> "Tensor":
        return Add.apply(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        return Mul.apply(self, _as_tensor(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def mean(self) -> "Tensor":
        return Sum.apply(self) * (1.0 / self.data.size)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def pick(self, indices: Sequence[int]) -> "Tensor":
        """Row-wise selection `self[n, indices[n]]` of a 2D tensor"""
        return Pick.apply(self, indices=np.asarray(indices, dtype=int))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this intermediate after `backward`"""
        self.retains_grad = True
        return self

    def backward(self, grad: np.ndarray | None = None) -> None:
        """
        Reverse-mode differentiation from this tensor.

        Gradients are accumulated on leaves that require them and on intermediates flagged by `retain_grad`.

        Parameters
        ----------
        grad : np.ndarray, optional
            Seed gradient, by default ones for a single-element tensor

        Raises
        ------
        GraphStateError
            If no forward pass was recorded to reach this tensor
        ShapeError
            If no seed is given for a tensor with more than one element
        """
        for node, node_grad in _reverse_pass(self, grad):
            if node._ctx is None or node.retains_grad:
                node.grad = node_grad if node.grad is None else node.grad + node_grad


class Parameter(Tensor):
    """A trainable tensor"""

    __slots__ = ()

    def __init__(self, data) -> None:
        super().__init__(data, requires_grad=True)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> list[Tensor]:
    """Graph nodes reachable from `root`, every node before its parents"""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order[::-1]


def _reverse_pass(root: Tensor, grad: np.ndarray | None) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Every node reached from `root` with its full gradient, nodes before their parents. Nothing is stored on the nodes."""
    if root._ctx is None and not root.requires_grad:
        raise GraphStateError("backward() needs a tensor produced by a recorded forward pass")
    if grad is None:
        if root.data.size != 1:
            raise ShapeError(f"an implicit gradient needs a single-element output, got shape {root.shape}")
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=root.dtype)
    if grad.shape != root.shape:
        raise ShapeError(f"seed gradient of shape {grad.shape} for a tensor of shape {root.shape}")
    grads = {id(root): grad}
    for node in _topological_order(root):
        node_grad = grads.pop(id(node), None)
        if node_grad is None:
            continue
        yield node, node_grad
        if node._ctx is None:
            continue
        for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(node_grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = _unbroadcast(parent_grad, parent.shape)
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def grad(output: Tensor, inputs: Sequence[Tensor], seed: np.ndarray | None = None) -> list[np.ndarray | None]:
    """
    Gradients of `output` with respect to `inputs`, leaves or intermediates, without touching any `.grad`.

    Parameters and tensors outside of `inputs` are left as they are, so concurrent calls on one set of weights do not interfere.

    Returns
    -------
    list[np.ndarray | None]
        One gradient per input, None for an input the output does not depend on

    Raises
    ------
    GraphStateError
        If no forward pass was recorded to reach `output`
    """
    wanted = {id(t): i for i, t in enumerate(inputs)}
    out: list[np.ndarray | None] = [None] * len(inputs)
    for node, node_grad in _reverse_pass(output, seed):
        if id(node) in wanted:
            out[wanted[id(node)]] = node_grad
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduces a gradient over the axes that broadcasting added or stretched"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function(object):
    """
    One differentiable operation. Subclasses implement `forward` on arrays and `backward`, which returns one gradient (or None) per tensor parent.
    """

    def __init__(self, *parents: Tensor) -> None:
        self.parents = parents
        self.saved = ()

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        fn = cls(*parents)
        out = Tensor(fn.forward(*(p.data for p in parents), **kwargs))
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._ctx = fn
        return out

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return grad * b, grad * a


class Sum(Function):
    def forward(self, a):
        self.saved = a.shape
        return np.asarray(a.sum())

    def backward(self, grad):
        return (np.full(self.saved, grad, dtype=grad.dtype),)


class Reshape(Function):
    def forward(self, a, shape):
        self.saved = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved),)


class Pick(Function):
    def forward(self, a, indices):
        if a.ndim != 2 or indices.shape != (a.shape[0],):
            raise ShapeError(f"cannot pick {indices.shape} indices from shape {a.shape}")
        self.saved = (a.shape, indices)
        return a[np.arange(a.shape[0]), indices]

    def backward(self, grad):
        shape, indices = self.saved
        out = np.zeros(shape, dtype=grad.dtype)
        out[np.arange(shape[0]), indices] = grad
        return (out,)


def _output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"kernel {kernel} with padding {padding} does not fit an input of size {size}")
    return out


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, out_h, out_w, kh, kw) read-only view of every receptive field"""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _offset_slice(i: int, j: int, stride: int, out_h: int, out_w: int):
    return (
        slice(None),
        slice(None),
        slice(i, i + stride * (out_h - 1) + 1, stride),
        slice(j, j + stride * (out_w - 1) + 1, stride),
    )


def _check_stride(stride: int, padding: int) -> None:
    if stride not in (1, 2):
        raise ParameterDomainError(f"stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ParameterDomainError(f"padding must be nonnegative, got {padding}")


class ScConv(Function):
    def forward(self, x, w, stride, padding):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"standard convolution of input {x.shape} with kernel {w.shape}")
        _check_stride(stride, padding)
        kh, kw = w.shape[2:]
        out_h = _output_size(x.shape[2], kh, stride, padding)
        out_w = _output_size(x.shape[3], kw, stride, padding)
        xp = _pad(x, padding)
        windows = _windows(xp, kh, kw, stride)
        self.saved = (windows, w, xp.shape, stride, padding, out_h, out_w)
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        windows, w, padded_shape, stride, padding, out_h, out_w = self.saved
        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_xp = np.zeros(padded_shape, dtype=grad.dtype)
        for i in range(w.shape[2]):
            for j in range(w.shape[3]):
                grad_xp[_offset_slice(i, j, stride, out_h, out_w)] += np.einsum(
                    "nohw,oc->nchw", grad, w[:, :, i, j], optimize=True
                )
        return _unpad(grad_xp, padding), grad_w


class DwConv(Function):
    def forward(self, x, w, stride, padding):
        if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"depthwise convolution of input {x.shape} with kernel {w.shape}")
        _check_stride(stride, padding)
        kh, kw = w.shape[1:]
        out_h = _output_size(x.shape[2], kh, stride, padding)
        out_w = _output_size(x.shape[3], kw, stride, padding)
        xp = _pad(x, padding)
        windows = _windows(xp, kh, kw, stride)
        self.saved = (windows, w, xp.shape, stride, padding, out_h, out_w)
        return np.einsum("nchwij,cij->nchw", windows, w, optimize=True)

    def backward(self, grad):
        windows, w, padded_shape, stride, padding, out_h, out_w = self.saved
        grad_w = np.einsum("nchw,nchwij->cij", grad, windows, optimize=True)
        grad_xp = np.zeros(padded_shape, dtype=grad.dtype)
        for i in range(w.shape[1]):
            for j in range(w.shape[2]):
                grad_xp[_offset_slice(i, j, stride, out_h, out_w)] += grad * w[:, i, j][None, :, None, None]
        return _unpad(grad_xp, padding), grad_w


class PwConv(Function):
    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"pointwise convolution of input {x.shape} with kernel {w.shape}")
        self.saved = (x, w)
        return np.einsum("nchw,oc->nohw", x, w, optimize=True)

    def backward(self, grad):
        x, w = self.saved
        grad_x = np.einsum("nohw,oc->nchw", grad, w, optimize=True)
        grad_w = np.einsum("nohw,nchw->oc", grad, x, optimize=True)
        return grad_x, grad_w


def _unpad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return x[:, :, padding:-padding, padding:-padding]


@dataclass
class BatchNormState:
    """Running statistics of one batch normalization layer"""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=DTYPE) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


class BatchNormFn(Function):
    def forward(self, x, gamma, beta, state: BatchNormState, mode: str):
        if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeError(f"batch normalization of {x.shape} with {gamma.shape} scales")
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
        if mode == "train":
            if x.shape[0] < 2:
                raise DegenerateBatchError("batch normalization in train mode needs at least 2 samples")
            count = x.size // x.shape[1]
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            state.running_mean[...] = (1 - state.momentum) * state.running_mean + state.momentum * mean
            unbiased = var * count / max(count - 1, 1)
            state.running_var[...] = (1 - state.momentum) * state.running_var + state.momentum * unbiased
        elif mode == "infer":
            mean, var = state.running_mean, state.running_var
        else:
            raise ParameterDomainError(f"batch normalization mode must be train or infer, got {mode}")
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype).reshape(shape)
        x_hat = (x - mean.reshape(shape)) * inv_std
        self.saved = (x_hat, inv_std, gamma.reshape(shape), axes, mode)
        return gamma.reshape(shape) * x_hat + beta.reshape(shape)

    def backward(self, grad):
        x_hat, inv_std, gamma, axes, mode = self.saved
        grad_gamma = (grad * x_hat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        grad_x_hat = grad * gamma
        if mode == "infer":
            return grad_x_hat * inv_std, grad_gamma, grad_beta
        count = grad.size // grad.shape[1]
        grad_x = (
            inv_std
            / count
            * (
                count * grad_x_hat
                - grad_x_hat.sum(axis=axes, keepdims=True)
                - x_hat * (grad_x_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        )
        return grad_x, grad_gamma, grad_beta


class ReLU6Fn(Function):
    def forward(self, x):
        self.saved = (x > 0) & (x < 6)
        return np.clip(x, 0, 6)

    def backward(self, grad):
        return (grad * self.saved,)


class LinearFn(Function):
    def forward(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
            raise ShapeError(f"fully connected layer on {x.shape} with weights {w.shape} and bias {b.shape}")
        self.saved = (x, w)
        return x @ w.T + b

    def backward(self, grad):
        x, w = self.saved
        return grad @ w, grad.T @ x, grad.sum(axis=0)


class GlobalAvgPool(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"global average pooling needs (N, C, H, W), got {x.shape}")
        self.saved = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.saved
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels, weights):
        if logits.ndim != 2:
            raise ShapeError(f"softmax cross-entropy needs (N, classes) logits, got {logits.shape}")
        if labels.shape != (logits.shape[0],):
            raise ShapeError(f"{labels.shape} labels for {logits.shape[0]} samples")
        if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
            raise LabelError(f"labels must lie in [0, {logits.shape[1]})")
        log_probs = log_softmax(logits, axis=1)
        sample_weights = np.ones(labels.size) if weights is None else np.asarray(weights)[labels]
        coefficients = (sample_weights / sample_weights.sum()).astype(logits.dtype)
        self.saved = (np.exp(log_probs), labels, coefficients)
        return np.asarray(-(coefficients * log_probs[np.arange(labels.size), labels]).sum(), dtype=logits.dtype)

    def backward(self, grad):
        probabilities, labels, coefficients = self.saved
        out = probabilities.copy()
        out[np.arange(labels.size), labels] -= 1
        return (grad * coefficients[:, None] * out,)


def sc_conv_forward(input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Standard convolution (cross-correlation) with zero padding.

    Parameters
    ----------
    input : Tensor
        (N, C_i, H, W)
    kernel : Tensor
        (C_o, C_i, H_k, W_k)
    stride : int, optional
        1 or 2
    padding : int, optional
        Zero padding on every side

    Returns
    -------
    Tensor
        (N, C_o, out_h, out_w)

    Raises
    ------
    ShapeError
        If the channel counts disagree or the kernel does not fit
    """
    return ScConv.apply(input, kernel, stride=stride, padding=padding)


def dw_conv_forward(input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Depthwise convolution, one (H_k, W_k) filter per channel, kernel of shape (C, H_k, W_k)"""
    return DwConv.apply(input, kernel, stride=stride, padding=padding)


def pw_conv_forward(input: Tensor, kernel: Tensor) -> Tensor:
    """Pointwise convolution. The kernel is (C_o, C_i) or a (C_o, C_i, 1, 1) standard kernel."""
    if kernel.ndim == 4:
        if kernel.shape[2:] != (1, 1):
            raise ShapeError(f"pointwise kernels are 1x1, got {kernel.shape}")
        kernel = kernel.reshape(kernel.shape[:2])
    return PwConv.apply(input, kernel)


def batchnorm(
    input: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: Literal["train", "infer"] = "train",
) -> Tensor:
    """
    Batch normalization over (N, C) or (N, C, H, W) inputs, per channel.

    In train mode the batch statistics normalize the input and the running statistics in `state` are updated in place. In infer mode the running statistics are used.

    Raises
    ------
    DegenerateBatchError
        For a single-sample batch in train mode
    """
    return BatchNormFn.apply(input, gamma, beta, state=state, mode=mode)


def relu6(input: Tensor) -> Tensor:
    return ReLU6Fn.apply(input)


def fc_forward(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """W x + b for a vector (C_i,) or a batch (N, C_i)"""
    if input.ndim == 1:
        return LinearFn.apply(input.reshape(1, -1), weights, bias).reshape(-1)
    return LinearFn.apply(input, weights, bias)


def gap(input: Tensor) -> Tensor:
    """Per-channel mean over H x W, (N, C, H, W) -> (N, C)"""
    return GlobalAvgPool.apply(input)


def softmax(logits: np.ndarray | Tensor) -> np.ndarray:
    """Stabilized softmax along the last axis"""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return _softmax(logits, axis=-1)


def softmax_xent(
    logits: Tensor,
    label: int | Sequence[int],
    class_weights: Sequence[float] | None = None,
) -> tuple[Tensor, np.ndarray]:
    """
    Softmax cross-entropy.

    Parameters
    ----------
    logits : Tensor
        (classes,) for one sample or (N, classes)
    label : int | Sequence[int]
        True class(es)
    class_weights : Sequence[float], optional
        Per-class loss weights. The loss is then the weighted mean over the batch.

    Returns
    -------
    tuple[Tensor, np.ndarray]
        Scalar loss, and the probabilities

    Raises
    ------
    LabelError
        If a label is outside [0, classes)
    """
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(label))
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integers, got {labels.dtype}")
    loss = SoftmaxCrossEntropy.apply(logits, labels=labels, weights=class_weights)
    return loss, softmax(logits)


@dataclass(frozen=True)
class LayerSpec:
    """
    Static description of one layer, enough to count its cost.

    Attributes
    ----------
    kind : LayerKind
        Layer kind
    in_channels, out_channels : int
        C_i and C_o (features for fully connected layers)
    kernel : tuple[int, int]
        (H_k, W_k), (1, 1) where meaningless
    stride : int
        1 or 2
    padding : int
        Zero padding
    """

    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ParameterDomainError(f"unknown layer kind {self.kind}")
        if self.stride not in (1, 2):
            raise ParameterDomainError(f"stride must be 1 or 2, got {self.stride}")
        if self.kind == "dw_conv" and self.in_channels != self.out_channels:
            raise ShapeError("depthwise convolutions keep the channel count")
        if self.kind == "pw_conv" and tuple(self.kernel) != (1, 1):
            raise ShapeError("pointwise convolutions have 1x1 kernels")


def flops_of(layer: LayerSpec, out_h: int = 1, out_w: int = 1) -> int:
    """
    Multiply-accumulate products of one layer, using the OUTPUT spatial size.

    Normalization, activation, pooling and softmax count as zero.

    Examples
    --------
    >>> flops_of(LayerSpec("sc_conv", 1, 16, (3, 3), stride=2, padding=1), 64, 64)
    589824
    >>> flops_of(LayerSpec("fc", 256, 12))
    3072
    """
    kh, kw = layer.kernel
    match layer.kind:
        case "sc_conv":
            return kh * kw * layer.in_channels * layer.out_channels * out_h * out_w
        case "dw_conv":
            return kh * kw * layer.in_channels * out_h * out_w
        case "pw_conv":
            return layer.in_channels * layer.out_channels * out_h * out_w
        case "fc":
            return layer.in_channels * layer.out_channels
        case _:
            return 0


LayerCost = tuple[str, LayerSpec, int, int]


@dataclass
class FlopsReport:
    """
    Per-layer cost table with columns network, layer, kind, out_h, out_w, flops.
    """

    table: pl.DataFrame

    @classmethod
    def from_layers(cls, network: str, layers: Sequence[LayerCost]) -> "FlopsReport":
        rows = [
            {
                "network": network,
                "layer": name,
                "kind": spec.kind,
                "out_h": out_h,
                "out_w": out_w,
                "flops": flops_of(spec, out_h, out_w),
            }
            for name, spec, out_h, out_w in layers
        ]
        schema = {
            "network": pl.String,
            "layer": pl.String,
            "kind": pl.String,
            "out_h": pl.Int64,
            "out_w": pl.Int64,
            "flops": pl.Int64,
        }
        return cls(pl.DataFrame(rows, schema=schema))

    @classmethod
    def concat(cls, reports: Sequence["FlopsReport"]) -> "FlopsReport":
        return cls(pl.concat([report.table for report in reports]))

    def total(self, network: str | Sequence[str] | None = None) -> int:
        table = self.table
        if isinstance(network, str):
            table = table.filter(pl.col("network") == network)
        elif network is not None:
            table = table.filter(pl.col("network").is_in(list(network)))
        return int(table["flops"].sum())

    def totals(self) -> pl.DataFrame:
        """One row per network with its flops and MFLOPs"""
        return (
            self.table.group_by("network", maintain_order=True)
            .agg(pl.col("flops").sum())
            .with_columns(mflops=pl.col("flops") / 1e6)
        )

    @property
    def mflops(self) -> float:
        return self.total() / 1e6


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype=DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module(object):
    """
    Container of parameters, buffers and submodules. Attributes holding a `Parameter`, a `Module` or a list of modules are discovered in definition order, which fixes the checkpoint naming.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def describe(self, in_shape: tuple[int, ...], prefix: str = "") -> tuple[list[LayerCost], tuple[int, ...]]:
        """Static per-layer costs for an input of shape `in_shape` (without batch axis), and the output shape"""
        raise NotImplementedError

    def _members(self) -> Iterator[tuple[str, "Parameter | Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, submodule in enumerate(value):
                    yield f"{name}.{i}", submodule

    def _own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, member in self._members():
            if isinstance(member, Module):
                yield from member.modules()

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {}
        for name, member in self._members():
            if isinstance(member, Parameter):
                out[prefix + name] = member
            else:
                out.update(member.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + name: buffer for name, buffer in self._own_buffers().items()}
        for name, member in self._members():
            if isinstance(member, Module):
                out.update(member.named_buffers(f"{prefix}{name}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, parameters first"""
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: b.copy() for name, b in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> "Module":
        """
        Raises
        ------
        CompatibilityError
            If names or shapes differ from this module's
        """
        targets = {name: p.data for name, p in self.named_parameters().items()}
        targets.update(self.named_buffers())
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise CompatibilityError(f"checkpoint mismatch, missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, target in targets.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise CompatibilityError(f"{name} has shape {value.shape}, expected {target.shape}")
            target[...] = value
        return self

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for parameter in self.named_parameters().values():
            parameter.grad = None


class ScConv2d(Module):
    def __init__(self, c_in, c_out, kernel_size=3, stride=1, padding=1, rng=None, dtype=DTYPE) -> None:
        rng = np.random.default_rng(rng)
        fan_in = c_in * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform((c_out, c_in, kernel_size, kernel_size), fan_in, rng, dtype))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return sc_conv_forward(x, self.weight, self.stride, self.padding)

    def spec(self) -> LayerSpec:
        c_out, c_in, kh, kw = self.weight.shape
        return LayerSpec("sc_conv", c_in, c_out, (kh, kw), self.stride, self.padding)

    def describe(self, in_shape, prefix=""):
        spec = self.spec()
        out_h = _output_size(in_shape[1], spec.kernel[0], spec.stride, spec.padding)
        out_w = _output_size(in_shape[2], spec.kernel[1], spec.stride, spec.padding)
        return [(prefix + "conv", spec, out_h, out_w)], (spec.out_channels, out_h, out_w)


class DwConv2d(Module):
    def __init__(self, channels, kernel_size=3, stride=1, padding=1, rng=None, dtype=DTYPE) -> None:
        rng = np.random.default_rng(rng)
        self.weight = Parameter(
            kaiming_uniform((channels, kernel_size, kernel_size), kernel_size * kernel_size, rng, dtype)
        )
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return dw_conv_forward(x, self.weight, self.stride, self.padding)

    def spec(self) -> LayerSpec:
        c, kh, kw = self.weight.shape
        return LayerSpec("dw_conv", c, c, (kh, kw), self.stride, self.padding)

    def describe(self, in_shape, prefix=""):
        spec = self.spec()
        out_h = _output_size(in_shape[1], spec.kernel[0], spec.stride, spec.padding)
        out_w = _output_size(in_shape[2], spec.kernel[1], spec.stride, spec.padding)
        return [(prefix + "dw", spec, out_h, out_w)], (spec.out_channels, out_h, out_w)


class PwConv2d(Module):
    def __init__(self, c_in, c_out, rng=None, dtype=DTYPE) -> None:
        rng = np.random.default_rng(rng)
        self.weight = Parameter(kaiming_uniform((c_out, c_in), c_in, rng, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return pw_conv_forward(x, self.weight)

    def spec(self) -> LayerSpec:
        c_out, c_in = self.weight.shape
        return LayerSpec("pw_conv", c_in, c_out)

    def describe(self, in_shape, prefix=""):
        spec = self.spec()
        return [(prefix + "pw", spec, in_shape[1], in_shape[2])], (spec.out_channels, *in_shape[1:])


class BatchNorm(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=DTYPE) -> None:
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.state = BatchNormState.fresh(channels, dtype)
        self.state.momentum, self.state.eps = momentum, eps

    def _own_buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.state, "train" if self.training else "infer")

    def describe(self, in_shape, prefix=""):
        spec = LayerSpec("batchnorm", in_shape[0], in_shape[0])
        spatial = in_shape[1:] if len(in_shape) == 3 else (1, 1)
        return [(prefix + "bn", spec, *spatial)], in_shape


class Linear(Module):
    def __init__(self, c_in, c_out, rng=None, dtype=DTYPE) -> None:
        rng = np.random.default_rng(rng)
        self.weight = Parameter(kaiming_uniform((c_out, c_in), c_in, rng, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return fc_forward(x, self.weight, self.bias)

    def spec(self) -> LayerSpec:
        c_out, c_in = self.weight.shape
        return LayerSpec("fc", c_in, c_out)

    def describe(self, in_shape, prefix=""):
        spec = self.spec()
        return [(prefix + "fc", spec, 1, 1)], (spec.out_channels,)


@dataclass
class AdamState:
    """
    Optimizer state. `m` and `v` are keyed like the parameters they follow.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor | np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
) -> AdamState:
    """
    One bias-corrected Adam update, applied in place to `params`.

    A missing or None gradient counts as zero.

    Raises
    ------
    ShapeError
        If a gradient is not shaped like its parameter
    """
    state.step += 1
    bias_correction1 = 1.0 - state.beta1**state.step
    bias_correction2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        values = param.data if isinstance(param, Tensor) else param
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(values)
        if grad.shape != values.shape:
            raise ShapeError(f"gradient of {name} has shape {grad.shape}, expected {values.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(values)
            state.v[name] = np.zeros_like(values)
        state.m[name] *= state.beta1
        state.m[name] += (1.0 - state.beta1) * grad
        state.v[name] *= state.beta2
        state.v[name] += (1.0 - state.beta2) * (grad * grad)
        denominator = np.sqrt(state.v[name] / bias_correction2) + state.epsilon
        values -= (state.lr / bias_correction1) * state.m[name] / denominator
    return state


class Adam:
    """Adam over the parameters of a module, reading their `.grad`"""

    def __init__(self, params: Mapping[str, Parameter], lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8) -> None:
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self) -> None:
        adam_step(self.params, {name: p.grad for name, p in self.params.items()}, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def save_checkpoint(tensors: Mapping[str, np.ndarray], path: Path | str) -> Path:
    """
    Writes named tensors as little-endian float32 in the checkpoint format: magic, version u32, count u32, then per tensor a u16-prefixed UTF-8 name, the rank u8, the dims u32 and the data.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, values in tensors.items():
        values = np.asarray(values)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{values.ndim}I", values.ndim, *values.shape))
        chunks.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    path = Path(path)
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: Path | str) -> dict[str, np.ndarray]:
    """
    Reads a checkpoint written by `save_checkpoint`. Arrays come back as float32.

    Raises
    ------
    FormatError
        On a bad magic, an unknown version, truncation or trailing bytes, with the offending byte offset
    """
    raw = Path(path).read_bytes()

    def take(offset: int, size: int, what: str) -> bytes:
        if offset + size > len(raw):
            raise FormatError(f"truncated checkpoint while reading {what}", offset)
        return raw[offset : offset + size]

    if take(0, 8, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file, bad magic", 0)
    version, count = struct.unpack("<II", take(8, 8, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    offset = 16
    tensors = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", take(offset, 2, "name length"))
        offset += 2
        try:
            name = take(offset, length, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset) from None
        offset += length
        (rank,) = struct.unpack("<B", take(offset, 1, "rank"))
        offset += 1
        dims = struct.unpack(f"<{rank}I", take(offset, 4 * rank, "dims"))
        offset += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) * 4
        tensors[name] = np.frombuffer(take(offset, size, name), dtype="<f4").reshape(dims).astype(np.float32)
        offset += size
    if offset != len(raw):
        raise FormatError("trailing bytes after the last tensor", offset)
    return tensors


def checkpoint_digest(path: Path | str) -> str:
    """SHA-256 of a checkpoint, after checking it parses"""
    load_checkpoint(path)
    return file_digest(path)
