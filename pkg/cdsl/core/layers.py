"""Primitive layers with exact shape inference and hand-written backward passes.

Every layer is stateless: parameters arrive as a dict of local names
(``weight``, ``bias``, ``gamma`` ...) and whatever the backward pass needs is
returned from ``forward`` as an opaque cache. Tensors are NCHW ``numpy`` arrays.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Literal, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cdsl.constants import BN_EPS, BN_MOMENTUM
from cdsl.data.resize import resize_tensor, resize_tensor_backward, target_size
from cdsl.errors import ShapeError

Shape = Tuple[int, ...]
LayerKind = Literal[
    "conv",
    "transposed_conv",
    "batch_norm",
    "relu",
    "sigmoid",
    "max_pool",
    "add",
    "concat",
    "bilinear_resize",
]
InitKind = Literal["he", "zeros", "ones"]


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one primitive layer."""

    kind: LayerKind
    name: str
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    out_channels: int = 0
    output_padding: int = 0
    factor: float = 1.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "name": self.name,
            "kernel": self.kernel,
            "stride": self.stride,
            "pad": self.pad,
            "out_channels": self.out_channels,
            "output_padding": self.output_padding,
            "factor": self.factor,
        }


@dataclass(frozen=True)
class ParamInfo:
    """Shape and initialisation rule of one layer parameter."""

    shape: Shape
    init: InitKind
    fan_in: int = 0
    trainable: bool = True


LAYER_REGISTRY: dict[str, Layer] = {}


def register(kind: str) -> Callable[[type[Layer]], type[Layer]]:
    """Register a layer implementation under ``kind``.

    Args:
        kind: LayerSpec kind handled by the class.

    Returns:
        Decorator function that registers an instance of the class.
    """

    def decorator(layer_class: type[Layer]) -> type[Layer]:
        LAYER_REGISTRY[kind] = layer_class()
        return layer_class

    return decorator


def get_layer(kind: str) -> Layer:
    """Look up the registered implementation of ``kind``."""
    if kind not in LAYER_REGISTRY:
        raise ShapeError(f"Unsupported layer kind: {kind}")
    return LAYER_REGISTRY[kind]


class Layer(ABC):
    """Abstract base class of primitive layers."""

    num_inputs: int = 1

    def check_inputs(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> None:
        if len(in_shapes) != self.num_inputs:
            raise ShapeError(
                f"Layer '{spec.name}' ({spec.kind}) takes {self.num_inputs} inputs, "
                f"got {len(in_shapes)}"
            )
        for shape in in_shapes:
            if len(shape) != 4:
                raise ShapeError(f"Layer '{spec.name}' expects NCHW inputs, got {shape}")

    @abstractmethod
    def infer_shape(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
        """Output shape for the given input shapes."""
        pass

    def param_info(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Dict[str, ParamInfo]:
        """Parameters this layer owns, keyed by local name."""
        return {}

    @abstractmethod
    def forward(
        self,
        spec: LayerSpec,
        inputs: Sequence[np.ndarray],
        params: Dict[str, np.ndarray],
        train: bool,
    ) -> Tuple[np.ndarray, Any]:
        """Compute the output and the cache needed by :meth:`backward`."""
        pass

    @abstractmethod
    def backward(
        self,
        spec: LayerSpec,
        grad: np.ndarray,
        cache: Any,
        params: Dict[str, np.ndarray],
    ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        """Return (gradients w.r.t. inputs, gradients w.r.t. trainable params)."""
        pass


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(n, c, out_h, out_w, k, k) strided view over an already padded input."""
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(
    target: np.ndarray, cols: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int
) -> None:
    """Adjoint of :func:`_windows`: add ``cols[..., i, j]`` back onto ``target``."""
    for i in range(kernel):
        for j in range(kernel):
            target[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[
                ..., i, j
            ]


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def transposed_output_size(
    size: int, kernel: int, stride: int, pad: int, output_padding: int
) -> int:
    return (size - 1) * stride - 2 * pad + kernel + output_padding


@register("conv")
class Conv2d(Layer):
    """k x k convolution with stride and symmetric zero padding."""

    def infer_shape(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
        self.check_inputs(spec, in_shapes)
        n, _, h, w = in_shapes[0]
        out_h = conv_output_size(h, spec.kernel, spec.stride, spec.pad)
        out_w = conv_output_size(w, spec.kernel, spec.stride, spec.pad)
        if out_h < 1 or out_w < 1 or spec.out_channels < 1:
            raise ShapeError(f"Layer '{spec.name}': invalid output shape for input {in_shapes[0]}")
        return (n, spec.out_channels, out_h, out_w)

    def param_info(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Dict[str, ParamInfo]:
        in_channels = in_shapes[0][1]
        k = spec.kernel
        return {
            "weight": ParamInfo((spec.out_channels, in_channels, k, k), "he", in_channels * k * k),
            "bias": ParamInfo((spec.out_channels,), "zeros"),
        }

    def forward(
        self,
        spec: LayerSpec,
        inputs: Sequence[np.ndarray],
        params: Dict[str, np.ndarray],
        train: bool,
    ) -> Tuple[np.ndarray, Any]:
        x = inputs[0]
        weight = params["weight"]
        if x.shape[1] != weight.shape[1]:
            raise ShapeError(
                f"Layer '{spec.name}': input has {x.shape[1]} channels, "
                f"weight expects {weight.shape[1]}"
            )
        p = spec.pad
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = _windows(padded, spec.kernel, spec.stride)
        out = np.einsum("nchwij,ocij->nohw", windows, weight, optimize=True)
        out += params["bias"][None, :, None, None]
        return out, (x.shape, padded.shape, windows)

    def backward(
        self,
        spec: LayerSpec,
        grad: np.ndarray,
        cache: Any,
        params: Dict[str, np.ndarray],
    ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        in_shape, padded_shape, windows = cache
        weight = params["weight"]
        p = spec.pad
        out_h, out_w = grad.shape[2:]

        grad_weight = np.einsum("nchwij,nohw->ocij", windows, grad, optimize=True)
        grad_bias = grad.sum(axis=(0, 2, 3))
        cols = np.einsum("nohw,ocij->nchwij", grad, weight, optimize=True)
        grad_padded = np.zeros(padded_shape, dtype=grad.dtype)
        _scatter_windows(grad_padded, cols, spec.kernel, spec.stride, out_h, out_w)
        grad_input = grad_padded[:, :, p : p + in_shape[2], p : p + in_shape[3]]
        return [np.ascontiguousarray(grad_input)], {"weight": grad_weight, "bias": grad_bias}


@register("transposed_conv")
class TransposedConv2d(Layer):
    """Transposed convolution; weight layout (in_channels, out_channels, k, k)."""

    def infer_shape(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
        self.check_inputs(spec, in_shapes)
        n, _, h, w = in_shapes[0]
        args = (spec.kernel, spec.stride, spec.pad, spec.output_padding)
        out_h = transposed_output_size(h, *args)
        out_w = transposed_output_size(w, *args)
        if out_h < 1 or out_w < 1 or spec.out_channels < 1:
            raise ShapeError(f"Layer '{spec.name}': invalid output shape for input {in_shapes[0]}")
        return (n, spec.out_channels, out_h, out_w)

    def param_info(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Dict[str, ParamInfo]:
        in_channels = in_shapes[0][1]
        k = spec.kernel
        return {
            "weight": ParamInfo((in_channels, spec.out_channels, k, k), "he", in_channels * k * k),
            "bias": ParamInfo((spec.out_channels,), "zeros"),
        }

    def _full_size(self, spec: LayerSpec, size: int) -> Tuple[int, int]:
        out = transposed_output_size(size, spec.kernel, spec.stride, spec.pad, spec.output_padding)
        full = max((size - 1) * spec.stride + spec.kernel, spec.pad + out)
        return full, out

    def forward(
        self,
        spec: LayerSpec,
        inputs: Sequence[np.ndarray],
        params: Dict[str, np.ndarray],
        train: bool,
    ) -> Tuple[np.ndarray, Any]:
        x = inputs[0]
        weight = params["weight"]
        if x.shape[1] != weight.shape[0]:
            raise ShapeError(
                f"Layer '{spec.name}': input has {x.shape[1]} channels, "
                f"weight expects {weight.shape[0]}"
            )
        n, _, h, w = x.shape
        full_h, out_h = self._full_size(spec, h)
        full_w, out_w = self._full_size(spec, w)
        p = spec.pad

        cols = np.einsum("nchw,coij->nohwij", x, weight, optimize=True)
        full = np.zeros((n, weight.shape[1], full_h, full_w), dtype=x.dtype)
        _scatter_windows(full, cols, spec.kernel, spec.stride, h, w)
        out = full[:, :, p : p + out_h, p : p + out_w] + params["bias"][None, :, None, None]
        return out, (x, full.shape)

    def backward(
        self,
        spec: LayerSpec,
        grad: np.ndarray,
        cache: Any,
        params: Dict[str, np.ndarray],
    ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        x, full_shape = cache
        weight = params["weight"]
        p = spec.pad
        out_h, out_w = grad.shape[2:]

        grad_full = np.zeros(full_shape, dtype=grad.dtype)
        grad_full[:, :, p : p + out_h, p : p + out_w] = grad
        windows = _windows(grad_full, spec.kernel, spec.stride)[:, :, : x.shape[2], : x.shape[3]]
        grad_input = np.einsum("nohwij,coij->nchw", windows, weight, optimize=True)
        grad_weight = np.einsum("nchw,nohwij->coij", x, windows, optimize=True)
        grad_bias = grad.sum(axis=(0, 2, 3))
        return [grad_input], {"weight": grad_weight, "bias": grad_bias}


@register("batch_norm")
class BatchNorm2d(Layer):
    """Per-channel batch normalisation; running statistics are non-trainable buffers."""

    def infer_shape(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
        self.check_inputs(spec, in_shapes)
        return tuple(in_shapes[0])

    def param_info(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Dict[str, ParamInfo]:
        channels = (in_shapes[0][1],)
        return {
            "gamma": ParamInfo(channels, "ones"),
            "beta": ParamInfo(channels, "zeros"),
            "running_mean": ParamInfo(channels, "zeros", trainable=False),
            "running_var": ParamInfo(channels, "ones", trainable=False),
        }

    def forward(
        self,
        spec: LayerSpec,
        inputs: Sequence[np.ndarray],
        params: Dict[str, np.ndarray],
        train: bool,
    ) -> Tuple[np.ndarray, Any]:
        x = inputs[0]
        gamma = params["gamma"][None, :, None, None]
        beta = params["beta"][None, :, None, None]
        if train:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            if count < 2:
                raise ShapeError(f"Layer '{spec.name}': batch statistics need at least 2 values")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            running_mean = params["running_mean"]
            running_var = params["running_var"]
            running_mean[...] = (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mean
            running_var[...] = (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * var * (
                count / (count - 1)
            )
        else:
            mean = params["running_mean"]
            var = params["running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        normalized = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma * normalized + beta
        return out.astype(x.dtype, copy=False), (normalized, inv_std, train)

    def backward(
        self,
        spec: LayerSpec,
        grad: np.ndarray,
        cache: Any,
        params: Dict[str, np.ndarray],
    ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        normalized, inv_std, train = cache
        gamma = params["gamma"]
        grad_gamma = (grad * normalized).sum(axis=(0, 2, 3))
        grad_beta = grad.sum(axis=(0, 2, 3))
        grad_normalized = grad * gamma[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if train:
            count = grad.shape[0] * grad.shape[2] * grad.shape[3]
            grad_input = (scale / count) * (
                count * grad_normalized
                - grad_normalized.sum(axis=(0, 2, 3), keepdims=True)
                - normalized * (grad_normalized * normalized).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            grad_input = grad_normalized * scale
        return [grad_input.astype(grad.dtype, copy=False)], {
            "gamma": grad_gamma,
            "beta": grad_beta,
        }


@register("relu")
class ReLU(Layer):
    def infer_shape(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
        self.check_inputs(spec, in_shapes)
        return tuple(in_shapes[0])

    def forward(
        self,
        spec: LayerSpec,
        inputs: Sequence[np.ndarray],
        params: Dict[str, np.ndarray],
        train: bool,
    ) -> Tuple[np.ndarray, Any]:
        active = inputs[0] > 0
        return np.where(active, inputs[0], 0).astype(inputs[0].dtype, copy=False), active

    def backward(
        self,
        spec: LayerSpec,
        grad: np.ndarray,
        cache: Any,
        params: Dict[str, np.ndarray],
    ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        return [grad * cache], {}


@register("sigmoid")
class Sigmoid(Layer):
    """Logistic function; outputs are kept strictly inside (0, 1) for the storage dtype."""

    def infer_shape(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
        self.check_inputs(spec, in_shapes)
        return tuple(in_shapes[0])

    def forward(
        self,
        spec: LayerSpec,
        inputs: Sequence[np.ndarray],
        params: Dict[str, np.ndarray],
        train: bool,
    ) -> Tuple[np.ndarray, Any]:
        x = inputs[0]
        info = np.finfo(x.dtype)
        decay = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay))
        out = np.clip(out, info.tiny, 1.0 - info.epsneg).astype(x.dtype, copy=False)
        return out, out

    def backward(
        self,
        spec: LayerSpec,
        grad: np.ndarray,
        cache: Any,
        params: Dict[str, np.ndarray],
    ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        return [grad * cache * (1.0 - cache)], {}


@register("max_pool")
class MaxPool2d(Layer):
    """Max pooling with -inf padding; ties route the gradient to the first maximum."""

    def infer_shape(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
        self.check_inputs(spec, in_shapes)
        n, c, h, w = in_shapes[0]
        out_h = conv_output_size(h, spec.kernel, spec.stride, spec.pad)
        out_w = conv_output_size(w, spec.kernel, spec.stride, spec.pad)
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"Layer '{spec.name}': invalid output shape for input {in_shapes[0]}")
        return (n, c, out_h, out_w)

    def forward(
        self,
        spec: LayerSpec,
        inputs: Sequence[np.ndarray],
        params: Dict[str, np.ndarray],
        train: bool,
    ) -> Tuple[np.ndarray, Any]:
        x = inputs[0]
        p = spec.pad
        padded = (
            np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
        )
        windows = _windows(padded, spec.kernel, spec.stride)
        flat = windows.reshape(*windows.shape[:4], -1)
        argmax = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
        return out, (x.shape, padded.shape, argmax)

    def backward(
        self,
        spec: LayerSpec,
        grad: np.ndarray,
        cache: Any,
        params: Dict[str, np.ndarray],
    ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        in_shape, padded_shape, argmax = cache
        k, s, p = spec.kernel, spec.stride, spec.pad
        out_h, out_w = grad.shape[2:]
        grad_padded = np.zeros(padded_shape, dtype=grad.dtype)
        for index in range(k * k):
            i, j = divmod(index, k)
            grad_padded[:, :, i : i + s * out_h : s, j : j + s * out_w : s] += np.where(
                argmax == index, grad, 0
            )
        grad_input = grad_padded[:, :, p : p + in_shape[2], p : p + in_shape[3]]
        return [np.ascontiguousarray(grad_input)], {}


@register("add")
class Add(Layer):
    num_inputs = 2

    def infer_shape(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
        self.check_inputs(spec, in_shapes)
        if tuple(in_shapes[0]) != tuple(in_shapes[1]):
            raise ShapeError(f"Layer '{spec.name}': cannot add {in_shapes[0]} and {in_shapes[1]}")
        return tuple(in_shapes[0])

    def forward(
        self,
        spec: LayerSpec,
        inputs: Sequence[np.ndarray],
        params: Dict[str, np.ndarray],
        train: bool,
    ) -> Tuple[np.ndarray, Any]:
        return inputs[0] + inputs[1], None

    def backward(
        self,
        spec: LayerSpec,
        grad: np.ndarray,
        cache: Any,
        params: Dict[str, np.ndarray],
    ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        return [grad, grad.copy()], {}


@register("concat")
class Concat(Layer):
    """Channel concatenation of two tensors with equal batch and spatial dims."""

    num_inputs = 2

    def infer_shape(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
        self.check_inputs(spec, in_shapes)
        (n, c0, h, w), (n1, c1, h1, w1) = in_shapes
        if (n, h, w) != (n1, h1, w1):
            raise ShapeError(
                f"Layer '{spec.name}': cannot concatenate {in_shapes[0]} and {in_shapes[1]}"
            )
        return (n, c0 + c1, h, w)

    def forward(
        self,
        spec: LayerSpec,
        inputs: Sequence[np.ndarray],
        params: Dict[str, np.ndarray],
        train: bool,
    ) -> Tuple[np.ndarray, Any]:
        return np.concatenate(inputs, axis=1), inputs[0].shape[1]

    def backward(
        self,
        spec: LayerSpec,
        grad: np.ndarray,
        cache: Any,
        params: Dict[str, np.ndarray],
    ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        split = cache
        return [grad[:, :split].copy(), grad[:, split:].copy()], {}


@register("bilinear_resize")
class BilinearResize(Layer):
    """Bilinear rescale of the spatial axes by ``spec.factor``."""

    def infer_shape(self, spec: LayerSpec, in_shapes: Sequence[Shape]) -> Shape:
        self.check_inputs(spec, in_shapes)
        n, c, h, w = in_shapes[0]
        return (n, c, target_size(h, spec.factor), target_size(w, spec.factor))

    def forward(
        self,
        spec: LayerSpec,
        inputs: Sequence[np.ndarray],
        params: Dict[str, np.ndarray],
        train: bool,
    ) -> Tuple[np.ndarray, Any]:
        x = inputs[0]
        return resize_tensor(x, spec.factor).astype(x.dtype, copy=False), x.shape

    def backward(
        self,
        spec: LayerSpec,
        grad: np.ndarray,
        cache: Any,
        params: Dict[str, np.ndarray],
    ) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        in_shape = cache
        return [resize_tensor_backward(grad, in_shape[2], in_shape[3])], {}
