"""LinkNet-style encoder-decoder with multi-scale input injection.

A network is a :class:`NetworkGraph`: an ordered list of primitive layer nodes
wired by tensor names, checked as a DAG with networkx, plus a
:class:`ParameterStore`. The same graph machinery runs single ResBlocks and
DecodeBlocks, which is what the block-level operations and gradient checks use.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from cdsl.constants import ALLOWED_SCALE_FACTORS, SPATIAL_DIVISOR, STORAGE_DTYPE
from cdsl.data.resize import target_size
from cdsl.errors import ConfigError, NumericalError, ShapeError

from .layers import LayerSpec, ParamInfo, Shape, get_layer
from .params import ParameterStore

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]

SCALE_LABELS = {0.5: "half", 0.25: "quarter", 0.125: "eighth"}

VARIANTS: Dict[str, Tuple[float, ...]] = {
    "plain": (),
    "dual": (0.5,),
    "triad": (0.5, 0.25),
    "multi": (0.5, 0.25, 0.125),
}


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture of one LinkNet stage.

    ``scale_inputs`` selects which resized copies of the input are concatenated
    into the encoder: 1/2 after the initial conv, 1/4 after the max-pool and
    1/8 after encoder block 2. ``{1/2}`` is the dual-scale network.
    """

    in_channels: int = 1
    base_channels: int = 64
    encoder_channels: Tuple[int, ...] = (64, 128, 256, 512)
    scale_inputs: Tuple[float, ...] = ()
    input_size: Tuple[int, int] = (256, 256)
    classes: int = 1
    head_channels: int = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        scales = tuple(sorted({float(f) for f in self.scale_inputs}, reverse=True))
        object.__setattr__(self, "scale_inputs", scales)
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))

        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.classes != 1:
            raise ConfigError(
                f"Only binary segmentation is supported (classes=1), got {self.classes}"
            )
        for factor in self.scale_inputs:
            if factor not in ALLOWED_SCALE_FACTORS:
                raise ConfigError(
                    f"Unsupported scale input {factor}; allowed: {ALLOWED_SCALE_FACTORS}"
                )
        if len(self.encoder_channels) != 4:
            raise ConfigError(
                f"encoder_channels must list 4 blocks, got {list(self.encoder_channels)}"
            )
        if any(b <= a for a, b in zip(self.encoder_channels, self.encoder_channels[1:])):
            raise ConfigError(
                f"encoder_channels must be strictly increasing, got {list(self.encoder_channels)}"
            )
        if min(self.base_channels, self.head_channels, *self.encoder_channels) < 1:
            raise ConfigError("Channel counts must be positive")
        if len(self.input_size) != 2 or any(
            s < SPATIAL_DIVISOR or s % SPATIAL_DIVISOR for s in self.input_size
        ):
            raise ConfigError(
                f"input_size {self.input_size} must be two positive multiples of {SPATIAL_DIVISOR}"
            )

    @classmethod
    def variant(cls, name: str, **kwargs: Any) -> NetworkConfig:
        """Config for a named scale variant: plain, dual, triad or multi."""
        if name not in VARIANTS:
            raise ConfigError(f"Unknown variant '{name}'; expected one of {sorted(VARIANTS)}")
        return cls(scale_inputs=VARIANTS[name], **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "encoder_channels": list(self.encoder_channels),
            "scale_inputs": list(self.scale_inputs),
            "input_size": list(self.input_size),
            "classes": self.classes,
            "head_channels": self.head_channels,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> NetworkConfig:
        known = {key: value for key, value in data.items() if key in cls.__dataclass_fields__}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"Unknown network config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass(frozen=True)
class GraphNode:
    """One layer application; its output tensor is named after the node."""

    name: str
    spec: LayerSpec
    inputs: Tuple[str, ...]
    param_names: Tuple[str, ...] = ()


@dataclass
class Gradients:
    """Result of a backward pass."""

    params: Dict[str, np.ndarray]
    input: np.ndarray


@dataclass
class _ForwardCache:
    batch: np.ndarray
    train: bool
    layer_caches: Dict[str, Any]


@dataclass(eq=False)
class NetworkGraph:
    """Shape-checked, acyclic layer graph with its parameters.

    ``shapes`` holds the inferred shape of every tensor for batch size 1.
    The wiring is immutable; the activation cache of the most recent forward
    pass is runtime state.
    """

    nodes: Tuple[GraphNode, ...]
    input_shape: Shape
    output_name: str
    parameters: ParameterStore
    shapes: Dict[str, Shape]
    param_info: Dict[str, ParamInfo]
    config: Optional[NetworkConfig] = None
    block_outputs: Dict[str, str] = field(default_factory=dict)
    input_name: str = "input"
    _cache: Optional[_ForwardCache] = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        dag = self.to_networkx()
        if not nx.is_directed_acyclic_graph(dag):
            raise ShapeError("Network wiring contains a cycle")
        seen = {self.input_name}
        for node in self.nodes:
            missing = [name for name in node.inputs if name not in seen]
            if missing:
                raise ShapeError(f"Node '{node.name}' reads undefined tensors {missing}")
            seen.add(node.name)
        for name, info in self.param_info.items():
            if name not in self.parameters:
                raise ShapeError(f"Missing parameter '{name}'")
            if tuple(self.parameters[name].shape) != tuple(info.shape):
                raise ShapeError(
                    f"Parameter '{name}' has shape {self.parameters[name].shape}, "
                    f"expected {info.shape}"
                )

    def to_networkx(self) -> nx.DiGraph:
        """Tensor-flow graph: one vertex per tensor, edges from inputs to consumers."""
        dag = nx.DiGraph()
        dag.add_node(self.input_name, kind="input", shape=self.input_shape)
        for node in self.nodes:
            dag.add_node(node.name, kind=node.spec.kind, shape=self.shapes[node.name])
            for source in node.inputs:
                dag.add_edge(source, node.name)
        return dag

    @property
    def input_size(self) -> Tuple[int, int]:
        return (int(self.input_shape[2]), int(self.input_shape[3]))

    @property
    def in_channels(self) -> int:
        return int(self.input_shape[1])

    def shape_trace(self) -> List[Tuple[str, Shape]]:
        """Inferred (tensor, shape) pairs in execution order, batch size 1."""
        return [(self.input_name, self.input_shape)] + [
            (node.name, self.shapes[node.name]) for node in self.nodes
        ]

    def encoder_spatial_sizes(self) -> List[int]:
        """Spatial height after the initial conv, the max-pool and each encoder block."""
        keys = ["init", "pool", "enc1", "enc2", "enc3", "enc4"]
        marks = self.block_outputs
        return [int(self.shapes[marks[key]][2]) for key in keys if key in marks]

    def node_params(self, node: GraphNode) -> Dict[str, np.ndarray]:
        return self.parameters.local(node.name, node.param_names)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Eval-mode forward pass."""
        return forward(self, batch, "eval")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.to_dict() if self.config else None,
            "input_shape": list(self.input_shape),
            "output": self.output_name,
            "nodes": [
                {**node.spec.to_dict(), "inputs": list(node.inputs)} for node in self.nodes
            ],
            "num_parameters": self.parameters.num_parameters(),
        }

    def clear_cache(self) -> None:
        self._cache = None


class _GraphBuilder:
    """Appends nodes while inferring shapes and collecting parameter specs."""

    def __init__(self, input_shape: Shape, input_name: str = "input") -> None:
        self.input_name = input_name
        self.input_shape = tuple(input_shape)
        self.nodes: List[GraphNode] = []
        self.shapes: Dict[str, Shape] = {input_name: self.input_shape}
        self.param_info: Dict[str, ParamInfo] = {}
        self.block_outputs: Dict[str, str] = {}

    def add(self, kind: str, name: str, inputs: Sequence[str], **attrs: Any) -> str:
        if name in self.shapes:
            raise ShapeError(f"Duplicate node name '{name}'")
        spec = LayerSpec(kind=kind, name=name, **attrs)  # type: ignore[arg-type]
        layer = get_layer(kind)
        in_shapes = [self.shapes[source] for source in inputs]
        out_shape = layer.infer_shape(spec, in_shapes)
        infos = layer.param_info(spec, in_shapes)
        for local_name, info in infos.items():
            self.param_info[_join(name, local_name)] = info
        self.nodes.append(GraphNode(name, spec, tuple(inputs), tuple(infos)))
        self.shapes[name] = out_shape
        return name

    def channels(self, tensor: str) -> int:
        return int(self.shapes[tensor][1])

    def spatial(self, tensor: str) -> Tuple[int, int]:
        return (int(self.shapes[tensor][2]), int(self.shapes[tensor][3]))

    def conv_bn_relu(
        self,
        prefix: str,
        x: str,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        pad: int = 0,
        transposed: bool = False,
        output_padding: int = 0,
        suffix: str = "",
    ) -> str:
        kind = "transposed_conv" if transposed else "conv"
        conv_name = "tconv" if transposed else "conv"
        attrs: Dict[str, Any] = dict(
            kernel=kernel, stride=stride, pad=pad, out_channels=out_channels
        )
        if transposed:
            attrs["output_padding"] = output_padding
        x = self.add(kind, _join(prefix, f"{conv_name}{suffix}"), [x], **attrs)
        x = self.add("batch_norm", _join(prefix, f"bn{suffix}"), [x])
        return self.add("relu", _join(prefix, f"relu{suffix}"), [x])

    def res_block(self, prefix: str, x: str, out_channels: int, stride: int) -> str:
        """conv3x3(stride)-BN-ReLU-conv3x3-BN plus a (projected) shortcut, then ReLU."""
        if stride not in (1, 2):
            raise ShapeError(f"ResBlock '{prefix}': stride must be 1 or 2, got {stride}")
        in_channels = self.channels(x)
        h = self.conv_bn_relu(prefix, x, out_channels, 3, stride, 1, suffix="1")
        h = self.add(
            "conv", _join(prefix, "conv2"), [h], kernel=3, pad=1, out_channels=out_channels
        )
        h = self.add("batch_norm", _join(prefix, "bn2"), [h])
        shortcut = x
        if stride != 1 or in_channels != out_channels:
            shortcut = self.add(
                "conv", _join(prefix, "proj"), [x], stride=stride, out_channels=out_channels
            )
            shortcut = self.add("batch_norm", _join(prefix, "proj_bn"), [shortcut])
        h = self.add("add", _join(prefix, "add"), [h, shortcut])
        return self.add("relu", _join(prefix, "out"), [h])

    def decode_block(self, prefix: str, x: str, out_channels: int) -> str:
        """1x1 conv to c/4, 3x3 stride-2 transposed conv, 1x1 conv to ``out_channels``."""
        in_channels = self.channels(x)
        if in_channels % 4:
            raise ShapeError(
                f"DecodeBlock '{prefix}': input channels {in_channels} not divisible by 4"
            )
        mid = in_channels // 4
        h = self.conv_bn_relu(prefix, x, mid, 1, suffix="1")
        h = self.conv_bn_relu(
            prefix, h, mid, 3, 2, 1, transposed=True, output_padding=1, suffix="2"
        )
        return self.conv_bn_relu(prefix, h, out_channels, 1, suffix="3")

    def inject(self, source: str, site: str, factor: float) -> str:
        """Concatenate the input resized by ``factor`` onto tensor ``site``."""
        label = SCALE_LABELS.get(factor, str(factor))
        height, width = self.spatial(self.input_name)
        try:
            resized = (target_size(height, factor), target_size(width, factor))
        except ShapeError as e:
            raise ShapeError(f"Cannot build {label}-scale input: {e}") from e
        if resized != self.spatial(site):
            raise ShapeError(
                f"Cannot inject {label}-scale input {resized} at '{site}' "
                f"with spatial size {self.spatial(site)}"
            )
        scaled = self.add("bilinear_resize", f"inject_{label}.resize", [source], factor=factor)
        return self.add("concat", f"inject_{label}.concat", [site, scaled])

    def build(
        self,
        output: str,
        parameters: ParameterStore,
        config: Optional[NetworkConfig] = None,
    ) -> NetworkGraph:
        return NetworkGraph(
            nodes=tuple(self.nodes),
            input_shape=self.input_shape,
            output_name=output,
            parameters=parameters,
            shapes=dict(self.shapes),
            param_info=dict(self.param_info),
            config=config,
            block_outputs=dict(self.block_outputs),
            input_name=self.input_name,
        )


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def _network_builder(config: NetworkConfig) -> Tuple[_GraphBuilder, str]:
    height, width = config.input_size
    builder = _GraphBuilder((1, config.in_channels, height, width))
    scales = set(config.scale_inputs)
    enc = config.encoder_channels
    marks = builder.block_outputs

    x = builder.conv_bn_relu("init", "input", config.base_channels, 7, 2, 3)
    marks["init"] = x
    if 0.5 in scales:
        x = builder.inject("input", x, 0.5)
    x = builder.add("max_pool", "init.pool", [x], kernel=3, stride=2, pad=1)
    marks["pool"] = x
    if 0.25 in scales:
        x = builder.inject("input", x, 0.25)

    e1 = builder.res_block("enc1", x, enc[0], 1)
    e2 = builder.res_block("enc2", e1, enc[1], 2)
    x = e2
    if 0.125 in scales:
        x = builder.inject("input", e2, 0.125)
    e3 = builder.res_block("enc3", x, enc[2], 2)
    e4 = builder.res_block("enc4", e3, enc[3], 2)
    marks.update(enc1=e1, enc2=e2, enc3=e3, enc4=e4)

    d = builder.decode_block("dec4", e4, enc[2])
    d = builder.add("add", "skip3", [d, e3])
    d = builder.decode_block("dec3", d, enc[1])
    d = builder.add("add", "skip2", [d, e2])
    d = builder.decode_block("dec2", d, enc[0])
    d = builder.add("add", "skip1", [d, e1])
    d = builder.decode_block("dec1", d, config.base_channels)
    marks["dec1"] = d

    h = builder.conv_bn_relu(
        "head", d, config.head_channels, 3, 2, 1, transposed=True, output_padding=1, suffix="1"
    )
    h = builder.conv_bn_relu("head", h, config.head_channels, 3, 1, 1, suffix="2")
    # Encoder and decoder balance at H/2, so only the first head layer upsamples.
    h = builder.add(
        "transposed_conv", "head.tconv3", [h], kernel=3, pad=1, out_channels=config.classes
    )
    out = builder.add("sigmoid", "head.sigmoid", [h])

    expected = (1, config.classes, height, width)
    if builder.shapes[out] != expected:
        raise ShapeError(f"Network output shape {builder.shapes[out]} != expected {expected}")
    return builder, out


def init_store(
    param_info: Mapping[str, ParamInfo], seed: int, dtype: type = STORAGE_DTYPE
) -> ParameterStore:
    """Initialise tensors in ``param_info`` order from one generator seeded with ``seed``."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, info in param_info.items():
        if info.init == "he":
            std = np.sqrt(2.0 / info.fan_in)
            array = rng.standard_normal(info.shape) * std
        elif info.init == "ones":
            array = np.ones(info.shape)
        else:
            array = np.zeros(info.shape)
        store[name] = array.astype(dtype)
    return store


def init_parameters(config: NetworkConfig, seed: int) -> ParameterStore:
    """He-normal conv weights, zero biases, identity batch norm; deterministic per seed."""
    builder, _ = _network_builder(config)
    return init_store(builder.param_info, seed)


def build_network(config: NetworkConfig, seed: int = 0) -> NetworkGraph:
    """Build and shape-check the network described by ``config``.

    Args:
        config: Architecture description.
        seed: Parameter initialisation seed.

    Returns:
        NetworkGraph with freshly initialised parameters.

    Raises:
        ShapeError: If a scale injection site cannot match its factor or shape
            inference fails anywhere.
    """
    builder, out = _network_builder(config)
    graph = builder.build(out, init_store(builder.param_info, seed), config)
    logger.debug(
        "Built network: %d layers, %d parameters, scales=%s",
        len(graph.nodes),
        graph.parameters.num_parameters(),
        list(config.scale_inputs),
    )
    return graph


def _check_batch(graph: NetworkGraph, batch: np.ndarray, train: bool) -> None:
    expected = graph.input_shape
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(expected[1:]):
        dims = ", ".join(map(str, expected[1:]))
        raise ShapeError(f"Batch shape {batch.shape} does not match (n, {dims})")
    has_bn = any(node.spec.kind == "batch_norm" for node in graph.nodes)
    if train and has_bn and batch.shape[0] < 2:
        raise ShapeError("Train-mode forward needs a batch of at least 2 (batch norm)")


def forward(
    graph: NetworkGraph,
    batch: np.ndarray,
    mode: Mode = "eval",
    keep_cache: Optional[bool] = None,
) -> np.ndarray:
    """Run the graph on ``batch``.

    Scale inputs are computed inside the graph from ``batch``. Train mode uses
    batch statistics and updates the BN running statistics; eval mode uses the
    running statistics and is a pure function of (parameters, batch).

    The activations :func:`backward` needs are stored on the graph only when
    ``keep_cache`` is true, which defaults to train mode. Plain eval-mode
    prediction leaves the graph untouched, so it can be shared across threads;
    training and backward passes are single-threaded per graph.

    Raises:
        ShapeError: If the batch does not match the graph's input shape.
        NumericalError: If any layer produces NaN or Inf.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"Unknown mode '{mode}'")
    train = mode == "train"
    _check_batch(graph, batch, train)
    x = np.ascontiguousarray(batch, dtype=graph.parameters.dtype)

    tensors: Dict[str, np.ndarray] = {graph.input_name: x}
    caches: Dict[str, Any] = {}
    for node in graph.nodes:
        layer = get_layer(node.spec.kind)
        inputs = [tensors[source] for source in node.inputs]
        out, cache = layer.forward(node.spec, inputs, graph.node_params(node), train)
        if not np.isfinite(out).all():
            raise NumericalError(f"Layer '{node.name}' produced non-finite values")
        tensors[node.name] = out
        caches[node.name] = cache

    if keep_cache is None:
        keep_cache = train
    if keep_cache:
        graph._cache = _ForwardCache(batch=x, train=train, layer_caches=caches)
    return tensors[graph.output_name]


def backward(graph: NetworkGraph, batch: np.ndarray, upstream_gradient: np.ndarray) -> Gradients:
    """Gradients of ``sum(output * upstream_gradient)`` w.r.t. parameters and input.

    Uses the activations cached by the last :func:`forward` call on the same
    batch. Gradients from several consumers of one tensor are summed in reverse
    execution order, so the result is deterministic.

    Raises:
        ShapeError: If no forward pass is cached for ``batch`` or the upstream
            gradient has the wrong shape.
    """
    cache = graph._cache
    if cache is None:
        raise ShapeError("backward called without a cached forward pass")
    x = np.asarray(batch, dtype=graph.parameters.dtype)
    if x.shape != cache.batch.shape or not np.array_equal(x, cache.batch):
        raise ShapeError("backward batch differs from the cached forward batch")
    expected = (x.shape[0],) + tuple(graph.shapes[graph.output_name][1:])
    if tuple(upstream_gradient.shape) != expected:
        raise ShapeError(f"Upstream gradient shape {upstream_gradient.shape} != output {expected}")

    dtype = graph.parameters.dtype
    grads: Dict[str, np.ndarray] = {graph.output_name: upstream_gradient.astype(dtype)}
    param_grads: Dict[str, np.ndarray] = {}
    for node in reversed(graph.nodes):
        grad = grads.pop(node.name, None)
        if grad is None:
            continue
        layer = get_layer(node.spec.kind)
        input_grads, local_grads = layer.backward(
            node.spec, grad, cache.layer_caches[node.name], graph.node_params(node)
        )
        for local_name, value in local_grads.items():
            param_grads[_join(node.name, local_name)] = value.astype(dtype, copy=False)
        for source, value in zip(node.inputs, input_grads):
            if source in grads:
                grads[source] = grads[source] + value
            else:
                grads[source] = value

    for name in graph.parameters.trainable_names():
        if name not in param_grads:
            param_grads[name] = np.zeros_like(graph.parameters[name])
    ordered = {name: param_grads[name] for name in graph.parameters.trainable_names()}
    input_grad = grads.get(graph.input_name, np.zeros_like(x))
    return Gradients(params=ordered, input=input_grad.astype(dtype, copy=False))


def _block_store(params: Union[ParameterStore, Mapping[str, np.ndarray]]) -> ParameterStore:
    return params if isinstance(params, ParameterStore) else ParameterStore.from_mapping(params)


def res_block_graph(
    input_shape: Shape,
    out_channels: int,
    stride: int,
    params: Optional[Union[ParameterStore, Mapping[str, np.ndarray]]] = None,
    seed: int = 0,
) -> NetworkGraph:
    """Standalone ResBlock graph; parameters are initialised when not given."""
    builder = _GraphBuilder(tuple(input_shape))
    out = builder.res_block("", "input", out_channels, stride)
    store = _block_store(params) if params is not None else init_store(builder.param_info, seed)
    return builder.build(out, store)


def decode_block_graph(
    input_shape: Shape,
    out_channels: int,
    params: Optional[Union[ParameterStore, Mapping[str, np.ndarray]]] = None,
    seed: int = 0,
) -> NetworkGraph:
    """Standalone DecodeBlock graph; parameters are initialised when not given."""
    builder = _GraphBuilder(tuple(input_shape))
    out = builder.decode_block("", "input", out_channels)
    store = _block_store(params) if params is not None else init_store(builder.param_info, seed)
    return builder.build(out, store)


def res_block_forward(
    x: np.ndarray,
    params: Union[ParameterStore, Mapping[str, np.ndarray]],
    stride: int,
    mode: Mode = "train",
) -> np.ndarray:
    """Apply one ResBlock whose parameters use local names (``conv1.weight`` ...).

    Raises:
        ShapeError: If ``x`` has a different channel count than the block expects.
    """
    weight = params["conv1.weight"]
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"ResBlock expects {weight.shape[1]} input channels, got {x.shape[1]}"
        )
    graph = res_block_graph(x.shape, int(weight.shape[0]), stride, params)
    return forward(graph, x, mode)


def decode_block_forward(
    x: np.ndarray,
    params: Union[ParameterStore, Mapping[str, np.ndarray]],
    mode: Mode = "train",
) -> np.ndarray:
    """Apply one DecodeBlock; the target channel count comes from ``conv3.weight``."""
    weight = params["conv1.weight"]
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"DecodeBlock expects {weight.shape[1]} input channels, got {x.shape[1]}"
        )
    graph = decode_block_graph(x.shape, int(params["conv3.weight"].shape[0]), params)
    return forward(graph, x, mode)
