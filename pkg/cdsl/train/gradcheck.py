"""Central finite-difference verification of the hand-written backward passes.

Every check runs in float64. A component is wrapped as an :class:`Objective`:
a scalar function of named arrays that also returns its analytic gradient.
Layers and graphs are reduced to a scalar with a fixed random projection
``sum(output * W)``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from cdsl.constants import CHECK_DTYPE
from cdsl.core.layers import LayerSpec, Shape, get_layer
from cdsl.core.losses import combined_loss, combined_loss_grad
from cdsl.core.network import (
    Mode,
    NetworkConfig,
    NetworkGraph,
    backward,
    build_network,
    decode_block_graph,
    forward,
    init_store,
    res_block_graph,
)
from cdsl.errors import ConfigError

logger = logging.getLogger(__name__)

EPSILON = 1e-3
MAX_COORDS = 200
TOLERANCE = 1e-4


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a|, |n|, 1e-8)."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


class Objective(ABC):
    """Scalar function of mutable float64 arrays with an analytic gradient."""

    name: str = "objective"

    @abstractmethod
    def variables(self) -> Dict[str, np.ndarray]:
        """Arrays to perturb; modified in place by the checker."""
        pass

    @abstractmethod
    def loss(self) -> float:
        pass

    @abstractmethod
    def gradient(self) -> Dict[str, np.ndarray]:
        """Analytic gradient for every entry of :meth:`variables`."""
        pass

    def regime(self) -> Hashable:
        """Fingerprint of the piecewise-linear branch taken by the last evaluation.

        Coordinates whose perturbation changes the fingerprint straddle a
        ReLU or max-pool kink and are skipped.
        """
        return None


class FunctionObjective(Objective):
    """Objective from plain callables over a dict of arrays."""

    def __init__(
        self,
        name: str,
        arrays: Dict[str, np.ndarray],
        fn: Callable[[Dict[str, np.ndarray]], float],
        grad_fn: Callable[[Dict[str, np.ndarray]], Dict[str, np.ndarray]],
    ):
        self.name = name
        self.arrays = {key: np.asarray(value, dtype=CHECK_DTYPE) for key, value in arrays.items()}
        self.fn = fn
        self.grad_fn = grad_fn

    def variables(self) -> Dict[str, np.ndarray]:
        return self.arrays

    def loss(self) -> float:
        return float(self.fn(self.arrays))

    def gradient(self) -> Dict[str, np.ndarray]:
        return self.grad_fn(self.arrays)


def _fingerprint(kinds_and_caches: Sequence[Tuple[str, Any]]) -> str:
    digest = hashlib.sha1()
    for kind, cache in kinds_and_caches:
        if kind == "relu":
            digest.update(np.packbits(cache).tobytes())
        elif kind == "max_pool":
            digest.update(cache[2].tobytes())
    return digest.hexdigest()


class LayerObjective(Objective):
    """One primitive layer, with its inputs and parameters as variables."""

    def __init__(
        self,
        spec: LayerSpec,
        input_dims: Shape,
        seed: int = 0,
        train: bool = True,
    ):
        self.name = spec.kind
        self.spec = spec
        self.train = train
        self.layer = get_layer(spec.kind)
        rng = np.random.default_rng(seed)
        in_shapes = [tuple(input_dims)] * self.layer.num_inputs
        out_shape = self.layer.infer_shape(spec, in_shapes)
        infos = self.layer.param_info(spec, in_shapes)
        self.params = init_store(infos, seed, dtype=CHECK_DTYPE).tensors
        for name, info in infos.items():
            if info.trainable and info.init != "he":
                self.params[name] = self.params[name] + 0.1 * rng.standard_normal(info.shape)
        self.inputs = [rng.standard_normal(shape) for shape in in_shapes]
        self.weights = rng.standard_normal(out_shape)
        self._trainable = [name for name, info in infos.items() if info.trainable]
        self._cache: Any = None

    def variables(self) -> Dict[str, np.ndarray]:
        arrays = {f"input{i}": x for i, x in enumerate(self.inputs)}
        arrays.update({name: self.params[name] for name in self._trainable})
        return arrays

    def loss(self) -> float:
        out, self._cache = self.layer.forward(self.spec, self.inputs, self.params, self.train)
        return float(np.sum(out * self.weights))

    def gradient(self) -> Dict[str, np.ndarray]:
        self.loss()
        input_grads, param_grads = self.layer.backward(
            self.spec, self.weights, self._cache, self.params
        )
        grads = {f"input{i}": g for i, g in enumerate(input_grads)}
        grads.update({name: param_grads[name] for name in self._trainable})
        return grads

    def regime(self) -> Hashable:
        return _fingerprint([(self.spec.kind, self._cache)])


class GraphObjective(Objective):
    """A whole graph (block or network) in float64; parameters and input are variables."""

    def __init__(self, name: str, graph: NetworkGraph, mode: Mode = "eval", seed: int = 0):
        self.name = name
        self.mode = mode
        rng = np.random.default_rng(seed)
        self.graph = dataclasses.replace(graph, parameters=graph.parameters.astype(CHECK_DTYPE))
        self.batch = rng.standard_normal((2,) + tuple(graph.input_shape[1:]))
        out_shape = (2,) + tuple(graph.shapes[graph.output_name][1:])
        self.weights = rng.standard_normal(out_shape)

    def variables(self) -> Dict[str, np.ndarray]:
        store = self.graph.parameters
        arrays = {name: store[name] for name in store.trainable_names()}
        arrays["input"] = self.batch
        return arrays

    def loss(self) -> float:
        out = forward(self.graph, self.batch, self.mode, keep_cache=True)
        return float(np.sum(out * self.weights))

    def gradient(self) -> Dict[str, np.ndarray]:
        forward(self.graph, self.batch, self.mode, keep_cache=True)
        grads = backward(self.graph, self.batch, self.weights)
        return {**grads.params, "input": grads.input}

    def regime(self) -> Hashable:
        cache = self.graph._cache
        if cache is None:
            return None
        return _fingerprint(
            [(node.spec.kind, cache.layer_caches[node.name]) for node in self.graph.nodes]
        )


@dataclass
class GradCheckResult:
    """Outcome of one finite-difference check."""

    component: str
    max_rel_error: float
    checked: int
    skipped: int
    per_variable: Dict[str, float] = field(default_factory=dict)

    def passed(self, tolerance: float = TOLERANCE) -> bool:
        return self.checked > 0 and self.max_rel_error < tolerance

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def grad_check(
    objective: Objective,
    seed: int = 0,
    epsilon: float = EPSILON,
    max_coords: int = MAX_COORDS,
) -> GradCheckResult:
    """Compare analytic and central-difference gradients of ``objective``.

    Tensors with more than ``max_coords`` entries are checked on a seeded
    random subsample of ``max_coords`` coordinates.

    Args:
        objective: Component under test.
        seed: Subsampling seed.
        epsilon: Finite-difference step.
        max_coords: Per-tensor coordinate budget.

    Returns:
        GradCheckResult with the maximum relative error over checked coordinates.
    """
    rng = np.random.default_rng(seed)
    analytic = {name: np.array(g, dtype=CHECK_DTYPE) for name, g in objective.gradient().items()}
    baseline = objective.regime()
    checked = skipped = 0
    per_variable: Dict[str, float] = {}

    for name, array in objective.variables().items():
        if analytic[name].shape != array.shape:
            raise ConfigError(
                f"{objective.name}: gradient of '{name}' has shape {analytic[name].shape}, "
                f"variable has {array.shape}"
            )
        if array.size > max_coords:
            coords = np.sort(rng.choice(array.size, size=max_coords, replace=False))
        else:
            coords = np.arange(array.size)
        flat = array.reshape(-1)
        worst = 0.0
        for index in coords:
            original = flat[index]
            flat[index] = original + epsilon
            plus = objective.loss()
            plus_regime = objective.regime()
            flat[index] = original - epsilon
            minus = objective.loss()
            minus_regime = objective.regime()
            flat[index] = original
            if plus_regime != baseline or minus_regime != baseline:
                skipped += 1
                continue
            numeric = (plus - minus) / (2 * epsilon)
            worst = max(worst, relative_error(float(analytic[name].flat[index]), numeric))
            checked += 1
        per_variable[name] = worst

    result = GradCheckResult(
        component=objective.name,
        max_rel_error=max(per_variable.values(), default=0.0),
        checked=checked,
        skipped=skipped,
        per_variable=per_variable,
    )
    logger.debug(
        "%s: max rel error %.3e (%d checked, %d skipped at kinks)",
        result.component,
        result.max_rel_error,
        checked,
        skipped,
    )
    return result


ObjectiveFactory = Callable[[Optional[Shape], int], Objective]
COMPONENTS: Dict[str, ObjectiveFactory] = {}

LAYER_DIMS: Shape = (2, 3, 8, 8)


def register(name: str) -> Callable[[ObjectiveFactory], ObjectiveFactory]:
    """Register an objective factory under ``name`` for :func:`check_component`."""

    def decorator(factory: ObjectiveFactory) -> ObjectiveFactory:
        COMPONENTS[name] = factory
        return factory

    return decorator


def _layer_factory(spec: LayerSpec, train: bool = True) -> ObjectiveFactory:
    def factory(input_dims: Optional[Shape], seed: int) -> Objective:
        return LayerObjective(spec, input_dims or LAYER_DIMS, seed, train)

    return factory


for _spec in (
    LayerSpec("conv", "conv", kernel=3, stride=2, pad=1, out_channels=4),
    LayerSpec(
        "transposed_conv", "tconv", kernel=3, stride=2, pad=1, out_channels=4, output_padding=1
    ),
    LayerSpec("batch_norm", "bn"),
    LayerSpec("relu", "relu"),
    LayerSpec("sigmoid", "sigmoid"),
    LayerSpec("max_pool", "pool", kernel=3, stride=2, pad=1),
    LayerSpec("add", "add"),
    LayerSpec("concat", "concat"),
    LayerSpec("bilinear_resize", "resize", factor=0.5),
):
    register(_spec.kind)(_layer_factory(_spec))

register("batch_norm_eval")(_layer_factory(LayerSpec("batch_norm", "bn"), train=False))


def _randomize_buffers(graph: NetworkGraph, seed: int) -> None:
    rng = np.random.default_rng(seed)
    for name, array in graph.parameters.items():
        if name.endswith(".running_mean"):
            array[...] = 0.1 * rng.standard_normal(array.shape)
        elif name.endswith(".running_var"):
            array[...] = rng.uniform(0.5, 1.5, array.shape)


@register("res_block")
def _res_block(input_dims: Optional[Shape], seed: int) -> Objective:
    dims = input_dims or (2, 4, 8, 8)
    graph = res_block_graph((1,) + tuple(dims[1:]), 2 * dims[1], stride=2, seed=seed)
    _randomize_buffers(graph, seed)
    return GraphObjective("res_block", graph, mode="eval", seed=seed)


@register("decode_block")
def _decode_block(input_dims: Optional[Shape], seed: int) -> Objective:
    dims = input_dims or (2, 8, 4, 4)
    graph = decode_block_graph((1,) + tuple(dims[1:]), dims[1] // 2, seed=seed)
    _randomize_buffers(graph, seed)
    return GraphObjective("decode_block", graph, mode="eval", seed=seed)


@register("network")
def _network(input_dims: Optional[Shape], seed: int) -> Objective:
    dims = input_dims or (2, 1, 32, 32)
    config = NetworkConfig(
        in_channels=dims[1],
        base_channels=4,
        encoder_channels=(4, 8, 12, 16),
        scale_inputs=(0.5,),
        input_size=(dims[2], dims[3]),
        head_channels=4,
    )
    graph = build_network(config, seed=seed)
    _randomize_buffers(graph, seed)
    return GraphObjective("network", graph, mode="eval", seed=seed)


@register("combined_loss")
def _combined_loss(input_dims: Optional[Shape], seed: int) -> Objective:
    rng = np.random.default_rng(seed)
    dims = input_dims or (2, 1, 8, 8)
    target = (rng.random(dims) < 0.3).astype(CHECK_DTYPE)
    return FunctionObjective(
        "combined_loss",
        {"P": rng.uniform(0.05, 0.95, dims)},
        lambda arrays: combined_loss(arrays["P"], target, use_dice=True),
        lambda arrays: {"P": combined_loss_grad(arrays["P"], target, use_dice=True)},
    )


def check_component(
    name: str, input_dims: Optional[Shape] = None, seed: int = 0
) -> GradCheckResult:
    """Run :func:`grad_check` on a registered component.

    Raises:
        ConfigError: If ``name`` is not registered.
    """
    if name not in COMPONENTS:
        raise ConfigError(
            f"Unknown grad-check component '{name}'; expected one of {sorted(COMPONENTS)}"
        )
    return grad_check(COMPONENTS[name](input_dims, seed), seed=seed)


def check_all(names: Optional[Sequence[str]] = None, seed: int = 0) -> List[GradCheckResult]:
    """Check ``names`` (default: every registered component) in registration order."""
    return [check_component(name, seed=seed) for name in (names or list(COMPONENTS))]
