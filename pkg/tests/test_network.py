"""Layer shape rules, graph construction, forward/backward behaviour and initialisation."""

from __future__ import annotations

import numpy as np
import pytest

from cdsl.core.layers import LayerSpec, get_layer
from cdsl.core.network import (
    NetworkConfig,
    backward,
    build_network,
    decode_block_forward,
    decode_block_graph,
    forward,
    init_parameters,
    res_block_forward,
    res_block_graph,
)
from cdsl.errors import ConfigError, NumericalError, ShapeError

SMALL = dict(base_channels=8, encoder_channels=(8, 16, 32, 64), head_channels=8)


class TestLayerShapes:
    def test_conv_output_size(self) -> None:
        spec = LayerSpec("conv", "c", kernel=7, stride=2, pad=3, out_channels=64)
        assert get_layer("conv").infer_shape(spec, [(1, 1, 64, 64)]) == (1, 64, 32, 32)

    def test_transposed_conv_output_padding(self) -> None:
        spec = LayerSpec(
            "transposed_conv", "t", kernel=3, stride=2, pad=1, out_channels=32, output_padding=1
        )
        assert get_layer("transposed_conv").infer_shape(spec, [(1, 32, 16, 16)]) == (
            1,
            32,
            32,
            32,
        )
        no_pad = LayerSpec("transposed_conv", "t", kernel=3, stride=2, pad=1, out_channels=32)
        assert get_layer("transposed_conv").infer_shape(no_pad, [(1, 32, 16, 16)])[2] == 31

    def test_concat_rejects_spatial_mismatch(self) -> None:
        with pytest.raises(ShapeError, match="cannot concatenate"):
            get_layer("concat").infer_shape(
                LayerSpec("concat", "cat"), [(1, 2, 8, 8), (1, 1, 4, 4)]
            )

    def test_unknown_kind(self) -> None:
        with pytest.raises(ShapeError, match="Unsupported layer kind"):
            get_layer("dropout")


class TestLayerBehaviour:
    def test_concat_backward_splits_by_channel(self) -> None:
        layer = get_layer("concat")
        spec = LayerSpec("concat", "cat")
        a, b = np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 4, 4))
        _, cache = layer.forward(spec, [a, b], {}, True)
        grad = np.random.default_rng(0).standard_normal((1, 5, 4, 4))
        (grad_a, grad_b), _ = layer.backward(spec, grad, cache, {})
        assert np.array_equal(grad_a, grad[:, :2])
        assert np.array_equal(grad_b, grad[:, 2:])

    def test_max_pool_ties_route_to_first_maximum(self) -> None:
        layer = get_layer("max_pool")
        spec = LayerSpec("max_pool", "pool", kernel=2, stride=2)
        x = np.ones((1, 1, 2, 2))
        out, cache = layer.forward(spec, [x], {}, True)
        (grad,), _ = layer.backward(spec, np.ones_like(out), cache, {})
        assert grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_batch_norm_updates_running_stats_only_in_train(self) -> None:
        layer = get_layer("batch_norm")
        spec = LayerSpec("batch_norm", "bn")
        params = {
            "gamma": np.ones(2),
            "beta": np.zeros(2),
            "running_mean": np.zeros(2),
            "running_var": np.ones(2),
        }
        x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)) + 5.0
        layer.forward(spec, [x], params, False)
        assert np.array_equal(params["running_mean"], np.zeros(2))
        out, _ = layer.forward(spec, [x], params, True)
        assert np.allclose(params["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))
        count = 4 * 3 * 3
        expected_var = 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * count / (count - 1)
        assert np.allclose(params["running_var"], expected_var)
        assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)

    def test_sigmoid_stays_inside_open_interval(self) -> None:
        x = np.array([[[[-200.0, 200.0]]]], dtype=np.float32)
        out, _ = get_layer("sigmoid").forward(LayerSpec("sigmoid", "s"), [x], {}, True)
        assert 0.0 < out.min() and out.max() < 1.0


class TestNetworkConfig:
    def test_scale_inputs_are_normalised(self) -> None:
        config = NetworkConfig(scale_inputs=(0.125, 0.5, 0.5))
        assert config.scale_inputs == (0.5, 0.125)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"scale_inputs": (0.3,)},
            {"input_size": (48, 64)},
            {"classes": 2},
            {"encoder_channels": (64, 64, 128, 256)},
            {"in_channels": 0},
        ],
    )
    def test_invalid_configs(self, kwargs: dict) -> None:
        with pytest.raises(ConfigError):
            NetworkConfig(**kwargs)

    def test_dict_roundtrip_and_unknown_keys(self) -> None:
        config = NetworkConfig.variant("triad", **SMALL)
        assert NetworkConfig.from_dict(config.to_dict()) == config
        with pytest.raises(ConfigError, match="Unknown network config keys"):
            NetworkConfig.from_dict({"depth": 3})


class TestBuildNetwork:
    def test_plain_trace(self) -> None:
        graph = build_network(NetworkConfig(input_size=(64, 64), **SMALL))
        assert graph.encoder_spatial_sizes() == [32, 16, 16, 8, 4, 2]
        assert graph.shape_trace()[-1][1] == (1, 1, 64, 64)
        assert not any(name.startswith("inject") for name, _ in graph.shape_trace())

    def test_dual_scale_concat_channels(self) -> None:
        graph = build_network(NetworkConfig(input_size=(64, 64), scale_inputs=(0.5,)))
        assert graph.shapes["inject_half.concat"] == (1, 65, 32, 32)
        pool = next(node for node in graph.nodes if node.name == "init.pool")
        assert pool.inputs == ("inject_half.concat",)

    @pytest.mark.parametrize("variant", ["plain", "dual", "triad", "multi"])
    def test_variants_build(self, variant: str) -> None:
        graph = build_network(NetworkConfig.variant(variant, input_size=(64, 64), **SMALL))
        assert graph.shapes[graph.output_name] == (1, 1, 64, 64)

    def test_multi_scale_injection_sites(self) -> None:
        graph = build_network(NetworkConfig.variant("multi", input_size=(64, 64), **SMALL))
        assert graph.shapes["inject_quarter.concat"] == (1, 10, 16, 16)
        assert graph.shapes["inject_eighth.concat"] == (1, 17, 8, 8)
        enc3 = next(node for node in graph.nodes if node.name == "enc3.conv1")
        assert enc3.inputs == ("inject_eighth.concat",)

    def test_graph_is_acyclic_with_networkx(self) -> None:
        import networkx as nx

        graph = build_network(NetworkConfig.variant("dual", input_size=(64, 64), **SMALL))
        dag = graph.to_networkx()
        assert nx.is_directed_acyclic_graph(dag)
        assert dag.in_degree("skip3") == 2

    def test_random_configs_match_runtime_shapes(self) -> None:
        rng = np.random.default_rng(0)
        variants = ["plain", "dual", "triad", "multi"]
        for _ in range(6):
            size = int(rng.choice([32, 64]))
            base = int(rng.choice([4, 8]))
            config = NetworkConfig(
                in_channels=int(rng.integers(1, 3)),
                base_channels=base,
                encoder_channels=(4, 8, 12, 16),
                scale_inputs=NetworkConfig.variant(variants[int(rng.integers(0, 4))]).scale_inputs,
                input_size=(size, size),
                head_channels=4,
            )
            graph = build_network(config)
            batch = rng.random((2, config.in_channels, size, size)).astype(np.float32)
            out = forward(graph, batch, "eval")
            assert out.shape == (2, 1, size, size)
            assert graph.shapes[graph.output_name][1:] == out.shape[1:]


class TestForward:
    def test_eval_is_pure(self, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config, seed=1)
        batch = np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32)
        assert np.array_equal(forward(graph, batch), forward(graph, batch))

    def test_output_is_probability_map(self, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config, seed=1)
        out = forward(graph, np.random.default_rng(0).random((3, 1, 64, 64)))
        assert out.shape == (3, 1, 64, 64)
        assert out.dtype == np.float32
        assert 0.0 < out.min() and out.max() < 1.0

    def test_untrained_output_mean_is_moderate(self) -> None:
        """Mean output over 10 initialisations lies in (0.2, 0.8).

        Train mode, because freshly initialised running statistics (mean 0, var 1)
        do not describe the activations yet. A single seed can drift further
        towards 0 or 1, so only the average over seeds is bounded.
        """
        config = NetworkConfig.variant("dual", input_size=(64, 64), **SMALL)
        rng = np.random.default_rng(0)
        means = []
        for seed in range(10):
            graph = build_network(config, seed=seed)
            means.append(float(forward(graph, rng.random((2, 1, 64, 64)), "train").mean()))
        assert 0.2 < float(np.mean(means)) < 0.8

    def test_train_mode_needs_two_samples(self, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config)
        with pytest.raises(ShapeError, match="at least 2"):
            forward(graph, np.zeros((1, 1, 64, 64)), "train")

    def test_wrong_batch_shape(self, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config)
        with pytest.raises(ShapeError, match="does not match"):
            forward(graph, np.zeros((2, 1, 32, 32)))

    def test_nan_input_names_layer(self, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config)
        batch = np.zeros((2, 1, 64, 64))
        batch[0, 0, 0, 0] = np.nan
        with pytest.raises(NumericalError, match="Layer 'init.conv'"):
            forward(graph, batch)


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config)
        batch = np.random.default_rng(0).random((2, 1, 64, 64))
        out = forward(graph, batch, "train")
        grads = backward(graph, batch, np.zeros_like(out))
        assert all(not g.any() for g in grads.params.values())
        assert not grads.input.any()
        assert list(grads.params) == graph.parameters.trainable_names()

    def test_requires_cached_forward(self, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config)
        with pytest.raises(ShapeError, match="without a cached forward"):
            backward(graph, np.zeros((2, 1, 64, 64)), np.zeros((2, 1, 64, 64)))

    def test_eval_prediction_leaves_graph_untouched(self, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config)
        batch = np.random.default_rng(0).random((2, 1, 64, 64))
        graph.predict(batch)
        assert graph._cache is None

        out = forward(graph, batch, "train")
        cached = graph._cache
        graph.predict(np.zeros((3, 1, 64, 64)))
        assert graph._cache is cached
        backward(graph, batch, np.ones_like(out))

    def test_eval_backward_on_request(self, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config)
        batch = np.random.default_rng(1).random((2, 1, 64, 64))
        out = forward(graph, batch, "eval", keep_cache=True)
        grads = backward(graph, batch, np.ones_like(out))
        assert grads.input.shape == batch.shape

    def test_batch_must_match_cache(self, tiny_config: NetworkConfig) -> None:
        graph = build_network(tiny_config)
        batch = np.zeros((2, 1, 64, 64))
        out = forward(graph, batch, "train")
        with pytest.raises(ShapeError, match="differs"):
            backward(graph, batch + 1.0, np.ones_like(out))


class TestBlocks:
    def test_res_block_shape(self) -> None:
        params = res_block_graph((1, 64, 32, 32), 128, stride=2).parameters
        y = res_block_forward(np.zeros((1, 64, 32, 32)), params, stride=2, mode="eval")
        assert y.shape == (1, 128, 16, 16)

    def test_res_block_zero_weights_is_relu(self) -> None:
        params = res_block_graph((2, 4, 8, 8), 4, stride=1).parameters
        for name in params.trainable_names():
            if name.endswith(".weight"):
                params[name][...] = 0.0
        x = np.random.default_rng(0).standard_normal((2, 4, 8, 8)).astype(np.float32)
        y = res_block_forward(x, params, stride=1)
        assert np.array_equal(y, np.maximum(x, 0))

    def test_res_block_channel_mismatch(self) -> None:
        params = res_block_graph((1, 4, 8, 8), 8, stride=2).parameters
        with pytest.raises(ShapeError, match="input channels"):
            res_block_forward(np.zeros((2, 3, 8, 8)), params, stride=2)

    def test_decode_block_shape(self) -> None:
        params = decode_block_graph((1, 128, 16, 16), 64).parameters
        y = decode_block_forward(np.zeros((1, 128, 16, 16)), params, mode="eval")
        assert y.shape == (1, 64, 32, 32)

    def test_decode_block_needs_channels_divisible_by_four(self) -> None:
        with pytest.raises(ShapeError, match="divisible by 4"):
            decode_block_graph((1, 6, 8, 8), 4)


class TestInitParameters:
    def test_deterministic(self, tiny_config: NetworkConfig) -> None:
        assert init_parameters(tiny_config, 3).equals(init_parameters(tiny_config, 3))
        assert not init_parameters(tiny_config, 3).equals(init_parameters(tiny_config, 4))

    def test_biases_zero_and_bn_identity(self, tiny_config: NetworkConfig) -> None:
        store = init_parameters(tiny_config, 0)
        for name, array in store.items():
            if name.endswith((".bias", ".beta", ".running_mean")):
                assert not array.any(), name
            if name.endswith((".gamma", ".running_var")):
                assert np.all(array == 1.0), name

    def test_he_std(self) -> None:
        store = init_parameters(NetworkConfig(input_size=(64, 64)), 0)
        weight = store["enc1.conv2.weight"]
        assert weight.shape == (64, 64, 3, 3)
        expected = np.sqrt(2.0 / 576)
        assert abs(float(weight.std()) - expected) < 0.2 * expected
