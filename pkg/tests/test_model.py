import numpy as np
import pytest

from evmlp.errors import ConfigError, ShapeError
from evmlp.model import (
    TILE_ROWS,
    NetworkConfig,
    StageConfig,
    block_forward,
    bottleneck_forward,
    build_network,
    config_param_count,
    count_params,
    network_forward,
    network_from_params,
    run_block_rows,
    stage_forward,
)
from evmlp.numerics import DenseLayer, dense_forward, layer_norm, patchify
from oracles import params_loop_nest


class TestConfig:
    def test_t1_shape_chain(self, t1_config):
        assert t1_config.map_shapes() == [
            (224, 224, 3),
            (32, 32, 64),
            (16, 16, 128),
            (8, 8, 512),
            (4, 4, 512),
            (2, 2, 512),
            (1, 1, 512),
        ]

    def test_t1_rows(self, t1_config):
        rows = [(s.patch_side, s.expansion, s.out_dim, s.bottlenecks, s.dropout_p) for s in t1_config.stages]
        assert rows == [
            (7, 4, 64, 5, 0),
            (2, 4, 128, 5, 0),
            (2, 4, 512, 5, 0),
            (2, 4, 512, 5, 0),
            (2, 4, 512, 5, 0),
            (2, 4, 512, 5, 0.2),
        ]

    def test_divisibility_violation_names_stage(self):
        with pytest.raises(ConfigError, match=r"stages\[1\]"):
            NetworkConfig(12, 3, (StageConfig(2, 2, 4, 1), StageConfig(4, 2, 4, 1)), 2)

    def test_final_side_must_be_one(self):
        with pytest.raises(ConfigError, match="1x1"):
            NetworkConfig(8, 3, (StageConfig(2, 2, 4, 1),), 2)

    @pytest.mark.parametrize(
        "stage",
        [StageConfig(0, 2, 4, 1), StageConfig(8, 0.5, 4, 1), StageConfig(8, 2, 0, 1), StageConfig(8, 2, 4, -1),
         StageConfig(8, 2, 4, 1, 1.0), StageConfig(8, 1.3, 5, 1)],
    )
    def test_stage_invariants(self, stage):
        with pytest.raises(ConfigError):
            NetworkConfig(8, 3, (stage,), 2)

    def test_dict_round_trip(self, small_config):
        assert NetworkConfig.from_dict(small_config.to_dict()) == small_config


class TestBuild:
    def test_same_seed_bit_identical(self, small_config):
        a = build_network(small_config, 7).named_parameters()
        b = build_network(small_config, 7).named_parameters()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_different_seed_differs(self, small_config):
        a = build_network(small_config, 7).named_parameters()
        b = build_network(small_config, 8).named_parameters()
        assert not np.array_equal(a["head.weight"], b["head.weight"])

    def test_init_bounds(self, small_net):
        for name, arr in small_net.named_parameters().items():
            if name.endswith("gamma"):
                assert np.all(arr == 1)
            elif name.endswith("beta"):
                assert np.all(arr == 0)
            else:
                fan_in = small_net.named_parameters()[name.rsplit(".", 1)[0] + ".weight"].shape[1]
                assert np.all(np.abs(arr) <= np.sqrt(1.0 / fan_in) + 1e-7)

    def test_degenerate_single_stage(self):
        cfg = NetworkConfig(4, 3, (StageConfig(4, 1, 6, 0),), 2)
        net = build_network(cfg, 0, dtype=np.float64)
        assert len(net.blocks[0].bottlenecks) == 0
        img = np.random.default_rng(0).random((4, 4, 3))
        expected = dense_forward(net.head, dense_forward(net.blocks[0].mixer, img.reshape(-1)))
        np.testing.assert_allclose(network_forward(net, img), expected, rtol=1e-12)

    def test_from_params_names_missing_tensor(self, small_net):
        params = dict(small_net.named_parameters())
        del params["stage2.bn0.norm.gamma"]
        with pytest.raises(ShapeError, match="stage2.bn0.norm.gamma"):
            network_from_params(small_net.config, params)


class TestCountParams:
    def test_t1_total(self, t1_config):
        total = config_param_count(t1_config).total
        assert abs(total - 46.8e6) / 46.8e6 < 0.02

    def test_single_dense_head(self):
        layer = DenseLayer(np.zeros((1000, 512)), np.zeros(1000))
        assert layer.weight.size + layer.bias.size == 513_000

    def test_matches_loop_nest_recount(self, small_net, t1_config):
        stages, head = params_loop_nest(small_net.config)
        counted = count_params(small_net)
        assert list(counted.stages) == stages and counted.head == head
        stages, head = params_loop_nest(t1_config)
        counted = config_param_count(t1_config)
        assert list(counted.stages) == stages and counted.head == head

    def test_built_equals_config_count(self, small_net):
        assert count_params(small_net) == config_param_count(small_net.config)


class TestBottleneck:
    def test_zero_projection_is_layer_norm(self, small_net, rng):
        b = small_net.astype(np.float64).blocks[0].bottlenecks[0]
        b.project.weight[:] = 0
        b.project.bias[:] = 0
        x = rng.standard_normal(8)
        np.testing.assert_allclose(bottleneck_forward(b, x), layer_norm(b.norm, x), rtol=1e-12)

    def test_zero_input_zero_biases(self, small_net):
        b = small_net.astype(np.float64).blocks[0].bottlenecks[0]
        b.expand.bias[:] = 0
        b.project.bias[:] = 0
        np.testing.assert_allclose(bottleneck_forward(b, np.zeros(8)), b.norm.beta, atol=1e-12)

    def test_t1_expansion_width(self, t1_net):
        assert t1_net.blocks[0].bottlenecks[0].expand.out_dim == 256

    def test_dropout_identity_at_inference(self, small_net, rng):
        b = small_net.blocks[2].bottlenecks[0]
        x = rng.standard_normal((3, 8)).astype(np.float32)
        np.testing.assert_array_equal(bottleneck_forward(b, x), bottleneck_forward(b, x, "inference"))

    def test_dropout_active_in_training(self, small_net, rng):
        b = small_net.blocks[2].bottlenecks[0]
        x = rng.standard_normal((64, 8)).astype(np.float32)
        train = bottleneck_forward(b, x, "training", np.random.default_rng(0))
        assert not np.array_equal(train, bottleneck_forward(b, x))

    def test_dimension_mismatch(self, small_net):
        with pytest.raises(ShapeError):
            bottleneck_forward(small_net.blocks[0].bottlenecks[0], np.zeros(5, dtype=np.float32))


class TestBlockAndStage:
    def test_n0_is_mixer(self, rng):
        cfg = NetworkConfig(4, 1, (StageConfig(4, 2, 3, 0),), 2)
        net = build_network(cfg, 0)
        x = rng.standard_normal(16).astype(np.float32)
        np.testing.assert_array_equal(block_forward(net.blocks[0], x), dense_forward(net.blocks[0].mixer, x))

    def test_t1_stage1_widths(self, t1_net):
        out = block_forward(t1_net.blocks[0], np.zeros(147, dtype=np.float32))
        assert out.shape == (64,)

    def test_t1_stage_shapes(self, t1_net, rng):
        x = rng.random((224, 224, 3)).astype(np.float32)
        assert stage_forward(t1_net, 0, x).shape == (32, 32, 64)
        assert stage_forward(t1_net, 5, rng.random((2, 2, 512)).astype(np.float32)).shape == (1, 1, 512)

    def test_deterministic(self, small_net, rng):
        x = rng.random((16, 16, 3)).astype(np.float32)
        np.testing.assert_array_equal(stage_forward(small_net, 0, x), stage_forward(small_net, 0, x))

    def test_tile_rows_are_position_independent(self, small_net, rng):
        blk = small_net.blocks[0]
        rows = rng.standard_normal((3 * TILE_ROWS + 5, 48)).astype(np.float32)
        full = run_block_rows(blk, rows, TILE_ROWS)
        for idx in ([0], [7, 190], list(range(0, rows.shape[0], 3))):
            part = run_block_rows(blk, rows[idx], TILE_ROWS)
            np.testing.assert_array_equal(part, full[idx])

    def test_exhaustive_patch_locality(self, small_net, rng):
        """Perturbing any single input patch changes exactly that output pixel."""
        net = small_net
        for l, (side, ch, nside, _) in enumerate(net.config.stage_io()):
            x = rng.standard_normal((side, side, ch)).astype(np.float32)
            base = stage_forward(net, l, x)
            p = net.config.stages[l].patch_side
            for i in range(nside):
                for j in range(nside):
                    y = x.copy()
                    y[i * p : (i + 1) * p, j * p : (j + 1) * p] += 1.0
                    changed = np.any(stage_forward(net, l, y) != base, axis=2)
                    expected = np.zeros((nside, nside), dtype=bool)
                    expected[i, j] = True
                    np.testing.assert_array_equal(changed, expected)

    def test_stage_matches_per_patch_loop(self, small_net, rng):
        net = small_net.astype(np.float64)
        x = rng.standard_normal((16, 16, 3))
        out = stage_forward(net, 0, x)
        patches = patchify(x, 4)
        for k in range(16):
            np.testing.assert_allclose(out[k // 4, k % 4], block_forward(net.blocks[0], patches[k]), rtol=1e-12)

    def test_divisibility_violation(self, small_net):
        with pytest.raises(ShapeError):
            stage_forward(small_net, 0, np.zeros((18, 18, 3), dtype=np.float32))


class TestNetworkForward:
    def test_t1_logits(self, t1_net, rng):
        logits = network_forward(t1_net, rng.random((224, 224, 3)).astype(np.float32))
        assert logits.shape == (1000,) and logits.dtype == np.float32

    def test_repeatable(self, small_net, rng):
        x = rng.random((16, 16, 3)).astype(np.float32)
        np.testing.assert_array_equal(network_forward(small_net, x), network_forward(small_net, x))

    def test_threads_bit_identical(self, t1_net, rng):
        x = rng.random((224, 224, 3)).astype(np.float32)
        np.testing.assert_array_equal(network_forward(t1_net, x, threads=1), network_forward(t1_net, x, threads=4))

    def test_shape_mismatch(self, small_net):
        with pytest.raises(ShapeError):
            network_forward(small_net, np.zeros((16, 16, 1), dtype=np.float32))

    def test_normalization_applied(self, small_config, rng):
        from evmlp.model import Normalization

        doc = small_config.to_dict()
        doc["normalize"] = {"mean": [0.5, 0.4, 0.3], "std": [0.2, 0.25, 0.3]}
        cfg = NetworkConfig.from_dict(doc)
        plain = build_network(small_config, 1, dtype=np.float64)
        normed = network_from_params(cfg, plain.named_parameters())
        x = rng.random((16, 16, 3))
        z = (x - np.array([0.5, 0.4, 0.3])) / np.array([0.2, 0.25, 0.3])
        np.testing.assert_allclose(network_forward(normed, x), network_forward(plain, z), rtol=1e-12)
        assert isinstance(cfg.normalize, Normalization)
