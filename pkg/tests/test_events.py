import numpy as np
import pytest

from evmlp.cost import analytic_macs, predict_event_macs
from evmlp.errors import CacheError, ShapeError
from evmlp.events import (
    EventStream,
    FeatureCache,
    build_cascade,
    compute_events,
    diff_map,
    event_forward,
    init_cache,
    threshold_events,
)
from evmlp.model import network_forward
from oracles import event_counts_bruteforce
from synth import localized_sequence, quantize


class TestDiffMap:
    def test_identical(self, rng):
        a = rng.random((8, 8, 3))
        np.testing.assert_array_equal(diff_map(a, a), np.zeros((8, 8)))

    def test_max_collapse(self):
        a = np.zeros((4, 4, 3))
        b = a.copy()
        b[1, 2] = [0.2, 0.0, 0.0]
        d = diff_map(a, b)
        assert d[1, 2] == pytest.approx(0.2)
        assert np.count_nonzero(d) == 1

    def test_takes_channel_maximum(self):
        a = np.zeros((2, 2, 3))
        b = a.copy()
        b[0, 0] = [0.1, -0.3, 0.2]
        assert diff_map(a, b)[0, 0] == pytest.approx(0.3)

    def test_symmetric(self, rng):
        a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
        np.testing.assert_array_equal(diff_map(a, b), diff_map(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            diff_map(np.zeros((4, 4, 3)), np.zeros((4, 4, 1)))


class TestThreshold:
    def test_tau_zero_keeps_everything(self, rng):
        d = np.where(rng.random((5, 5)) < 0.5, rng.random((5, 5)), 0.0)
        np.testing.assert_array_equal(threshold_events(d, 0.0), d)

    def test_below(self):
        assert threshold_events(np.array([[0.04]]), 0.05)[0, 0] == 0

    def test_inclusive(self):
        assert threshold_events(np.array([[0.05]]), 0.05)[0, 0] == 0.05

    def test_negative_tau_rejected(self):
        with pytest.raises(ValueError):
            threshold_events(np.zeros((2, 2)), -0.1)


class TestCascade:
    def test_t1_sides(self, t1_config):
        cascade = build_cascade(np.zeros((224, 224)), t1_config.stages)
        assert [c.shape[0] for c in cascade] == [32, 16, 8, 4, 2, 1]

    def test_all_zero(self, t1_config):
        assert all(not c.any() for c in build_cascade(np.zeros((224, 224)), t1_config.stages))

    def test_corner_pixel_stays_in_corner(self, t1_config):
        c0 = np.zeros((224, 224))
        c0[0, 0] = 1 / 255
        for level in build_cascade(c0, t1_config.stages):
            nz = np.argwhere(level)
            assert nz.tolist() == [[0, 0]]

    def test_exhaustive_soundness_small_grid(self, small_config):
        """Every single-pixel event lands in exactly the patch whose footprint holds it."""
        side = small_config.input_side
        for y in range(side):
            for x in range(side):
                c0 = np.zeros((side, side))
                c0[y, x] = 1e-3
                footprint = 1
                for st, level in zip(small_config.stages, build_cascade(c0, small_config.stages)):
                    footprint *= st.patch_side
                    assert np.argwhere(level).tolist() == [[y // footprint, x // footprint]]

    def test_event_counts_match_bruteforce(self, small_config, rng):
        for _ in range(25):
            a = quantize(rng.random((16, 16, 3)))
            b = a.copy()
            mask = rng.random((16, 16)) < rng.uniform(0, 0.1)
            b[mask] = quantize(rng.random((mask.sum(), 3)))
            for tau in (0.0, 0.05, 0.2):
                state = compute_events(b, a, tau, small_config.stages)
                assert list(state.event_counts()) == event_counts_bruteforce(a, b, tau, small_config)

    def test_monotone_in_tau(self, small_config, rng):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        b = np.where(rng.random((16, 16, 1)) < 0.3, b, a)
        prev = None
        for tau in np.linspace(0, 1, 21):
            counts = np.array(compute_events(b, a, tau, small_config.stages).event_counts())
            if prev is not None:
                assert np.all(counts <= prev)
            prev = counts


class TestInitCache:
    def test_full_pass_stats(self, small_net, rng):
        frame = rng.random((16, 16, 3)).astype(np.float32)
        cache, stats = init_cache(small_net, frame)
        assert stats.macs == analytic_macs(small_net.config).total
        assert stats.events_per_stage == stats.patches_per_stage == (16, 4, 1)
        np.testing.assert_array_equal(cache.frame, frame)
        np.testing.assert_array_equal(cache.logits, network_forward(small_net, frame))

    def test_same_frame_then_no_events(self, small_net, rng):
        frame = rng.random((16, 16, 3)).astype(np.float32)
        cache, _ = init_cache(small_net, frame)
        logits, _, stats = event_forward(small_net, frame, cache, 0.0)
        assert stats.events_per_stage == (0, 0, 0)
        assert stats.macs == 0
        np.testing.assert_array_equal(logits, cache.logits)

    def test_shape_mismatch(self, small_net):
        with pytest.raises(ShapeError):
            init_cache(small_net, np.zeros((8, 8, 3), dtype=np.float32))


class TestEventForward:
    def test_invalid_cache_rejected(self, small_net):
        with pytest.raises(CacheError):
            event_forward(small_net, np.zeros((16, 16, 3), dtype=np.float32), FeatureCache(), 0.0)

    def test_single_pixel_change(self, t1_net, rng):
        f0 = quantize(rng.random((224, 224, 3)))
        cache, _ = init_cache(t1_net, f0)
        f1 = f0.copy()
        f1[0, 0, 1] = 1.0 - f1[0, 0, 1]
        logits, _, stats = event_forward(t1_net, f1, cache, 0.0)
        assert stats.events_per_stage == (1, 1, 1, 1, 1, 1)
        np.testing.assert_array_equal(logits, network_forward(t1_net, f1))
        assert stats.macs == predict_event_macs(t1_net.config, [1] * 6)

    def test_every_pixel_changed(self, small_net, rng):
        f0 = rng.random((16, 16, 3)).astype(np.float32)
        cache, _ = init_cache(small_net, f0)
        f1 = (f0 + 0.5) % 1.0
        logits, _, stats = event_forward(small_net, f1, cache, 0.25)
        assert stats.macs == analytic_macs(small_net.config).total
        np.testing.assert_array_equal(logits, network_forward(small_net, f1))

    def test_input_cache_untouched(self, small_net, rng):
        f0 = rng.random((16, 16, 3)).astype(np.float32)
        cache, _ = init_cache(small_net, f0)
        snapshot = [m.copy() for m in cache.stage_outputs]
        event_forward(small_net, rng.random((16, 16, 3)).astype(np.float32), cache, 0.0)
        assert all(np.array_equal(a, b) for a, b in zip(snapshot, cache.stage_outputs))

    def test_cache_idempotence(self, small_net, rng):
        frames = localized_sequence(6, 16, seed=5)
        stream = EventStream(small_net, 0.0)
        for f in frames:
            stream.push(f)
            again = stream.push(f)
            assert again.macs == 0

    def test_tau_zero_equivalence_small(self, small_net):
        frames = localized_sequence(120, 16, seed=11)
        stream = EventStream(small_net, 0.0)
        for prev, f in zip([None] + frames[:-1], frames):
            stats = stream.push(f)
            np.testing.assert_array_equal(stats.logits, network_forward(small_net, f))
            if prev is not None:
                assert list(stats.events_per_stage) == event_counts_bruteforce(prev, f, 0.0, small_net.config)

    def test_runtime_macs_equal_prediction(self, small_net):
        frames = localized_sequence(40, 16, seed=2)
        for tau in (0.0, 0.1, 0.3):
            stream = EventStream(small_net, tau)
            stream.push(frames[0])
            for f in frames[1:]:
                stats = stream.push(f)
                assert stats.macs == predict_event_macs(small_net.config, stats.events_per_stage)

    def test_head_reused_when_no_final_event(self, small_net, rng):
        f0 = rng.random((16, 16, 3)).astype(np.float32)
        cache, _ = init_cache(small_net, f0)
        f1 = f0.copy()
        f1[3, 3, 0] += 0.01
        _, _, stats = event_forward(small_net, f1, cache, 0.05)
        assert stats.events_per_stage == (0, 0, 0) and stats.head_macs == 0
        _, _, stats = event_forward(small_net, f1, cache, 0.0)
        assert stats.head_macs == small_net.head.weight.size

    def test_threads_bit_identical(self, t1_net):
        frames = localized_sequence(6, 224, seed=9, max_boxes=6)
        out = {}
        for threads in (1, 3):
            stream = EventStream(t1_net, 0.0, threads)
            out[threads] = [stream.push(f) for f in frames]
        for a, b in zip(out[1], out[3]):
            np.testing.assert_array_equal(a.logits, b.logits)
            assert a.macs == b.macs
