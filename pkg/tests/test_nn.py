import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegics.config import TrainConfig
from eegics.data import EegDataset
from eegics.model import LayerKind, build_teacher
from eegics.nn import (Adam, ModelFormatError, Network, ShapeError, TrainingError,
                       cross_entropy, gradient_check, model_from_bytes, model_to_bytes,
                       random_check_case, relative_error, softmax, train)

from conftest import TINY_ARCH


def small_spec(c=3, t=32):
    return build_teacher(c, t, TINY_ARCH)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5], atol=1e-15)

    def test_analytic(self):
        np.testing.assert_allclose(softmax([np.log(3.0), 0.0]), [0.75, 0.25], atol=1e-15)

    def test_large_inputs_do_not_overflow(self):
        np.testing.assert_allclose(softmax([1000.0, 1000.0]), [0.5, 0.5], atol=1e-15)

    @pytest.mark.parametrize("z", [[np.nan, 0.0], [np.inf, 1.0], [-np.inf, 0.0]])
    def test_non_finite_rejected(self, z):
        with pytest.raises(ValueError, match="NaN or infinity"):
            softmax(z)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            softmax([1.0])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8), st.floats(-1e3, 1e3))
    def test_properties(self, z, c):
        p = softmax(z)
        assert np.all(p > 0) or np.ptp(z) > 700  # underflow only for huge spreads
        assert abs(p.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(softmax(np.asarray(z) + c), p, atol=1e-9)


class TestForward:
    def test_zero_model_gives_dense_biases(self):
        net = Network.zeros(small_spec())
        net.params[-1][1][:] = [0.25, -1.5]
        logits, _ = net.forward(np.zeros((4, 3, 32), dtype=np.float32))
        np.testing.assert_array_equal(logits, np.tile([0.25, -1.5], (4, 1)).astype(np.float32))

    def test_batch_rows(self, rng):
        net = Network.init(small_spec(), 0)
        logits, cache = net.forward(rng.standard_normal((7, 3, 32)))
        assert logits.shape == (7, 2)
        assert cache.final_maps().shape == (7, TINY_ARCH.pointwise_maps, 3, 8)

    def test_logit_is_mean_of_weighted_maps(self, rng):
        net = Network.init(small_spec(), 5, dtype=np.float64)
        w, b = net.dense_head()
        logits, cache = net.forward(rng.standard_normal((2, 3, 32)))
        A = cache.final_maps()  # (B, K, C, T')
        for i in range(2):
            for c in range(2):
                total = 0.0
                for k in range(A.shape[1]):
                    total += w[c, k] * A[i, k].sum()
                expected = total / (A.shape[2] * A.shape[3]) + b[c]
                assert logits[i, c] == pytest.approx(expected, rel=1e-12)

    def test_wrong_channel_count_names_layer(self, rng):
        net = Network.init(small_spec(), 0)
        with pytest.raises(ShapeError, match="layer 0 \\(TEMPORAL_CONV\\).*3 channels"):
            net.forward(rng.standard_normal((1, 4, 32)))

    def test_indivisible_time_names_pool_layer(self, rng):
        net = model_from_bytes(model_to_bytes(Network.init(small_spec(), 0)))
        with pytest.raises(ShapeError, match="TEMPORAL_AVG_POOL"):
            net.forward(rng.standard_normal((1, 3, 30)))

    def test_finite_outputs(self, rng):
        net = Network.init(small_spec(), 0)
        logits, cache = net.forward(rng.standard_normal((3, 3, 32)) * 100)
        assert np.all(np.isfinite(logits)) and np.all(np.isfinite(cache.feature_maps))


class TestChannelAxis:
    def test_perturbing_one_channel_changes_only_its_rows(self, rng):
        net = Network.init(small_spec(c=4), 3)
        x = rng.standard_normal((2, 4, 32))
        _, base = net.forward(x)
        x2 = x.copy()
        x2[:, 2] += rng.standard_normal((2, 32))
        _, pert = net.forward(x2)
        b, c = 2, 4
        for layer, c0, c1 in zip(net.spec.layers, base.contexts, pert.contexts):
            if layer.kind in (LayerKind.DEPTHWISE_TEMPORAL_CONV, LayerKind.POINTWISE_CONV):
                a0 = c0.reshape(b, c, *c0.shape[1:])
                a1 = c1.reshape(b, c, *c1.shape[1:])
                changed = np.any(a0 != a1, axis=(0, 2, 3))
                assert changed.tolist() == [False, False, True, False]
        changed = np.any(base.feature_maps != pert.feature_maps, axis=(0, 2, 3))
        assert changed.tolist() == [False, False, True, False]


def numeric_dense_grad(net, x, y, h=1e-6):
    """Central differences on the dense layer, where the loss is smooth."""
    w = net.params[-1][0]
    g = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        orig = w[idx]
        w[idx] = orig + h
        lp = cross_entropy(net.forward(x)[0], y)
        w[idx] = orig - h
        lm = cross_entropy(net.forward(x)[0], y)
        w[idx] = orig
        g[idx] = (lp - lm) / (2 * h)
    return g


class TestBackward:
    def test_dense_gradient_matches_finite_differences(self, rng):
        net = Network.init(small_spec(), 2, dtype=np.float64)
        x = rng.standard_normal((3, 3, 32))
        y = np.array([0, 1, 1])
        _, grads = net.loss_and_grads(x, y)
        np.testing.assert_allclose(grads[-1][0], numeric_dense_grad(net, x, y), rtol=1e-6,
                                   atol=1e-10)

    def test_all_layers_match_finite_differences(self, rng):
        spec = small_spec(c=2)
        x = rng.standard_normal((2, 2, 32))
        report = gradient_check(spec, x, [1, 0], seed=4)
        assert report.max_rel_error < 1e-4

    def test_confident_prediction_has_tiny_dense_gradient(self, rng):
        net = Network.init(small_spec(), 0, dtype=np.float64)
        net.params[-1][1][:] = [-30.0, 30.0]
        _, grads = net.loss_and_grads(rng.standard_normal((2, 3, 32)), [1, 1])
        assert np.abs(grads[-1][0]).max() < 1e-20
        assert np.abs(grads[-1][1]).max() < 1e-20

    def test_duplicated_sample_gives_single_sample_gradient(self, rng):
        net = Network.init(small_spec(), 1, dtype=np.float64)
        x = rng.standard_normal((1, 3, 32))
        _, g1 = net.loss_and_grads(x, [1])
        _, g2 = net.loss_and_grads(np.concatenate([x, x]), [1, 1])
        for a, b in zip(g1, g2):
            for u, v in zip(a, b):
                np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-15)

    def test_gradient_shapes_mirror_parameters(self, rng):
        net = Network.init(small_spec(), 1)
        _, grads = net.loss_and_grads(rng.standard_normal((2, 3, 32)), [0, 1])
        for ps, gs in zip(net.params, grads):
            assert [p.shape for p in ps] == [g.shape for g in gs]

    def test_labels_validated(self, rng):
        net = Network.init(small_spec(), 1)
        with pytest.raises(ValueError):
            net.loss_and_grads(rng.standard_normal((2, 3, 32)), [0, 2])


class TestGradientCheck:
    def test_one_entry_per_parameter_tensor(self, rng):
        spec, x, y = random_check_case(rng)
        report = gradient_check(spec, x, y)
        n_tensors = sum(len(s) for s in spec.param_shapes())
        assert len(report.entries) == n_tensors
        assert report.max_rel_error < 1e-4

    def test_absolute_fallback_below_floor(self):
        assert relative_error(0.0, 5e-8) == pytest.approx(5e-8)
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def separable_set(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, 2, 32)) * 0.5
    x += np.where(y == 1, 1.0, -1.0)[:, None, None]
    return EegDataset(x, y, np.zeros(n, dtype=int), ["a", "b"])


class TestTrain:
    def test_separable_set_reaches_high_accuracy(self):
        ds = separable_set()
        res = train(build_teacher(2, 32), ds, TrainConfig(epochs=20, seed=0))
        assert len(res.loss_history) == 20
        acc = np.mean(res.model.predict(ds.X) == ds.labels)
        assert acc >= 0.95

    def test_same_seed_is_bit_identical(self):
        ds = separable_set(60)
        cfg = TrainConfig(epochs=2, seed=7, arch=TINY_ARCH)
        a = train(build_teacher(2, 32, TINY_ARCH), ds, cfg)
        b = train(build_teacher(2, 32, TINY_ARCH), ds, cfg)
        assert model_to_bytes(a.model) == model_to_bytes(b.model)
        assert a.loss_history == b.loss_history

    def test_zero_learning_rate_keeps_initialization(self):
        ds = separable_set(40)
        spec = build_teacher(2, 32, TINY_ARCH)
        cfg = TrainConfig(epochs=2, lr=0.0, seed=3, arch=TINY_ARCH)
        res = train(spec, ds, cfg)
        init_ss, _ = np.random.SeedSequence(3).spawn(2)
        init = Network.init(spec, np.random.default_rng(init_ss))
        assert model_to_bytes(res.model) == model_to_bytes(init)

    def test_single_class_rejected(self):
        ds = separable_set(20)
        one = EegDataset(ds.X, np.zeros(20, dtype=int), ds.subjects, ds.channel_names)
        with pytest.raises(TrainingError, match="both classes"):
            train(build_teacher(2, 32, TINY_ARCH), one, TrainConfig(epochs=1))


def test_adam_first_step_moves_by_learning_rate():
    p = [[np.array([1.0, -2.0])]]
    g = [[np.array([0.5, -3.0])]]
    opt = Adam(p, lr=0.1)
    opt.step(p, g)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p[0][0], [0.9, -1.9], rtol=1e-6)
    assert opt.step_count == 1
    assert opt.m[0][0].shape == p[0][0].shape


class TestModelFile:
    def test_round_trip(self):
        net = Network.init(small_spec(), 11)
        buf = model_to_bytes(net)
        back = model_from_bytes(buf)
        assert model_to_bytes(back) == buf
        assert [l for l in back.spec.layers] == list(net.spec.layers)

    def test_header_layout(self):
        net = Network.init(small_spec(), 11)
        buf = model_to_bytes(net)
        assert buf[:4] == b"ICSM"
        version, n_layers = struct.unpack_from("<HH", buf, 4)
        assert (version, n_layers) == (1, len(net.spec.layers))
        kind, kernel, mi, mo, pool = struct.unpack_from("<BHHHH", buf, 8)
        assert (kind, kernel, mi, mo) == (0, TINY_ARCH.conv1_kernel, 1, TINY_ARCH.conv1_maps)
        n_floats = net.spec.n_params()
        assert len(buf) == 8 + 9 * n_layers + 4 * n_floats

    def test_bad_magic(self):
        buf = model_to_bytes(Network.init(small_spec(), 0))
        with pytest.raises(ModelFormatError, match="ICSM"):
            model_from_bytes(b"XXXX" + buf[4:])

    def test_truncated(self):
        buf = model_to_bytes(Network.init(small_spec(), 0))
        with pytest.raises(ModelFormatError, match="truncated"):
            model_from_bytes(buf[:-3])

    def test_bad_version(self):
        buf = bytearray(model_to_bytes(Network.init(small_spec(), 0)))
        buf[4] = 9
        with pytest.raises(ModelFormatError, match="version"):
            model_from_bytes(bytes(buf))
