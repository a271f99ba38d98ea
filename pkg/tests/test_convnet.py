import numpy as np
import pytest
from hypothesis import given, strategies as st

from noisyseg.convnet import layers as L
from noisyseg.convnet.checkpoint import CheckpointError, from_bytes, load_network, save_network, to_bytes
from noisyseg.convnet.network import (
    build_classifier,
    build_segmenter,
    classify,
    forward,
    gradient,
    loss,
    segment_probs,
)
from noisyseg.convnet.train import TrainSchedule, train_classifier, train_segmenter
from noisyseg.errors import ConfigurationError, UsageError
from noisyseg.tensor import IGNORE

from oracles import finite_difference_check, naive_forward, naive_softmax, random_classifier, random_segmenter

# Seeds whose random nets and batches keep every ReLU input and max-pool
# margin farther than h = 1e-4 from a kink.
KINK_FREE_SEEDS = (0, 2, 3, 6, 7)


def _batch(seed, n=3, classes=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2, 8, 8))
    tags = rng.integers(1, classes + 1, size=n)
    masks = rng.integers(0, classes + 1, size=(n, 8, 8))
    masks[rng.random(masks.shape) < 0.3] = IGNORE
    return x, tags, masks


class TestForwardAgainstLoops:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_classifier_layers(self, seed):
        net = random_classifier(seed)
        x = np.random.default_rng(seed + 7).normal(size=(2, 8, 8))
        trace = forward(net, x)
        for got, want in zip(trace.outputs, naive_forward(net, x)):
            np.testing.assert_allclose(got[0], want, atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_segmenter_layers(self, seed):
        net = random_segmenter(seed)
        x = np.random.default_rng(seed + 7).normal(size=(2, 8, 8))
        trace = forward(net, x)
        for got, want in zip(trace.outputs, naive_forward(net, x)):
            np.testing.assert_allclose(got[0], want, atol=1e-12)

    def test_batched_equals_single(self):
        net = random_classifier(4)
        x = np.random.default_rng(0).normal(size=(4, 2, 8, 8))
        batched = classify(net, x)
        for i in range(4):
            np.testing.assert_allclose(batched[i], classify(net, x[i]), atol=1e-14)

    def test_strided_padded_conv(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 1, 7, 7))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        y, _ = L.conv_forward(x, w, b, stride=2, padding=1)
        from oracles import naive_conv

        np.testing.assert_allclose(y[:, 0], naive_conv(x[:, 0], w, b, 2, 1), atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(L.softmax(np.zeros(4)), np.full(4, 0.25))

    def test_known_values(self):
        z = np.array([1.0, 2.0, 3.0])
        e = np.exp(z)
        np.testing.assert_allclose(L.softmax(z), e / e.sum(), rtol=1e-14)

    def test_large_logits_stay_finite(self):
        p = L.softmax(np.array([1000.0, 1000.0, -1000.0]))
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-300)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
    def test_matches_scalar_oracle_and_shift_invariant(self, z):
        z = np.array(z)
        np.testing.assert_allclose(L.softmax(z), naive_softmax(list(z)), atol=1e-12)
        np.testing.assert_allclose(L.softmax(z + 3.7), L.softmax(z), atol=1e-12)

    def test_pixel_probabilities_sum_to_one(self):
        net = random_segmenter(1)
        p = segment_probs(net, np.random.default_rng(2).normal(size=(2, 8, 8)))
        assert p.shape == (4, 8, 8)
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)


class TestGradient:
    @pytest.mark.parametrize("seed", KINK_FREE_SEEDS[:2])
    def test_classifier_finite_differences(self, seed):
        x, tags, _ = _batch(seed)
        assert finite_difference_check(random_classifier(seed), x, tags) < 1e-4

    @pytest.mark.parametrize("seed", KINK_FREE_SEEDS[:2])
    def test_segmenter_finite_differences_with_ignore(self, seed):
        x, _, masks = _batch(seed)
        assert (masks == IGNORE).any()
        assert finite_difference_check(random_segmenter(seed), x, masks) < 1e-4

    def test_duplicated_batch_doubles_gradient(self):
        net = random_classifier(2)
        x, tags, _ = _batch(2)
        l1, g1, c1 = gradient(net, x, tags)
        l2, g2, c2 = gradient(net, np.concatenate([x, x]), np.concatenate([tags, tags]))
        assert c2 == 2 * c1
        np.testing.assert_allclose(l2, 2 * l1, rtol=1e-12)
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(b, 2 * a, rtol=1e-10, atol=1e-14)

    def test_all_ignore_gives_zero_gradient(self):
        net = random_segmenter(3)
        x, _, _ = _batch(3)
        total, grads, count = gradient(net, x, np.full((3, 8, 8), IGNORE))
        assert count == 0 and total == 0.0
        assert all(not g.any() for g in grads)

    def test_loss_sums_valid_pixels_only(self):
        net = random_segmenter(3)
        x, _, masks = _batch(3)
        probs = forward(net, x).probs
        valid = masks != IGNORE
        n, i, j = np.nonzero(valid)
        want = -np.log(probs[n, masks[valid], i, j]).sum()
        np.testing.assert_allclose(loss(net, x, masks), want, rtol=1e-12)

    def test_classifier_fc_has_no_bias_gradient(self):
        net = random_classifier(0)
        x, tags, _ = _batch(0)
        _, grads, _ = gradient(net, x, tags)
        assert len(grads) == len(net.params)
        assert grads[-1].shape == net.layers[-2].weights.shape

    def test_label_range_checked(self):
        net = random_classifier(0)
        x, _, _ = _batch(0)
        with pytest.raises(UsageError):
            gradient(net, x, np.array([0, 1, 2]))


class TestTraining:
    def test_zero_learning_rate_keeps_weights(self):
        net = random_classifier(1)
        x, tags, _ = _batch(1, n=8)
        out = train_classifier(net, (x, tags), TrainSchedule(learning_rate=0.0, iterations=5, batch_size=4))
        for a, b in zip(net.params, out.params):
            np.testing.assert_array_equal(a, b)

    def test_training_returns_copy(self):
        net = random_classifier(1)
        before = [p.copy() for p in net.params]
        x, tags, _ = _batch(1, n=8)
        train_classifier(net, (x, tags), TrainSchedule(iterations=3, batch_size=4))
        for a, b in zip(before, net.params):
            np.testing.assert_array_equal(a, b)

    def test_same_seed_same_weights(self):
        x, tags, _ = _batch(5, n=16)
        sched = TrainSchedule(learning_rate=0.05, iterations=10, batch_size=4, seed=9)
        a = train_classifier(random_classifier(5), (x, tags), sched)
        b = train_classifier(random_classifier(5), (x, tags), sched)
        for p, q in zip(a.params, b.params):
            np.testing.assert_array_equal(p, q)

    def test_separable_toy_set(self):
        # class 1: bright upper half; class 2: bright lower half
        rng = np.random.default_rng(0)
        n = 64
        tags = rng.integers(1, 3, size=n)
        x = rng.normal(0, 0.1, size=(n, 1, 8, 8))
        for i, t in enumerate(tags):
            if t == 1:
                x[i, 0, :4] += 1.0
            else:
                x[i, 0, 4:] += 1.0
        net = build_classifier(2, 1, (4, 8), seed=0)
        net = train_classifier(net, (x, tags), TrainSchedule(learning_rate=0.1, iterations=300, batch_size=16))
        acc = (classify(net, x).argmax(axis=1) + 1 == tags).mean()
        assert acc >= 0.95

    def test_single_image_overfit(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(1, 3, 16, 16))
        mask = np.zeros((1, 16, 16), dtype=np.int64)
        mask[0, 4:12, 4:12] = 1
        net = build_segmenter(2, 3, (8, 16), seed=0, output_stride=2)
        net = train_segmenter(net, (x, mask), TrainSchedule(learning_rate=0.1, iterations=300, batch_size=1))
        pred = segment_probs(net, x[0]).argmax(axis=0)
        assert (pred == mask[0]).mean() >= 0.9

    def test_head_checked(self):
        with pytest.raises(UsageError):
            train_segmenter(random_classifier(0), [])


class TestBuilders:
    def test_classifier_shape(self):
        net = build_classifier(5)
        assert net.head == "classifier"
        assert classify(net, np.zeros((3, 64, 64))).shape == (5,)
        assert net.stride_at(net.tap_points["shallow"]) == 2
        assert net.stride_at(net.tap_points["deep"]) == 4

    def test_segmenter_output_stride(self):
        net = build_segmenter(5, output_stride=4)
        trace = forward(net, np.zeros((3, 64, 64)))
        assert trace.outputs[-3].shape == (1, 6, 16, 16)
        assert trace.probs.shape == (6, 64, 64)
        full = build_segmenter(5, output_stride=None)
        assert forward(full, np.zeros((3, 64, 64))).outputs[-3].shape == (1, 6, 8, 8)

    def test_segmenter_copies_trunk(self):
        cls = random_classifier(0, widths=(2, 3, 4))
        seg = build_segmenter(3, 2, (2, 3, 4), seed=5, trunk=cls)
        convs = [layer for layer in seg.layers if layer.kind == L.CONV][:3]
        for d, s in zip(convs, [layer for layer in cls.layers if layer.kind == L.CONV]):
            np.testing.assert_array_equal(d.weights, s.weights)

    def test_mismatched_trunk_rejected(self):
        with pytest.raises(ConfigurationError):
            build_segmenter(3, 2, (4, 4, 4), trunk=random_classifier(0))

    def test_wrong_input_channels(self):
        with pytest.raises(ConfigurationError):
            forward(build_classifier(3, 3, (2, 2, 2)), np.zeros((1, 8, 8)))

    def test_non_divisible_pool(self):
        with pytest.raises(ConfigurationError):
            forward(build_classifier(3, 1, (2, 2, 2)), np.zeros((1, 10, 10)))


class TestCheckpoint:
    @pytest.mark.parametrize("make", [random_classifier, random_segmenter])
    def test_round_trip_is_exact(self, make, tmp_path):
        net = make(3)
        path = tmp_path / "m.nsn"
        save_network(path, net)
        back = load_network(path)
        assert back.head == net.head and back.tap_points == net.tap_points
        assert [layer.kind for layer in back.layers] == [layer.kind for layer in net.layers]
        for a, b in zip(net.params, back.params):
            assert a.tobytes() == b.tobytes()
        x = np.random.default_rng(0).normal(size=(2, 8, 8))
        np.testing.assert_array_equal(forward(net, x).probs, forward(back, x).probs)

    def test_serialization_is_deterministic(self):
        assert to_bytes(random_classifier(1)) == to_bytes(random_classifier(1))

    def test_truncated_file(self):
        data = to_bytes(random_classifier(1))
        with pytest.raises(CheckpointError):
            from_bytes(data[:-5])

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            from_bytes(b"NOTANET\0" + to_bytes(random_classifier(1))[8:])
