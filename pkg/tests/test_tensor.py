import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from noisyseg.tensor import argsort_descending, bilinear_upsample, minmax_normalize


def naive_upsample(x, f):
    """Evaluate the half-pixel alignment per output pixel with an explicit 4-tap blend."""
    c, h, w = x.shape
    out = np.zeros((c, h * f, w * f))
    for oy in range(h * f):
        sy = min(max((oy + 0.5) / f - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy)); y1 = min(y0 + 1, h - 1); ty = sy - y0
        for ox in range(w * f):
            sx = min(max((ox + 0.5) / f - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx)); x1 = min(x0 + 1, w - 1); tx = sx - x0
            out[:, oy, ox] = ((1 - ty) * (1 - tx) * x[:, y0, x0] + (1 - ty) * tx * x[:, y0, x1]
                              + ty * (1 - tx) * x[:, y1, x0] + ty * tx * x[:, y1, x1])
    return out


class TestBilinearUpsample:
    def test_constant_map(self):
        out = bilinear_upsample(np.full((1, 4, 4), 3.0), 8)
        assert out.shape == (1, 32, 32)
        np.testing.assert_allclose(out, 3.0, rtol=0, atol=1e-12)

    def test_single_sample(self):
        np.testing.assert_allclose(bilinear_upsample(np.array([[[5.0]]]), 4), np.full((1, 4, 4), 5.0))

    def test_two_by_two_against_reference(self):
        x = np.array([[[0.0, 1.0], [0.0, 1.0]]])
        out = bilinear_upsample(x, 2)
        np.testing.assert_allclose(out, naive_upsample(x, 2), atol=1e-12)
        # frozen from the per-pixel reference: columns 0, .25, .75, 1
        np.testing.assert_allclose(out[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)

    @pytest.mark.parametrize("f", [1, 2, 3, 4, 8])
    def test_random_against_reference(self, rng, f):
        x = rng.normal(size=(2, 3, 5))
        np.testing.assert_allclose(bilinear_upsample(x, f), naive_upsample(x, f), atol=1e-12)

    def test_factor_one_is_exact_identity(self, rng):
        x = rng.normal(size=(3, 4, 6))
        assert np.array_equal(bilinear_upsample(x, 1), x)

    def test_batched_two_dimensional(self, rng):
        x = rng.normal(size=(4, 5))
        np.testing.assert_allclose(bilinear_upsample(x, 2), naive_upsample(x[None], 2)[0], atol=1e-12)

    @pytest.mark.parametrize("bad", [0, -2, 1.5])
    def test_bad_factor(self, bad):
        with pytest.raises(ValueError):
            bilinear_upsample(np.zeros((1, 2, 2)), bad)

    @given(arrays(np.float64, (2, 3, 4), elements=st.floats(-1e3, 1e3)), st.integers(1, 6))
    def test_bounds_preserved(self, x, f):
        out = bilinear_upsample(x, f)
        assert out.shape == (2, 3 * f, 4 * f)
        tol = 1e-9 * (1 + np.abs(x).max())
        assert out.min() >= x.min() - tol and out.max() <= x.max() + tol


class TestArgsortDescending:
    def test_examples(self):
        assert list(argsort_descending([0.1, 0.7, 0.2])) == [1, 2, 0]
        assert list(argsort_descending([0.5, 0.5, 0.1])) == [0, 1, 2]

    def test_against_comparison_sort(self, rng):
        s = rng.random(20)
        expected = sorted(range(20), key=lambda i: (-s[i], i))
        assert list(argsort_descending(s)) == expected

    def test_empty_is_an_error(self):
        with pytest.raises(ValueError):
            argsort_descending([])

    @given(st.lists(st.integers(0, 5).map(float), min_size=1, max_size=30))
    def test_non_increasing_and_stable(self, s):
        order = argsort_descending(s)
        vals = np.asarray(s)[order]
        assert np.all(np.diff(vals) <= 0)
        for a, b in zip(order[:-1], order[1:]):
            if s[a] == s[b]:
                assert a < b


class TestMinmaxNormalize:
    def test_examples(self):
        np.testing.assert_allclose(minmax_normalize(np.array([2.0, 4.0, 6.0])), [0, 0.5, 1])
        np.testing.assert_allclose(minmax_normalize(np.array([-1.0, 0.0, 3.0])), [0, 0.25, 1])
        np.testing.assert_array_equal(minmax_normalize(np.full((1, 3, 3), 7.0)), np.zeros((1, 3, 3)))

    def test_per_channel(self):
        x = np.stack([np.arange(4.0).reshape(2, 2), 10 * np.arange(4.0).reshape(2, 2) + 5])
        out = minmax_normalize(x)
        np.testing.assert_allclose(out[0], out[1])

    @given(arrays(np.float64, (3, 4, 5), elements=st.floats(-1e6, 1e6)))
    def test_range_and_idempotence(self, x):
        once = minmax_normalize(x)
        assert once.min() >= 0 and once.max() <= 1
        np.testing.assert_allclose(minmax_normalize(once), once, atol=1e-9)
