import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advjudge.exceptions import InvalidArgumentError
from advjudge.transforms import (
    AffineMatrix,
    FEATURE_NAMES,
    TransformSpec,
    add_noise,
    bit_depth_reduce,
    build_affine,
    canonical_suite,
    dct2,
    feature_filter,
    idct2,
    load_suite,
    save_suite,
    scale_intermediate_shape,
    scale_roundtrip,
    smooth,
    transform,
    warp,
)

images = arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(2, 9), st.integers(2, 9)),
                elements=st.floats(0, 1, width=32))


def naive_dct2(x):
    """Direct O(N^4) evaluation of the orthonormal DCT-II."""
    h, w = x.shape
    out = np.zeros((h, w))
    for k in range(h):
        for l in range(w):
            ak = math.sqrt((1 if k == 0 else 2) / h)
            al = math.sqrt((1 if l == 0 else 2) / w)
            s = 0.0
            for m in range(h):
                for n in range(w):
                    s += x[m, n] * math.cos(math.pi * (2 * m + 1) * k / (2 * h)) \
                        * math.cos(math.pi * (2 * n + 1) * l / (2 * w))
            out[k, l] = ak * al * s
    return out


def brute_window(x, window, reducer):
    """Per-pixel window reduction with edge replication."""
    r = window // 2
    c, h, w = x.shape
    out = np.empty_like(x, dtype=np.float64)
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                vals = [x[ch, min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)]
                        for di in range(-r, r + 1) for dj in range(-r, r + 1)]
                out[ch, i, j] = reducer(vals)
    return out


def brute_warp(x, T, o):
    """Inverse-map every output pixel and interpolate bilinearly, one pixel at a time."""
    c, h, w = x.shape
    Tinv = np.linalg.inv(T)
    out = np.zeros((c, h, w))

    def px(ch, yy, xx):
        return x[ch, yy, xx] if 0 <= yy < h and 0 <= xx < w else 0.0

    for i in range(h):
        for j in range(w):
            sx, sy = Tinv @ (np.array([j, i], float) - o)
            x0, y0 = math.floor(sx + 1e-12), math.floor(sy + 1e-12)
            fx, fy = sx - x0, sy - y0
            for ch in range(c):
                out[ch, i, j] = ((1 - fx) * (1 - fy) * px(ch, y0, x0) + fx * (1 - fy) * px(ch, y0, x0 + 1)
                                 + (1 - fx) * fy * px(ch, y0 + 1, x0) + fx * fy * px(ch, y0 + 1, x0 + 1))
    return out


class TestNoise:
    def test_zero_sigma_identity(self):
        x = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(add_noise(x, "gaussian", 0.0, seed=3), x)

    def test_same_seed_same_output(self):
        x = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
        for kind in ("gaussian", "poisson", "salt-pepper", "speckle"):
            assert add_noise(x, kind, seed=9).tobytes() == add_noise(x, kind, seed=9).tobytes()
            assert add_noise(x, kind, seed=9).tobytes() != add_noise(x, kind, seed=10).tobytes()

    def test_gaussian_statistics(self):
        # interior pixels are far enough from 0 and 1 that clipping is negligible
        x = np.full((1, 100, 1000), 0.5)
        d = add_noise(x, "gaussian", 0.05, seed=1) - x
        assert abs(d.mean()) <= 0.002
        assert 0.04 <= d.std() <= 0.06

    def test_salt_pepper_fraction(self):
        x = np.full((3, 200, 200), 0.5, dtype=np.float32)
        out = add_noise(x, "salt-pepper", 0.05, seed=2)
        hit = out[0] != 0.5
        assert abs(hit.mean() - 0.05) < 0.005
        # whole pixels flip, and salt and pepper are equally likely
        assert np.all((out[:, hit] == 0) | (out[:, hit] == 1))
        assert np.all(out[0, hit] == out[2, hit])
        assert abs((out[0, hit] == 1).mean() - 0.5) < 0.05

    def test_poisson_mean_preserved(self):
        x = np.full((1, 300, 300), 0.4)
        out = add_noise(x, "poisson", seed=3)
        assert abs(out.mean() - 0.4) < 1e-3
        # quantized to multiples of 1/255
        np.testing.assert_allclose(out * 255, np.round(out * 255), atol=1e-9)

    def test_negative_strength(self):
        with pytest.raises(InvalidArgumentError):
            add_noise(np.zeros((1, 2, 2)), "gaussian", -0.1)

    @given(images, st.sampled_from(["gaussian", "poisson", "salt-pepper", "speckle"]), st.integers(0, 99))
    @settings(max_examples=40, deadline=None)
    def test_range(self, x, kind, seed):
        out = add_noise(x, kind, seed=seed)
        assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


class TestSmooth:
    @pytest.mark.parametrize("kind", ["maximum", "median", "uniform", "gaussian", "minimum"])
    def test_constant_unchanged(self, kind):
        x = np.full((2, 7, 7), 0.3)
        np.testing.assert_allclose(smooth(x, kind), x, atol=1e-12)

    def test_single_pixel_maximum(self):
        x = np.zeros((1, 7, 7))
        x[0, 3, 3] = 1.0
        expected = np.zeros((1, 7, 7))
        expected[0, 2:5, 2:5] = 1.0
        np.testing.assert_array_equal(smooth(x, "maximum", 3), expected)

    def test_median_removes_outlier(self):
        x = np.full((1, 5, 5), 0.2)
        x[0, 2, 2] = 1.0
        np.testing.assert_allclose(smooth(x, "median", 3), np.full((1, 5, 5), 0.2))

    @pytest.mark.parametrize("kind,reducer", [("maximum", max), ("minimum", min),
                                              ("median", np.median), ("uniform", np.mean)])
    @pytest.mark.parametrize("window", [3, 5])
    def test_matches_brute_force(self, kind, reducer, window):
        x = np.random.default_rng(window).random((2, 6, 7))
        np.testing.assert_allclose(smooth(x, kind, window), brute_window(x, window, reducer), atol=1e-12)

    def test_gaussian_weights(self):
        x = np.random.default_rng(4).random((1, 6, 6))
        k = np.exp(-np.array([1.0, 0.0, 1.0]) / 2)
        k2 = np.outer(k, k) / np.outer(k, k).sum()
        flat_weights = {(di, dj): k2[di + 1, dj + 1] for di in (-1, 0, 1) for dj in (-1, 0, 1)}
        h, w = 6, 6
        expected = np.zeros_like(x)
        for i in range(h):
            for j in range(w):
                expected[0, i, j] = sum(wt * x[0, min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)]
                                        for (di, dj), wt in flat_weights.items())
        np.testing.assert_allclose(smooth(x, "gaussian", 3), expected, atol=1e-12)

    @pytest.mark.parametrize("window", [2, 4, 1])
    def test_bad_window(self, window):
        with pytest.raises(InvalidArgumentError):
            smooth(np.zeros((1, 4, 4)), "maximum", window)


class TestBitDepth:
    @pytest.mark.parametrize("bits", range(1, 8))
    def test_endpoints(self, bits):
        x = np.array([[[0.0, 1.0]]])
        np.testing.assert_array_equal(bit_depth_reduce(x, bits), x)

    def test_hand_values(self):
        assert bit_depth_reduce(np.array([[[0.5]]]), 4)[0, 0, 0] == pytest.approx(8 / 15)
        np.testing.assert_array_equal(bit_depth_reduce(np.array([[[0.4, 0.6]]]), 1), [[[0.0, 1.0]]])

    @pytest.mark.parametrize("bits", [0, 8])
    def test_out_of_range(self, bits):
        with pytest.raises(InvalidArgumentError):
            bit_depth_reduce(np.zeros((1, 2, 2)), bits)

    @given(images, st.integers(1, 7))
    @settings(max_examples=40, deadline=None)
    def test_on_grid_and_close(self, x, bits):
        levels = 2 ** bits - 1
        out = bit_depth_reduce(x.astype(np.float64), bits)
        np.testing.assert_allclose(out * levels, np.round(out * levels), atol=1e-9)
        assert np.max(np.abs(out - x)) <= 0.5 / levels + 1e-7


class TestDCT:
    def test_constant_channel(self):
        c = dct2(np.full((4, 6), 2.0))
        assert c[0, 0] == pytest.approx(2.0 * math.sqrt(24))
        c[0, 0] = 0
        np.testing.assert_allclose(c, 0, atol=1e-12)

    def test_two_by_two_delta(self):
        x = np.array([[1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_allclose(dct2(x), naive_dct2(x), atol=1e-12)
        np.testing.assert_allclose(dct2(x), np.full((2, 2), 0.5), atol=1e-12)

    @pytest.mark.parametrize("h", range(1, 9))
    @pytest.mark.parametrize("w", range(1, 9))
    def test_matches_naive_and_roundtrips(self, h, w):
        x = np.random.default_rng(h * 10 + w).normal(size=(h, w))
        np.testing.assert_allclose(dct2(x), naive_dct2(x), atol=1e-6)
        np.testing.assert_allclose(idct2(dct2(x)), x, atol=1e-6)

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            dct2(np.zeros((0, 3)))


class TestFeatureFilter:
    def test_full_ratio_identity(self):
        x = np.random.default_rng(0).random((3, 9, 7))
        np.testing.assert_allclose(feature_filter(x, 1.0), x, atol=1e-6)

    def test_constant_unchanged(self):
        x = np.full((1, 8, 8), 0.7)
        np.testing.assert_allclose(feature_filter(x, 0.3), x, atol=1e-6)

    def test_checkerboard_removed(self):
        # highest-frequency cosine in both axes: sign alternates every pixel
        n = np.arange(8)
        basis = np.cos(np.pi * (2 * n + 1) * 7 / 16)
        x = (0.5 + 0.4 * np.outer(basis, basis))[None]
        i, j = np.indices((8, 8))
        assert np.all(np.sign(x[0] - 0.5) == (-1.0) ** (i + j))
        out = feature_filter(x, 0.5)
        assert out.max() - out.min() < 1e-6
        assert out.mean() == pytest.approx(0.5)

    def test_cutoff_indices(self):
        # a single basis function survives exactly when its index is below ceil(r*n)
        n = 10
        for k in (6, 7):
            coeffs = np.zeros((n, n))
            coeffs[0, 0] = 5.0
            coeffs[k, 0] = 0.5
            x = idct2(coeffs)[None]
            kept = dct2(feature_filter(x, 0.7)[0])
            assert (abs(kept[k, 0]) > 0.1) == (k < 7)

    @pytest.mark.parametrize("r", [0.0, 1.5])
    def test_bad_ratio(self, r):
        with pytest.raises(InvalidArgumentError):
            feature_filter(np.zeros((1, 4, 4)), r)


class TestAffine:
    def test_rotation_zero_is_identity(self):
        m = build_affine("rotation", {"angle": 0.0}, (3, 8, 8))
        np.testing.assert_allclose(m.T, np.eye(2), atol=1e-15)
        np.testing.assert_allclose(m.o, 0, atol=1e-12)

    def test_shear_and_flip_linear_parts(self):
        np.testing.assert_array_equal(build_affine("shear", {"a": 0.3}, (8, 8)).T, [[1, 0.3], [0, 1]])
        np.testing.assert_array_equal(build_affine("flip", {"axis": "horizontal"}, (8, 8)).T, [[-1, 0], [0, 1]])

    @pytest.mark.parametrize("kind,params", [("rotation", {"angle": 33.0}), ("shear", {"a": 0.3}),
                                             ("scale", {"s": 1.1}), ("flip", {"axis": "both"})])
    def test_center_is_fixed(self, kind, params):
        m = build_affine(kind, params, (3, 6, 10))
        c = np.array([4.5, 2.5])
        np.testing.assert_allclose(m.T @ c + m.o, c, atol=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            AffineMatrix(((1.0, 0.0), (0.0, math.nan)))

    def test_singular(self):
        with pytest.raises(InvalidArgumentError):
            warp(np.zeros((1, 3, 3)), AffineMatrix(((1.0, 1.0), (1.0, 1.0))))


class TestWarp:
    def test_identity(self):
        x = np.random.default_rng(0).random((3, 6, 5)).astype(np.float32)
        np.testing.assert_array_equal(warp(x, AffineMatrix(((1.0, 0.0), (0.0, 1.0)))), x)

    @given(images)
    @settings(max_examples=30, deadline=None)
    def test_flip_twice_exact(self, x):
        spec = TransformSpec("flip", {"axis": "horizontal"})
        once = transform(x, spec)
        np.testing.assert_array_equal(once, x[..., ::-1])
        np.testing.assert_array_equal(transform(once, spec), x)

    def test_rotation_90_brute_force(self):
        x = np.array([[[0.1, 0.2], [0.3, 0.4]]])
        m = build_affine("rotation", {"angle": 90.0}, x.shape)
        # with y pointing down, [cos -sin; sin cos] at 90 deg sends (x, y) -> (-y, x)
        # about the center (0.5, 0.5): (0,0)->(1,0), (1,0)->(1,1), (1,1)->(0,1), (0,1)->(0,0)
        expected = np.empty_like(x)
        for (sx, sy), (dx, dy) in {(0, 0): (1, 0), (1, 0): (1, 1), (1, 1): (0, 1), (0, 1): (0, 0)}.items():
            expected[0, dy, dx] = x[0, sy, sx]
        np.testing.assert_allclose(warp(x, m), expected, atol=1e-12)

    @pytest.mark.parametrize("kind,params", [("rotation", {"angle": -10.0}), ("shear", {"a": 0.3}),
                                             ("rotation", {"angle": 47.0}), ("scale", {"s": 0.8})])
    def test_matches_per_pixel_oracle(self, kind, params):
        x = np.random.default_rng(1).random((2, 7, 9))
        m = build_affine(kind, params, x.shape)
        np.testing.assert_allclose(warp(x, m), brute_warp(x, m.T, m.o), atol=1e-12)

    @given(images, st.integers(-3, 3), st.integers(-3, 3))
    @settings(max_examples=30, deadline=None)
    def test_translation_inverse_on_interior(self, x, a, b):
        there = transform(x, TransformSpec("translation", {"offset": [a, b]}))
        back = transform(there, TransformSpec("translation", {"offset": [-a, -b]}))
        h, w = x.shape[-2:]
        # pixels that never left the frame come back exactly
        valid = np.zeros((h, w), bool)
        for i in range(h):
            for j in range(w):
                valid[i, j] = 0 <= i + b < h and 0 <= j + a < w
        np.testing.assert_array_equal(back[..., valid], x[..., valid])

    def test_translation_direction(self):
        x = np.zeros((1, 4, 4))
        x[0, 1, 1] = 1.0
        out = transform(x, TransformSpec("translation", {"offset": [2, 1]}))
        assert out[0, 2, 3] == 1.0 and out.sum() == 1.0

    def test_translation_zero_identity(self):
        x = np.random.default_rng(2).random((3, 5, 5))
        np.testing.assert_array_equal(transform(x, TransformSpec("translation", {"offset": [0, 0]})), x)


class TestScale:
    @pytest.mark.parametrize("s", [0.5, 0.8, 1.1, 1.25, 2.0])
    def test_constant_unchanged(self, s):
        x = np.full((3, 32, 32), 0.6)
        out = scale_roundtrip(x, s)
        assert out.shape == x.shape
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_intermediate_shapes(self):
        assert scale_intermediate_shape((3, 32, 32), 0.8) == (26, 26)
        assert scale_intermediate_shape((3, 32, 32), 1.1) == (35, 35)

    def test_enlarge_is_center_zoom(self):
        # bilinear sampling of a linear ramp is exact, so each output column
        # equals the ramp evaluated at its source coordinate: 35 columns with
        # half-pixel centers, cropped starting at column 1
        w = 32
        ramp = np.tile(np.linspace(0.1, 0.9, w), (1, w, 1))
        out = scale_roundtrip(ramp, 1.1)
        src = np.clip((np.arange(w) + 1 + 0.5) * w / 35 - 0.5, 0, w - 1)
        np.testing.assert_allclose(out[0, 3], 0.1 + 0.8 * src / (w - 1), atol=1e-12)
        # enlarged content changes more slowly per output pixel
        assert (out[0, 0, -2] - out[0, 0, 1]) < (ramp[0, 0, -2] - ramp[0, 0, 1])

    @pytest.mark.parametrize("s", [0.0, -1.0])
    def test_nonpositive(self, s):
        with pytest.raises(InvalidArgumentError):
            scale_roundtrip(np.zeros((1, 4, 4)), s)


class TestSpecs:
    def test_canonical_suite(self):
        suite = canonical_suite()
        assert len(suite) == len(FEATURE_NAMES) == 9
        assert [s.kind for s in suite] == ["additive-noise", "smoothing", "bit-depth", "feature-filter",
                                           "translation", "flip", "rotation", "shear", "scale"]
        assert suite[2].params == {"bits": 6} and suite[6].params == {"angle": -10.0}

    def test_suite_runs_and_stays_in_range(self):
        x = np.random.default_rng(5).random((3, 32, 32)).astype(np.float32)
        for spec in canonical_suite():
            out = transform(x, spec, seed=1)
            assert out.shape == x.shape and out.dtype == np.float32
            assert out.min() >= 0 and out.max() <= 1

    def test_dispatch_bit_depth(self):
        x = np.random.default_rng(6).random((3, 8, 8))
        np.testing.assert_array_equal(transform(x, TransformSpec("bit-depth", {"bits": 7})),
                                      bit_depth_reduce(x, 7))

    def test_only_noise_uses_seed(self):
        x = np.random.default_rng(7).random((3, 8, 8))
        for spec in canonical_suite()[1:]:
            np.testing.assert_array_equal(transform(x, spec, seed=1), transform(x, spec, seed=2))

    def test_json_roundtrip(self, tmp_path):
        suite = canonical_suite()
        save_suite(suite, tmp_path / "suite.json")
        assert load_suite(tmp_path / "suite.json") == suite
        doc = json.loads((tmp_path / "suite.json").read_text())
        assert doc[4] == {"kind": "translation", "params": {"offset": [1, 1]}}

    @pytest.mark.parametrize("kind,params", [
        ("blur", {}), ("smoothing", {"subkind": "maximum", "window": 4}), ("bit-depth", {"bits": 9}),
        ("feature-filter", {"keep_ratio": 0}), ("translation", {"offset": [0.5, 1]}),
        ("flip", {"axis": "diagonal"}), ("scale", {"s": -2}), ("additive-noise", {"subkind": "pink"}),
    ])
    def test_invalid_specs(self, kind, params):
        with pytest.raises(InvalidArgumentError):
            TransformSpec(kind, params)

    @given(images, st.integers(0, 8), st.integers(0, 1000))
    @settings(max_examples=60, deadline=None)
    def test_range_and_determinism(self, x, k, seed):
        spec = canonical_suite()[k]
        a = transform(x, spec, seed)
        assert a.min() >= 0 and a.max() <= 1
        assert a.tobytes() == transform(x, spec, seed).tobytes()
