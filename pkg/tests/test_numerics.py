import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bgshift.numerics import (NumericalError, downsample_label_center, downsample_mean,
                              finite_diff_check, load_tensor, save_tensor, softmax,
                              upsample_nearest)


def test_softmax_symmetric():
    np.testing.assert_array_equal(softmax(np.array([0.0, 0.0])), [0.5, 0.5])


def test_softmax_large_logit_does_not_overflow():
    out = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(out))
    assert out[0] == 1.0
    assert out[1] < 1e-300


def test_softmax_log_ratios():
    out = softmax(np.log([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=0, atol=1e-15)


def test_softmax_empty_axis_rejected():
    with pytest.raises(ValueError):
        softmax(np.zeros((3, 0)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-100, 100)))
def test_softmax_slices_sum_to_one(x):
    out = softmax(x)
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=-1) - 1)) < 1e-12


def test_downsample_mean_block():
    assert downsample_mean(np.array([[1.0, 1.0], [3.0, 3.0]]), 2)[0, 0] == 2.0


def test_downsample_mean_constant():
    np.testing.assert_array_equal(downsample_mean(np.full((8, 8, 3), 2.5), 4), np.full((2, 2, 3), 2.5))


def test_downsample_mean_matches_block_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 8))
    expected = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            expected[i, j] = sum(x[4 * i + a, 4 * j + b] for a in range(4) for b in range(4)) / 16
    np.testing.assert_allclose(downsample_mean(x, 4), expected, rtol=0, atol=1e-15)


def test_downsample_rejects_non_divisible():
    with pytest.raises(ValueError):
        downsample_mean(np.zeros((6, 8)), 4)
    with pytest.raises(ValueError):
        downsample_label_center(np.zeros((8, 6), dtype=int), 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_downsample_mean_preserves_global_mean(p, hb, wb, seed):
    x = np.random.default_rng(seed).uniform(-10, 10, (p * hb, p * wb, 2))
    assert abs(downsample_mean(x, p).mean() - x.mean()) < 1e-12


def test_label_center_uniform_and_ignore():
    assert np.all(downsample_label_center(np.full((4, 4), 3), 4) == 3)
    y = np.zeros((4, 4), dtype=int)
    y[2, 2] = 255
    assert downsample_label_center(y, 4)[0, 0] == 255


def test_label_center_checkerboard():
    i, j = np.indices((6, 6))
    y = np.where((i + j) % 2 == 0, 1, 2)
    out = downsample_label_center(y, 2)
    expected = np.array([[y[2 * h + 1, 2 * w + 1] for w in range(3)] for h in range(3)])
    np.testing.assert_array_equal(out, expected)
    assert np.all(out == 1)  # centers sit at (odd, odd)


def test_upsample_single_cell():
    np.testing.assert_array_equal(upsample_nearest(np.array([[[7.0]]]), 2), np.full((2, 2, 1), 7.0))


def test_upsample_matches_indexing():
    x = np.arange(4.0).reshape(2, 2, 1)
    out = upsample_nearest(x, 3)
    expected = np.array([[[x[r // 3, c // 3, 0]] for c in range(6)] for r in range(6)])
    np.testing.assert_array_equal(out, expected)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_upsample_then_downsample_is_identity(p, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((h, w, 3))
    np.testing.assert_allclose(downsample_mean(upsample_nearest(x, p), p), x, rtol=0, atol=1e-12)


def test_finite_diff_quadratic_exact():
    p = np.random.default_rng(1).standard_normal(10)
    assert finite_diff_check(lambda q: 0.5 * float(q @ q), p.copy(), p) < 1e-8


def test_finite_diff_detects_scaled_gradient():
    p = np.random.default_rng(2).uniform(0.5, 2.0, 6)
    err = finite_diff_check(lambda q: 0.5 * float(q @ q), 2 * p, p)
    assert abs(err - 1 / 3) < 1e-6


def test_finite_diff_rejects_bad_inputs():
    p = np.ones(2)
    with pytest.raises(ValueError):
        finite_diff_check(lambda q: 0.0, p, p, eps=0)
    with pytest.raises(NumericalError):
        finite_diff_check(lambda q: math.inf, p, p)


def test_tensor_container_roundtrip(tmp_path):
    x = np.random.default_rng(3).standard_normal((2, 3, 4))
    save_tensor(tmp_path / "x.clt", x)
    raw = (tmp_path / "x.clt").read_bytes()
    assert raw[:4] == b"CLT1"
    assert int.from_bytes(raw[4:8], "little") == 3
    assert [int.from_bytes(raw[8 + 8 * i:16 + 8 * i], "little") for i in range(3)] == [2, 3, 4]
    assert len(raw) == 8 + 24 + 8 * 24
    np.testing.assert_array_equal(load_tensor(tmp_path / "x.clt"), x)


def test_tensor_container_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.clt").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "bad.clt")
