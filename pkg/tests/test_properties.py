"""Property-based checks over randomly drawn shapes and inputs."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from affuse import autodiff as A
from affuse import tensor as K
from affuse.data import LabeledImage, encode_cifar_record, load_cifar_binary, metric_miou
from affuse.fusion import SOFT_SELECTION_KINDS, Fusion, fuse

from oracles import conv2d_loops, iou_by_counting

seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=25, deadline=None)
@given(seed=seeds, n=st.integers(1, 2), c_in=st.integers(1, 3), c_out=st.integers(1, 3),
       k=st.sampled_from([1, 3]), stride=st.integers(1, 2), size=st.integers(3, 6))
def test_conv_matches_loops(seed, n, c_in, c_out, k, stride, size):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c_in, size, size))
    w = rng.standard_normal((c_out, c_in, k, k))
    b = rng.standard_normal(c_out)
    np.testing.assert_allclose(K.conv2d_raw(x, w, stride, k // 2, b), conv2d_loops(x, w, b, stride, k // 2),
                               rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=seeds, kind=st.sampled_from(SOFT_SELECTION_KINDS), c=st.sampled_from([2, 4, 8]),
       hw=st.integers(1, 4))
def test_soft_selection_stays_between_inputs(seed, kind, c, hw):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, c, hw, hw))
    f = Fusion(kind, c, 2, rng=rng)
    z = fuse(f, x, y).value
    lo, hi = np.minimum(x, y), np.maximum(x, y)
    slack = 1e-12
    assert np.all(z >= lo - slack) and np.all(z <= hi + slack)
    wx, wy = f.weights(A.constant(x), A.constant(y))
    assert np.all((wx.value > 0) & (wx.value < 1))
    np.testing.assert_array_equal(wx.value + wy.value, 1.0)


@settings(max_examples=20, deadline=None)
@given(seed=seeds, count=st.integers(1, 3), variant=st.sampled_from(["cifar10", "cifar100_coarse", "cifar100_fine"]))
def test_cifar_round_trip(tmp_path_factory, seed, count, variant):
    rng = np.random.default_rng(seed)
    k = {"cifar10": 10, "cifar100_coarse": 20, "cifar100_fine": 100}[variant]
    items = [LabeledImage(rng.integers(0, 256, (1, 3, 32, 32)) / 255.0, int(rng.integers(k)))
             for _ in range(count)]
    path = tmp_path_factory.mktemp("cifar") / "batch.bin"
    path.write_bytes(b"".join(encode_cifar_record(it, variant) for it in items))
    for it, back in zip(items, load_cifar_binary(path, variant)):
        assert back.label == it.label
        np.testing.assert_array_equal(back.pixels, it.pixels)


@settings(max_examples=30, deadline=None)
@given(seed=seeds, k=st.integers(2, 4), size=st.integers(1, 5))
def test_miou_matches_counting(seed, k, size):
    rng = np.random.default_rng(seed)
    p, t = rng.integers(0, k, (2, size, size)), rng.integers(0, k, (2, size, size))
    assert abs(metric_miou(p, t, k) - iou_by_counting(p, t, k)) <= 1e-15
