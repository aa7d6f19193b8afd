import numpy as np
import pytest

from affuse import autodiff as A
from affuse.fusion import (
    ATTENTIONAL_KINDS,
    KINDS,
    SOFT_SELECTION_KINDS,
    Fusion,
    UnsupportedOperation,
    fuse,
    fusion_weight_map,
    initial_integrate,
)
from affuse.attention import MSCAM
from affuse.tensor import ConfigError, DimensionError

from helpers import mscam_oracle, randomize_bn

SHAPE = (2, 8, 3, 3)


def _pair(rng, shape=SHAPE):
    return rng.standard_normal(shape), rng.standard_normal(shape)


@pytest.mark.parametrize("kind", KINDS)
def test_output_shape(rng, kind):
    x, y = _pair(rng)
    assert fuse(Fusion(kind, 8, 2, rng=rng), x, y).shape == SHAPE


def test_add_is_sum(rng):
    x, y = _pair(rng)
    np.testing.assert_array_equal(fuse(Fusion("add", 8), x, y).value, x + y)


def test_concat_is_pointwise_mix_of_both_inputs(rng):
    f = Fusion("concat", 8, rng=rng, use_bn=False)
    x, y = _pair(rng)
    w = f.proj.weight.value[:, :, 0, 0]
    want = np.einsum("oc,nchw->nohw", w[:, :8], x) + np.einsum("oc,nchw->nohw", w[:, 8:], y)
    np.testing.assert_allclose(fuse(f, x, y).value, want, rtol=0, atol=1e-12)


def test_aff_matches_elementwise_formula(rng):
    f = randomize_bn(Fusion("aff", 4, 2, rng=rng), rng)
    x, y = _pair(rng, (2, 4, 3, 3))
    m = mscam_oracle(f.mscam, x + y)
    z = fuse(f, x, y).value
    for idx in np.ndindex(x.shape):
        assert abs(z[idx] - (m[idx] * x[idx] + (1 - m[idx]) * y[idx])) < 1e-12


@pytest.mark.parametrize("kind", ["aff", "iaff", "soft_select_highway", "half_aff", "concat_aff", "recursive_aff"])
def test_equal_inputs_return_input(rng, kind):
    f = Fusion(kind, 8, 2, rng=rng)
    x = rng.standard_normal(SHAPE)
    np.testing.assert_allclose(fuse(f, x, x).value, x, rtol=0, atol=4 * np.finfo(float).eps * np.abs(x).max())


@pytest.mark.parametrize("kind", ["aff", "iaff", "half_aff", "concat_aff", "recursive_aff"])
def test_zero_init_blends_to_mean(rng, kind):
    f = Fusion(kind, 8, 2, zero_init=True, rng=rng)
    x, y = _pair(rng)
    np.testing.assert_allclose(fuse(f, x, y).value, (x + y) / 2, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(fusion_weight_map(f, x, y).value, 0.5)


@pytest.mark.parametrize("kind", SOFT_SELECTION_KINDS)
def test_soft_selection_weights_sum_to_one(rng, kind):
    f = Fusion(kind, 8, 2, rng=rng)
    x, y = _pair(rng)
    wx, wy = f.weights(A.constant(x), A.constant(y))
    np.testing.assert_array_equal(wx.value + wy.value, 1.0)


@pytest.mark.parametrize("kind", ATTENTIONAL_KINDS)
def test_weight_map_in_open_unit_interval(rng, kind):
    f = Fusion(kind, 8, 2, rng=rng)
    for _ in range(5):
        x, y = _pair(rng)
        m = fusion_weight_map(f, 3 * x, 3 * y).value
        assert np.all(m > 0) and np.all(m < 1)


@pytest.mark.parametrize("kind", ATTENTIONAL_KINDS)
def test_global_global_weight_map_is_spatially_constant(rng, kind):
    f = Fusion(kind, 8, 2, branch_scales=("global", "global"), rng=rng)
    x, y = _pair(rng)
    m = A.broadcast_to(fusion_weight_map(f, x, y), SHAPE).value
    np.testing.assert_array_equal(np.ptp(m, axis=(2, 3)), 0.0)


# With the attention map pinned to a constant c each kind reduces to its table row.
ROWS = {
    "refine_ms_senet": lambda x, y, c: x + c * y,
    "modulate_ms_gau": lambda x, y, c: c * x + y,
    "soft_select_highway": lambda x, y, c: c * x + (1 - c) * y,
    "modulate_ms_sa": lambda x, y, c: c * x + y,
    "aff": lambda x, y, c: c * x + (1 - c) * y,
    "iaff": lambda x, y, c: c * x + (1 - c) * y,
    "half_aff": lambda x, y, c: c * x + (1 - c) * y,
    "concat_aff": lambda x, y, c: c * x + (1 - c) * y,
    "recursive_aff": lambda x, y, c: c * x + (1 - c) * y,
}


@pytest.mark.parametrize("kind", sorted(ROWS))
def test_formula_with_pinned_attention(rng, kind):
    f = Fusion(kind, 8, 2, rng=rng)
    for cam in f.cams:
        cam.weight_override = 0.3
    x, y = _pair(rng)
    np.testing.assert_allclose(fuse(f, x, y).value, ROWS[kind](x, y, 0.3), rtol=0, atol=1e-15)


# Which inputs the attention map may depend on.
DEPENDS = {
    "refine_ms_senet": "y",
    "modulate_ms_gau": "y",
    "soft_select_highway": "x",
    "modulate_ms_sa": "sum",
    "aff": "sum",
    "half_aff": "sum",
    "concat_aff": "sum",
    "recursive_aff": "sum",
}


@pytest.mark.parametrize("kind", sorted(DEPENDS))
def test_attention_context_source(rng, kind):
    f = randomize_bn(Fusion(kind, 8, 2, rng=rng), rng)
    x, y = _pair(rng)
    d = rng.standard_normal(SHAPE)
    base = fusion_weight_map(f, x, y).value
    moved_x = fusion_weight_map(f, x + d, y).value
    moved_y = fusion_weight_map(f, x, y + d).value
    shifted = fusion_weight_map(f, x + d, y - d).value
    dep = DEPENDS[kind]
    assert (np.array_equal(moved_x, base)) == (dep == "y")
    assert (np.array_equal(moved_y, base)) == (dep == "x")
    if dep == "sum":
        np.testing.assert_allclose(shifted, base, rtol=0, atol=1e-12)


def test_iaff_second_stage_sees_first_stage_output(rng):
    f = randomize_bn(Fusion("iaff", 8, 2, rng=rng), rng)
    x, y = _pair(rng)
    stage1 = initial_integrate(x, y, "aff_stage", f.mscam).value
    m2 = mscam_oracle(f.mscam2, stage1)
    np.testing.assert_allclose(fuse(f, x, y).value, m2 * x + (1 - m2) * y, rtol=0, atol=1e-12)


def test_initial_integrate(rng):
    x, y = _pair(rng)
    np.testing.assert_array_equal(initial_integrate(x, -x).value, 0.0)
    np.testing.assert_array_equal(initial_integrate(x, y).value, x + y)
    zero = MSCAM(8, 2, zero_init=True)
    np.testing.assert_allclose(initial_integrate(x, y, "aff_stage", zero).value, (x + y) / 2, rtol=0, atol=1e-15)
    f = randomize_bn(Fusion("aff", 8, 2, rng=rng), rng)
    np.testing.assert_array_equal(initial_integrate(x, y, "aff_stage", f.mscam).value, fuse(f, x, y).value)
    with pytest.raises(ConfigError):
        initial_integrate(x, y, "aff_stage")
    with pytest.raises(ConfigError):
        initial_integrate(x, y, "max")
    with pytest.raises(DimensionError):
        initial_integrate(x, y[:, :4])


@pytest.mark.parametrize("kind", ["add", "concat"])
def test_weight_map_unsupported_for_plain_kinds(rng, kind):
    x, y = _pair(rng)
    with pytest.raises(UnsupportedOperation):
        fusion_weight_map(Fusion(kind, 8, rng=rng), x, y)


def test_errors(rng):
    with pytest.raises(ConfigError):
        Fusion("max", 8)
    x, y = _pair(rng)
    with pytest.raises(DimensionError):
        fuse(Fusion("aff", 8, 2), x, y[:, :, :2])


def test_iaff_has_two_attention_modules():
    assert Fusion("iaff", 16, 4).num_parameters() == 2 * Fusion("aff", 16, 4).num_parameters()
