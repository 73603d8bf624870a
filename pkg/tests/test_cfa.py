import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfa_forge.cfa import (RGB, RGBW, CfaMask, ColorConfig, FixedCfa, HardMaxCfa, LinearCfa, SoftmaxCfa,
                           build_cfa, color_config, fixed_cfa, hardmax_mask, linear_project, load_pattern,
                           mosaic, parse_pattern, render_mask, softmax_anneal, softmax_mask,
                           synthesize_channels, tile, tile_mask)
from cfa_forge.errors import PatternError, ShapeError
from cfa_forge.tensor import Tensor, grad_check, mse, mul, tsum

scores_3 = arrays(np.float64, (4, 4, 3), elements=st.floats(-10, 10, allow_nan=False))


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- color configurations ------------------------------------------------------

def test_color_configs():
    assert RGB.channels == 3 and RGBW.channels == 4
    assert RGBW.labels == ("R", "G", "B", "W")
    assert color_config("rgbw") is RGBW
    with pytest.raises(ValueError):
        color_config("cmy")
    with pytest.raises(ValueError):
        ColorConfig("bad", ("R", "R", "G"))


# -- hardmax ---------------------------------------------------------------

def test_hardmax_examples():
    np.testing.assert_array_equal(hardmax_mask(t64([[[0.2, 0.7, 0.1]]])).data[0, 0], [0, 1, 0])
    np.testing.assert_array_equal(hardmax_mask(t64([[[0.5, 0.5, 0.2]]])).data[0, 0], [1, 0, 0])


def test_hardmax_straight_through_example():
    s = t64([[[0.2, 0.7, 0.1]]], grad=True)
    g = 0.37
    tsum(mul(hardmax_mask(s), t64(np.full((1, 1, 3), g)))).backward()
    np.testing.assert_array_equal(s.grad[0, 0], [0, g, 0])


@settings(max_examples=80, deadline=None)
@given(scores=scores_3, scale=st.floats(1e-3, 1e3))
def test_hardmax_one_hot_and_scale_invariant(scores, scale):
    m = hardmax_mask(t64(scores)).data
    assert set(np.unique(m)) <= {0.0, 1.0}
    np.testing.assert_array_equal(m.sum(axis=-1), 1.0)
    np.testing.assert_array_equal(m.argmax(-1), scores.argmax(-1))
    scaled = scores * scale
    if np.array_equal(scaled.argmax(-1), scores.argmax(-1)):  # rounding can merge near-ties
        np.testing.assert_array_equal(hardmax_mask(t64(scaled)).data, m)


@settings(max_examples=80, deadline=None)
@given(scores=scores_3, seed=st.integers(0, 2**31 - 1))
def test_hardmax_gradient_sparsity(scores, seed):
    up = np.random.default_rng(seed).normal(size=scores.shape)
    s = t64(scores, grad=True)
    tsum(mul(hardmax_mask(s), t64(up))).backward()
    onehot = np.eye(3)[scores.argmax(-1)]
    np.testing.assert_array_equal(s.grad, up * onehot)


def test_hardmax_module_mask_matches_argmax():
    cfa = HardMaxCfa(8, RGBW, rng=3)
    assert cfa.mask() == CfaMask(cfa.scores.data.argmax(-1), RGBW)
    assert cfa.scores.data.min() >= 0 and cfa.scores.data.max() <= 1


# -- softmax comparator ---------------------------------------------------------

def test_softmax_mask_examples():
    sharp = SoftmaxCfa(t64([[[0.2, 0.7, 0.1]]]), alpha=1000.0)
    np.testing.assert_allclose(softmax_mask(sharp).data[0, 0], [0, 1, 0], atol=1e-3)
    flat = SoftmaxCfa(t64(np.full((2, 2, 4), 0.4)), alpha=3.0, config=RGBW)
    np.testing.assert_allclose(softmax_mask(flat).data, 0.25)
    rnd = SoftmaxCfa.init(8, RGB, rng=1, alpha=2.0)
    np.testing.assert_array_equal(softmax_mask(rnd).data.argmax(-1), rnd.scores.data.argmax(-1))


def test_softmax_anneal():
    s = SoftmaxCfa(t64(np.zeros((2, 2, 3))), alpha=1.0, growth=1.5)
    for _ in range(4):
        s = softmax_anneal(s)
    assert s.alpha == pytest.approx(5.0625)
    c = SoftmaxCfa(t64(np.zeros((2, 2, 3))), alpha=2.0, growth=1.0)
    assert softmax_anneal(c).alpha == 2.0
    with pytest.raises(ValueError):
        SoftmaxCfa(t64(np.zeros((2, 2, 3))), alpha=0.0)
    with pytest.raises(ValueError):
        SoftmaxCfa(t64(np.zeros((2, 2, 3))), growth=0.9)


def test_softmax_alpha_non_decreasing():
    s = SoftmaxCfa.init(4, rng=0)
    alphas = [s.alpha]
    for _ in range(10):
        s = s.end_epoch()
        alphas.append(s.alpha)
    assert all(b >= a for a, b in zip(alphas, alphas[1:]))


# -- linear comparator -------------------------------------------------------

def test_linear_project_examples():
    rng = np.random.default_rng(0)
    patch = t64(rng.uniform(size=(4, 4, 3)))
    w = np.zeros((2, 2, 3))
    w[..., 1] = 1
    green = linear_project(LinearCfa(2, weights=w, bias=np.zeros((2, 2))), patch)
    np.testing.assert_allclose(green.data[..., 0], patch.data[..., 1], rtol=1e-6)
    const = linear_project(LinearCfa(2, weights=np.zeros((2, 2, 3)), bias=np.full((2, 2), 0.3)), patch)
    np.testing.assert_allclose(const.data, 0.3, rtol=1e-6)
    one = linear_project(LinearCfa(1, weights=np.ones((1, 1, 3)), bias=np.zeros((1, 1))), t64([[[0.1, 0.2, 0.3]]]))
    assert one.data.shape == (1, 1, 1) and one.data[0, 0, 0] == pytest.approx(0.6, rel=1e-6)


def test_linear_shape_mismatch_and_clamp():
    cfa = LinearCfa(2, weights=np.full((2, 2, 3), -1.0))
    assert cfa.weights.data.min() == 0  # clamped on construction
    cfa.weights.data[0, 0, 0] = -0.5
    cfa.after_step()
    assert cfa.weights.data.min() == 0
    with pytest.raises(ShapeError):
        linear_project(cfa, t64(np.zeros((4, 4, 4))))


def test_linear_project_gradients():
    rng = np.random.default_rng(2)
    cfa = LinearCfa(2, rng=2)
    cfa.weights = t64(cfa.weights.data, grad=True)
    cfa.bias = t64(rng.normal(size=(2, 2)), grad=True)
    x = t64(rng.uniform(size=(2, 5, 3, 3)), grad=True)
    y = t64(rng.uniform(size=(2, 5, 3, 1)))
    rep = grad_check(lambda: mse(linear_project(cfa, x), y), [cfa.weights, cfa.bias, x])
    assert rep.max_rel_err < 1e-6


# -- fixed patterns -------------------------------------------------------------

def test_bayer_default_and_file_equivalence(tmp_path):
    bayer = fixed_cfa("bayer")
    assert bayer.letters() == ["RG", "GB"]
    p = tmp_path / "rggb.txt"
    p.write_text("RG\nGB")
    assert fixed_cfa(str(p)) == bayer
    assert load_pattern(p) == bayer


def test_rgbw_default_counts():
    m = fixed_cfa("rgbw")
    assert m.config == RGBW and m.shape == (4, 4)
    counts = m.counts()
    assert counts["W"] == 8 and all(counts[c] > 0 for c in "RGB")
    assert max(counts, key=counts.get) == "W"


@pytest.mark.parametrize("name", ["bayer", "lukac", "rgbw", "cfz"])
def test_fixed_patterns_roundtrip_text(name):
    m = fixed_cfa(name)
    assert parse_pattern(m.to_text(), m.config) == m


def test_pattern_errors(tmp_path):
    with pytest.raises(PatternError):
        fixed_cfa("xtrans")
    with pytest.raises(PatternError):
        parse_pattern("RGX\nGBR")
    with pytest.raises(PatternError):
        parse_pattern("RG\nGBB")
    with pytest.raises(PatternError):
        parse_pattern("RW\nGB", RGB)  # W needs the RGBW configuration
    with pytest.raises(PatternError):
        parse_pattern("# only a comment\n")
    assert parse_pattern("# comment\nRG\n\nGB\n") == fixed_cfa("bayer")


def test_cfa_mask_validation():
    with pytest.raises(PatternError):
        CfaMask(np.array([[0, 3]]), RGB)
    with pytest.raises(ShapeError):
        CfaMask(np.array([0, 1]), RGB)
    m = CfaMask(np.array([[0, 1], [1, 2]]))
    with pytest.raises(ValueError):
        m.selection[0, 0] = 2


# -- tiling ------------------------------------------------------------------

def test_tile_mask_examples():
    bayer = fixed_cfa("bayer")
    t = tile_mask(bayer, 4, 4)
    np.testing.assert_array_equal(t.selection, np.tile(bayer.selection, (2, 2)))
    assert tile_mask(bayer, 2, 2) == bayer
    big = CfaMask(np.random.default_rng(0).integers(0, 3, size=(16, 16)))
    t = tile_mask(big, 24, 24)
    np.testing.assert_array_equal(t.selection[16:, 16:], big.selection[:8, :8])
    np.testing.assert_array_equal(t.selection[:16, :16], big.selection)


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 6), h=st.integers(1, 20), w=st.integers(1, 20), seed=st.integers(0, 1000))
def test_tile_mask_wraps(m, h, w, seed):
    base = CfaMask(np.random.default_rng(seed).integers(0, 3, size=(m, m)))
    t = tile_mask(base, h, w).selection
    for i in range(h):
        for j in range(w):
            assert t[i, j] == base.selection[i % m, j % m]


def test_tile_gradient_folds_periodically():
    rng = np.random.default_rng(4)
    base = t64(rng.normal(size=(3, 3, 2)), grad=True)
    target = t64(rng.normal(size=(7, 5, 2)))
    rep = grad_check(lambda: mse(tile(base, 7, 5), target), [base])
    assert rep.max_rel_err < 1e-6


# -- channel synthesis ----------------------------------------------------------

def test_synthesize_channels():
    rgb = np.random.default_rng(0).uniform(size=(3, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(synthesize_channels(rgb, RGB), rgb)
    w = synthesize_channels(np.array([[[0.3, 0.6, 0.9]]]), RGBW)
    assert w.shape == (1, 1, 4) and w[0, 0, 3] == pytest.approx(0.6)
    gray = np.full((2, 2, 3), 0.42)
    np.testing.assert_allclose(synthesize_channels(gray, RGBW)[..., 3], 0.42)
    with pytest.raises(ShapeError):
        synthesize_channels(np.zeros((2, 2, 4)), RGB)


# -- mosaic ---------------------------------------------------------------

def test_mosaic_examples():
    g = CfaMask(np.array([[1]]))
    np.testing.assert_allclose(mosaic(t64([[[0.4, 0.8, 0.2]]]), g).data[0, 0], [0, 0.8, 0])
    x = t64(np.random.default_rng(1).uniform(size=(6, 6, 3)))
    all_r = CfaMask(np.zeros((6, 6), dtype=int))
    np.testing.assert_array_equal(mosaic(x, all_r).data.sum(-1), x.data[..., 0])
    with pytest.raises(ShapeError):
        mosaic(x, fixed_cfa("bayer"))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.sampled_from([3, 4]), batched=st.booleans())
def test_mosaic_properties(seed, c, batched):
    rng = np.random.default_rng(seed)
    cfg = RGB if c == 3 else RGBW
    shape = (2, 5, 6, c) if batched else (5, 6, c)
    x = t64(rng.uniform(size=shape))
    m = tile_mask(CfaMask(rng.integers(0, c, size=(3, 3)), cfg), 5, 6)
    y = mosaic(x, m).data
    assert np.all(np.count_nonzero(y, axis=-1) <= 1)
    np.testing.assert_array_equal(mosaic(t64(y), m).data, y)
    assert np.sum(y**2) <= np.sum(x.data**2)


def test_mosaic_gradient_through_soft_mask():
    rng = np.random.default_rng(6)
    x = t64(rng.uniform(size=(2, 4, 4, 3)), grad=True)
    mask = t64(rng.uniform(size=(4, 4, 3)), grad=True)
    y = t64(rng.uniform(size=(2, 4, 4, 3)))
    rep = grad_check(lambda: mse(mosaic(x, mask), y), [x, mask])
    assert rep.max_rel_err < 1e-6


# -- module wrappers -----------------------------------------------------------

def test_build_cfa_kinds():
    assert isinstance(build_cfa("hardmax", 8, RGB, 0), HardMaxCfa)
    assert isinstance(build_cfa("softmax", 8, RGB, 0), SoftmaxCfa)
    lin = build_cfa("linear", 8, RGB, 0)
    assert isinstance(lin, LinearCfa) and lin.demosaic_channels == 1
    fixed = build_cfa("fixed:bayer", 8, RGB)
    assert isinstance(fixed, FixedCfa) and fixed.parameters() == {}
    assert build_cfa("fixed:cfz", 8, RGBW).mask().config == RGBW
    with pytest.raises(PatternError):
        build_cfa("magic")


def test_hardmax_apply_is_sparse_and_binary():
    cfa = HardMaxCfa(8, RGBW, rng=0)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 24, 24, 4)).astype(np.float32))
    y = cfa.apply(x).data
    assert np.all(np.count_nonzero(y, axis=-1) <= 1)
    expected = mosaic(x, tile_mask(cfa.mask(), 24, 24)).data
    np.testing.assert_array_equal(y, expected)


def test_render_mask():
    img = render_mask(HardMaxCfa(8, RGB, rng=0).mask(), 16)
    assert img.shape == (128, 128, 3) and img.dtype == np.uint8
    bayer = render_mask(fixed_cfa("bayer"), 2)
    np.testing.assert_array_equal(bayer[0, 0], (255, 0, 0))
    np.testing.assert_array_equal(bayer[0, 3], (0, 255, 0))
    np.testing.assert_array_equal(bayer[3, 3], (0, 0, 255))
    np.testing.assert_array_equal(render_mask(fixed_cfa("cfz"), 1)[0, 0], (255, 255, 255))
