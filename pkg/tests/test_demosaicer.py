import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfa_forge import demosaicer as dm
from cfa_forge.errors import ShapeError
from cfa_forge.tensor import Tensor, no_grad


def params64(c=3, seed=0, l2=0.0):
    return dm.DemosaicerParams.init(c, rng=seed, l2_coeff=l2, dtype=np.float64)


def zero_refinement(p):
    for blk in p.refine:
        for t in blk.tensors():
            t.data[...] = 0


def test_zero_mosaic_gives_zero_outputs():
    p = params64(4)
    out = dm.forward(Tensor(np.zeros((12, 12, 4))), p)
    for o in out:
        assert o.shape == (12, 12, 3)
        assert not np.any(o.data)


def test_output_shapes_rgbw():
    p = dm.DemosaicerParams.init(4, rng=1)
    out = dm.forward(Tensor(np.zeros((2, 24, 24, 4), np.float32)), p)
    assert all(o.shape == (2, 24, 24, 3) for o in out)


def test_zero_refinement_passes_pseudoimage():
    p = params64(3)
    zero_refinement(p)
    x = Tensor(np.random.default_rng(0).uniform(size=(10, 10, 3)))
    out = dm.forward(x, p)
    np.testing.assert_array_equal(out.refine3.data, out.pseudo.data)


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        dm.forward(Tensor(np.zeros((9, 9, 4))), params64(3))


def test_param_shapes_checked():
    p = params64(3)
    named = {k: v for k, v in p.named_parameters().items()}
    named["refine2.k2"] = Tensor(np.zeros((5, 5, 128, 32)))
    with pytest.raises(ShapeError):
        dm.DemosaicerParams.from_named(named)
    with pytest.raises(ValueError):
        dm.DemosaicerParams.init(3, rng=0, l2_coeff=-1.0)


def test_loss_examples():
    p = params64(3)
    label = Tensor(np.zeros((9, 9, 3)))
    same = dm.StageOutputs(*[label] * 5)
    assert dm.total_loss(same, label, p).item() == 0.0
    ones = dm.StageOutputs(*[Tensor(np.ones((9, 9, 3)))] * 5)
    assert dm.total_loss(ones, label, p).item() == pytest.approx(5.0)
    zero_refinement(p)
    p.refine[0].k1.data[0, 0, 0, 0] = 2.0
    p.l2_coeff = 0.1
    assert dm.total_loss(same, label, p).item() == pytest.approx(0.4)
    with pytest.raises(ShapeError):
        dm.total_loss(same, Tensor(np.zeros((8, 8, 3))), p)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), l2=st.sampled_from([0.0, 1e-5, 1e-2]))
def test_loss_decomposition(seed, l2):
    rng = np.random.default_rng(seed)
    p = params64(3, seed % 1000, l2)
    x = Tensor(rng.uniform(size=(2, 9, 9, 3)))
    label = Tensor(rng.uniform(size=(2, 9, 9, 3)))
    with no_grad():
        out = dm.forward(x, p)
        total = dm.total_loss(out, label, p).item()
    terms, l2_val = dm.loss_breakdown(out, label, p)
    ref = sum(np.mean((o.data - label.data) ** 2) for o in out)
    ref += l2 * sum(np.sum(k.data**2) for k in p.regularized_kernels())
    assert total >= 0
    assert total == pytest.approx(sum(terms) + l2_val, abs=1e-6)
    assert total == pytest.approx(ref, abs=1e-6)


def test_param_counts():
    p3, p4 = params64(3), params64(4)
    assert p3.pseudo.size == 729 and p4.pseudo.size == 972
    assert dm.param_count(p4) - dm.param_count(p3) == 243
    per_block = 7 * 7 * 3 * 128 + 128 + 5 * 5 * 128 * 64 + 64 + 3 * 3 * 64 * 3 + 3
    assert dm.param_count(p3) == 729 + 3 * per_block + 81 + 3


def test_glorot_bounds_and_zero_biases():
    p = dm.DemosaicerParams.init(3, rng=5)
    for name, t in p.named_parameters().items():
        if ".b" in name:
            assert not np.any(t.data)
        else:
            k, _, cin, cout = t.shape
            assert np.abs(t.data).max() <= np.sqrt(6 / (k * k * cin + k * k * cout))
    a = dm.DemosaicerParams.init(3, rng=5)
    assert all(np.array_equal(a.named_parameters()[n].data, t.data) for n, t in p.named_parameters().items())


def test_translation_equivariance_interior():
    # receptive radius: 4 (pseudo) + 3 * (3 + 2 + 1) + 1 (final) = 23
    p = params64(3, seed=2)
    for blk in p.refine:  # nonzero biases would be fine, but make the check less trivial
        for t in (blk.b1, blk.b2, blk.b3):
            t.data[...] = 0.01
    rng = np.random.default_rng(3)
    big = rng.uniform(size=(52, 52, 3))
    x0 = Tensor(big[:-1, :-1])
    x1 = Tensor(big[1:, 1:])
    with no_grad():
        y0 = dm.forward(x0, p).final.data
        y1 = dm.forward(x1, p).final.data
    r = 23
    np.testing.assert_allclose(y1[r:-r - 1, r:-r - 1], y0[r + 1:-r, r + 1:-r], atol=1e-12)


def test_astype_copies():
    p = dm.DemosaicerParams.init(3, rng=0)
    q = p.astype(np.float64)
    assert q.pseudo.dtype == np.float64
    q.pseudo.data[...] = 0
    assert np.any(p.pseudo.data)
