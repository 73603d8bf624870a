import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfa_forge.data import ImageRgb, encode_ppm
from cfa_forge.errors import DatasetError, ShapeError
from cfa_forge.metrics import C1, C2, PSNR_CAP, MetricReport, evaluate, psnr, reconstruct_image, ssim


class IdentityStub:
    """Returns each context unchanged; stitching must then reproduce the input."""

    def predict(self, rgb):
        return np.array(rgb, copy=True)


def img(a, sid="x"):
    return ImageRgb(np.asarray(a, dtype=np.float32), sid)


def global_ssim_oracle(a, b):
    a, b = a.astype(np.float64).ravel() * 255, b.astype(np.float64).ravel() * 255
    mx, my = a.mean(), b.mean()
    vx, vy = a.var(), b.var()
    cxy = ((a - mx) * (b - my)).mean()
    return ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx**2 + my**2 + C1) * (vx + vy + C2))


# -- psnr ---------------------------------------------------------------------

def test_psnr_examples():
    x = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(img(x), img(x)) == PSNR_CAP == 99.0
    ref = np.full((4, 4, 3), 100 / 255)
    rec = np.full((4, 4, 3), 101 / 255)
    assert psnr(ref, rec) == pytest.approx(10 * math.log10(255**2), abs=1e-3)
    assert psnr(ref, rec) == pytest.approx(48.1308, abs=1e-3)
    assert psnr(np.zeros((2, 2, 3)), np.ones((2, 2, 3))) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ShapeError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(1)
    base = rng.uniform(0.2, 0.8, size=(16, 16, 3))
    noise = rng.normal(size=base.shape)
    values = [psnr(base, base + amp * noise) for amp in (0.001, 0.002, 0.005, 0.01, 0.02, 0.05)]
    assert all(a > b for a, b in zip(values, values[1:]))


# -- ssim ---------------------------------------------------------------------

def test_ssim_examples():
    x = np.random.default_rng(2).uniform(size=(8, 8, 3))
    assert ssim(x, x) == 1.0
    lo = ssim(np.zeros((4, 4, 3)), np.ones((4, 4, 3)))
    assert lo == pytest.approx(C1 / (255**2 + C1), abs=1e-8)
    assert lo == pytest.approx(9.9990e-5, abs=1e-8)
    with pytest.raises(ShapeError):
        ssim(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), amp=st.floats(0.0, 1.0))
def test_ssim_matches_oracle_symmetric_bounded(seed, amp):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(6, 5, 3))
    b = np.clip(a + amp * rng.normal(size=a.shape), 0, 1)
    s = ssim(a, b)
    assert -1 <= s <= 1
    assert s == pytest.approx(global_ssim_oracle(a, b), abs=1e-12)
    assert abs(s - ssim(b, a)) <= 1e-12


# -- stitching ---------------------------------------------------------------

@pytest.mark.parametrize("h,w,n", [(768, 512, 8), (24, 48, 8), (20, 30, 4), (9, 9, 3)])
def test_identity_stub_is_lossless(h, w, n):
    x = img(np.random.default_rng(h + w).uniform(size=(h, w, 3)))
    out = reconstruct_image(IdentityStub(), x, n)
    assert out.pixels.shape == (h, w, 3)
    assert out.pixels.tobytes() == x.pixels.tobytes()


def test_identity_stub_non_multiple_sizes():
    x = img(np.random.default_rng(7).uniform(size=(29, 37, 3)))
    out = reconstruct_image(IdentityStub(), x, 8)
    assert out.pixels.tobytes() == x.pixels.tobytes()


def test_tiles_cover_image_once():
    # each context predicts a constant equal to its tile index; every pixel must carry exactly one index
    class IndexStub:
        def __init__(self):
            self.next = 0

        def predict(self, rgb):
            out = np.empty_like(rgb)
            for i in range(len(rgb)):
                out[i] = (self.next + i) / 1000.0
            self.next += len(rgb)
            return out

    stub = IndexStub()
    out = reconstruct_image(stub, img(np.zeros((32, 40, 3))), 8, batch=7)
    assert stub.next == 4 * 5
    labels = np.round(out.pixels[..., 0] * 1000).astype(int)
    for t in range(20):
        r, c = divmod(t, 5)
        assert np.all(labels[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8] == t)


def test_reconstruction_clamps():
    class Wild:
        def predict(self, rgb):
            return rgb * 3 - 1

    out = reconstruct_image(Wild(), img(np.random.default_rng(0).uniform(size=(16, 16, 3))), 4)
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1


# -- evaluation and reports ---------------------------------------------------------

def write_images(d, count=3):
    rng = np.random.default_rng(9)
    for i in range(count):
        (d / f"im{i}.ppm").write_bytes(encode_ppm(rng.integers(0, 256, size=(20, 28, 3), dtype=np.uint8)))


def test_evaluate_identity_and_report(tmp_path):
    write_images(tmp_path)
    rep = evaluate(IdentityStub(), tmp_path, 4, {"cfa_kind": "stub"})
    assert [r["id"] for r in rep.images] == ["im0.ppm", "im1.ppm", "im2.ppm"]
    assert rep.mean_psnr == PSNR_CAP and rep.mean_ssim == 1.0
    d = json.loads(rep.to_json())
    assert list(d) == ["images", "mean_psnr", "mean_ssim", "metadata"]
    assert d["metadata"]["cfa_kind"] == "stub" and "ssim_rule" in d["metadata"]


def test_evaluate_mean_and_determinism(tmp_path):
    write_images(tmp_path)

    class Blur:
        def predict(self, rgb):
            return 0.5 * rgb + 0.25

    a = evaluate(Blur(), tmp_path, 4)
    b = evaluate(Blur(), tmp_path, 4)
    assert a.to_json() == b.to_json()
    assert a.mean_psnr == pytest.approx(sum(r["psnr"] for r in a.images) / 3, abs=1e-9)
    out = tmp_path / "r.json"
    a.write(out)
    assert out.read_text() == a.to_json()


def test_evaluate_empty(tmp_path):
    with pytest.raises(DatasetError):
        evaluate(IdentityStub(), tmp_path, 4)
    assert math.isnan(MetricReport().mean_psnr)
