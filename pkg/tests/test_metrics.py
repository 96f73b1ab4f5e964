import json
import math

import numpy as np
import pytest

from oracles import mse_loop
from varmark.errors import ShapeError
from varmark.metrics import PSNR_CAP, build_report, mae, mse, psnr, rmse, score_pair, ssim

OFFSET_PSNR = 20 * math.log10(255 / 10)  # 28.1308


def fixture(seed=0, shape=(3, 24, 24)):
    return np.random.default_rng(seed).random(shape)


def test_psnr_examples():
    a = np.full((3, 16, 16), 0.4)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 10 / 255) == pytest.approx(OFFSET_PSNR, abs=1e-3)
    assert OFFSET_PSNR == pytest.approx(28.1308, abs=1e-4)


def test_psnr_matches_scalar_oracle():
    a, b = fixture(1), fixture(2)
    expected = 10 * math.log10(1.0 / mse_loop(a, b))
    assert psnr(a, b) == pytest.approx(expected, abs=1e-6)


def test_mae_rmse_examples_and_identity():
    a = np.full((3, 16, 16), 0.3)
    assert mae(a, a) == 0.0 and rmse(a, a) == 0.0
    assert mae(a, a + 10 / 255) == pytest.approx(10.0, abs=1e-9)
    assert rmse(a, a + 10 / 255) == pytest.approx(10.0, abs=1e-9)
    x, y = fixture(3), fixture(4)
    assert (rmse(x, y) / 255) ** 2 == pytest.approx(mse(x, y), rel=1e-10)
    assert mae(x, y) == pytest.approx(255 * np.mean([abs(p - q) for p, q in zip(x.ravel(), y.ravel())]), rel=1e-12)


def test_ssim_identical_is_exactly_one():
    a = fixture(5)
    assert ssim(a, a) == 1.0


def test_ssim_flat_images_closed_form():
    ma, mb = 0.2, 0.7
    c1 = 0.01**2
    expected = (2 * ma * mb + c1) / (ma**2 + mb**2 + c1)
    assert ssim(np.full((3, 16, 16), ma), np.full((3, 16, 16), mb)) == pytest.approx(expected, abs=1e-9)


def test_ssim_inverted_high_contrast():
    checker = (np.indices((32, 32)).sum(0) % 2).astype(float)
    a = np.stack([checker] * 3)
    assert ssim(a, 1 - a) < 0.05


def test_symmetry_and_errors():
    a, b = fixture(6), fixture(7)
    for f in (psnr, mae, rmse, ssim):
        assert f(a, b) == pytest.approx(f(b, a), rel=1e-12)
    with pytest.raises(ShapeError):
        psnr(a, b[:, :10])
    with pytest.raises(ShapeError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_monotone_in_noise():
    rng = np.random.default_rng(8)
    base = np.clip(fixture(9, (3, 48, 48)) * 0.5 + 0.25, 0, 1)
    z = rng.normal(size=base.shape)
    scores = [(psnr(base, base + s * z), ssim(base, base + s * z)) for s in (0.01, 0.05, 0.1, 0.3)]
    for (p0, s0), (p1, s1) in zip(scores, scores[1:]):
        assert p1 < p0 and s1 < s0


def test_build_report_aggregates():
    one = score_pair(fixture(10), fixture(11))
    rep = build_report("cover_vs_watermarked", [one])
    assert rep.psnr == one["psnr"] and rep.n_samples == 1 and rep.perceptual is None
    two = score_pair(fixture(12), fixture(13), perceptual=lambda a, b: 0.5)
    rep = build_report("watermark_vs_recovered", [dict(one, perceptual=0.1), two], attack="jpeg")
    assert rep.psnr == pytest.approx((one["psnr"] + two["psnr"]) / 2)
    assert rep.perceptual == pytest.approx(0.3)
    row = json.loads(rep.to_json())
    assert set(row) == {"pair_kind", "attack", "psnr", "mae", "rmse", "ssim", "perceptual", "n_samples"}
    with pytest.raises(ValueError):
        build_report("cover_vs_watermarked", [])
    with pytest.raises(ValueError):
        build_report("other", [one])
