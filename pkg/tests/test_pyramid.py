import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import accumulate_loop, bilinear_loop
from varmark.errors import ConfigError, ShapeError
from varmark.pyramid import (
    MultiScaleVQVAE,
    ResidualMap,
    ResidualPyramid,
    ScaleSchedule,
    bilinear_resize,
    nearest_codes,
    quantize_pyramid,
    reconstruct_features,
)


def test_bilinear_2x2_to_1x1_is_mean_of_corners():
    x = torch.tensor([[0.0, 1.0], [2.0, 3.0]])[None, None]
    assert bilinear_resize(x, (1, 1)).item() == pytest.approx(1.5, abs=1e-12)


def test_bilinear_same_size_is_bitwise_identity():
    x = torch.randn(2, 5, 3, 7)
    assert torch.equal(bilinear_resize(x, (3, 7)), x)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), st.floats(-5, 5))
def test_bilinear_constant_stays_constant(a, b, h, w, value):
    x = torch.full((1, 2, a, b), value, dtype=torch.float64)
    y = bilinear_resize(x, (h, w))
    assert y.shape == (1, 2, h, w)
    assert torch.allclose(y, torch.full_like(y, value), atol=1e-12)


@pytest.mark.parametrize("src,dst", [((2, 2), (4, 4)), ((3, 5), (8, 6)), ((1, 4), (3, 3)), ((6, 6), (2, 3))])
def test_bilinear_matches_loop_oracle(src, dst):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, *src))
    got = bilinear_resize(torch.from_numpy(x), dst).numpy()
    np.testing.assert_allclose(got, bilinear_loop(x, *dst), atol=1e-12)


def test_schedule_validation():
    assert len(ScaleSchedule.square([1, 2, 4])) == 3
    with pytest.raises(ConfigError):
        ScaleSchedule.square([2, 1])
    with pytest.raises(ConfigError):
        ScaleSchedule(())
    with pytest.raises(ShapeError):
        quantize_pyramid(torch.zeros(1, 2, 4, 4), torch.zeros(3, 2), ScaleSchedule.square([1, 2]))


def test_nearest_neighbour_brute_force_example():
    f = torch.tensor([0.9, 0.1]).reshape(1, 2, 1, 1)
    z = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    # distances 0.02 vs 1.62 (brute force over both entries)
    d = [float(((f.reshape(2) - z[i]) ** 2).sum()) for i in range(2)]
    assert d[0] < d[1]
    pyr = quantize_pyramid(f, z, ScaleSchedule.square([1]))
    assert pyr[0].indices.item() == 0


def test_nearest_neighbour_tie_picks_lowest_index():
    z = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    x = torch.zeros(1, 2, 1, 1)  # equidistant from entries 0 and 1
    x[0, 1] = -0.5
    assert nearest_codes(x, z).item() == 0


def test_exact_codebook_coverage_reconstructs_exactly():
    rng = np.random.default_rng(1)
    f = torch.from_numpy(rng.normal(size=(1, 3, 4, 4)))
    codebook = f.permute(0, 2, 3, 1).reshape(-1, 3)
    pyr = quantize_pyramid(f, codebook, ScaleSchedule.square([4]))
    assert torch.equal(reconstruct_features(pyr, 1), f)


def _random_pyramid(rng, sides=(1, 2, 4), d=2, batch=1):
    sched = ScaleSchedule.square(sides)
    maps = []
    for s in sides:
        emb = torch.from_numpy(rng.normal(size=(batch, d, s, s)))
        maps.append(ResidualMap(indices=torch.zeros(batch, s, s, dtype=torch.long), embedded=emb))
    return ResidualPyramid(maps=maps, schedule=sched)


def test_reconstruct_matches_independent_accumulation():
    rng = np.random.default_rng(2)
    pyr = _random_pyramid(rng)
    expected = accumulate_loop([m.embedded[0].numpy() for m in pyr.maps], (4, 4))
    np.testing.assert_allclose(reconstruct_features(pyr, 3)[0].numpy(), expected, atol=1e-12)


def test_reconstruct_constant_coarse_map():
    c = torch.tensor([0.3, -1.2], dtype=torch.float64)
    maps = [
        ResidualMap(torch.zeros(1, 1, 1, dtype=torch.long), c.reshape(1, 2, 1, 1)),
        ResidualMap(torch.zeros(1, 4, 4, dtype=torch.long), torch.zeros(1, 2, 4, 4, dtype=torch.float64)),
    ]
    pyr = ResidualPyramid(maps, ScaleSchedule.square([1, 4]))
    assert torch.equal(reconstruct_features(pyr, 2), c.reshape(1, 2, 1, 1).expand(1, 2, 4, 4))


def test_reconstruct_rejects_bad_k():
    pyr = _random_pyramid(np.random.default_rng(0))
    for k in (0, 4):
        with pytest.raises(IndexError):
            reconstruct_features(pyr, k)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_quantize_invariants(seed):
    rng = np.random.default_rng(seed)
    sched = ScaleSchedule.square([1, 2, 3, 4])
    f = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)))
    z = torch.from_numpy(rng.normal(size=(16, 3)))
    z[5] = 0.0
    pyr = quantize_pyramid(f, z, sched)
    assert len(pyr) == len(sched)
    for m, size in zip(pyr.maps, sched.sizes):
        assert m.size == size
        # embedded rows are exactly the codebook rows
        assert torch.equal(m.embedded, z[m.indices].permute(0, 3, 1, 2))
    full = reconstruct_features(pyr)
    # running residual equals F minus the full reconstruction
    assert torch.allclose(pyr.residual, f - full, rtol=1e-5, atol=1e-12)
    for k in range(2, len(sched) + 1):
        diff = reconstruct_features(pyr, k) - reconstruct_features(pyr, k - 1)
        assert torch.allclose(diff, bilinear_resize(pyr[k - 1].embedded, (4, 4)), atol=1e-12)
    # with the zero vector available the last (full-res) scale never increases energy
    before = f - reconstruct_features(pyr, len(sched) - 1)
    assert torch.all((pyr.residual**2).sum(1) <= (before**2).sum(1) + 1e-12)


def test_encode_decode_shapes_and_range():
    torch.manual_seed(0)
    vq = MultiScaleVQVAE(feature_dim=16, codebook_size=32)
    x = torch.rand(2, 3, 64, 64)
    f = vq.encode_image(x)
    assert f.shape == (2, 16, 8, 8)
    with torch.no_grad():
        y = vq.decode_features(torch.randn(2, 16, 8, 8) * 10)
    assert y.shape == (2, 3, 64, 64)
    assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0
    assert torch.equal(vq.encode_image(x), f)
    with pytest.raises(ShapeError):
        vq.encode_image(torch.rand(1, 3, 60, 64))


def test_zeroed_final_encoder_layer_gives_zero_features():
    vq = MultiScaleVQVAE(feature_dim=4, codebook_size=8)
    torch.nn.init.zeros_(vq.encoder.out.weight)
    torch.nn.init.zeros_(vq.encoder.out.bias)
    assert torch.count_nonzero(vq.encode_image(torch.zeros(1, 3, 16, 16))) == 0


def test_straight_through_passes_gradient_to_encoder_features():
    f = torch.randn(1, 2, 4, 4, requires_grad=True)
    z = torch.randn(8, 2)
    pyr = quantize_pyramid(f, z, ScaleSchedule.square([1, 2, 4]), straight_through=True)
    reconstruct_features(pyr).sum().backward()
    assert f.grad is not None and torch.count_nonzero(f.grad) > 0
    for m in pyr.maps:
        assert torch.allclose(m.embedded, z[m.indices].permute(0, 3, 1, 2), atol=1e-6)
