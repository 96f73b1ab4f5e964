import pytest
import torch

from varmark.errors import ConfigError, ShapeError
from varmark.extractor import ExtractorConfig, WatermarkExtractor, extract_watermark


def test_shape_range_and_determinism():
    torch.manual_seed(0)
    ex = WatermarkExtractor(ExtractorConfig(depth=3, base_channels=8))
    x = torch.rand(2, 3, 64, 64)
    y = extract_watermark(ex, x)
    assert y.shape == (2, 3, 64, 64)
    assert float(y.detach().min()) >= 0.0 and float(y.detach().max()) <= 1.0
    assert torch.equal(y, ex(x))


@pytest.mark.parametrize("attention", [True, False])
def test_depths_and_attention_switch(attention):
    ex = WatermarkExtractor(ExtractorConfig(depth=2, base_channels=4, bottleneck_attention=attention))
    assert ex(torch.rand(1, 3, 12, 20)).shape == (1, 3, 12, 20)


def test_rejects_indivisible_size():
    ex = WatermarkExtractor(ExtractorConfig(depth=3, base_channels=4))
    with pytest.raises(ShapeError):
        ex(torch.rand(1, 3, 60, 64))


def test_invalid_config():
    with pytest.raises(ConfigError):
        ExtractorConfig(depth=0)


def test_output_depends_on_brightness():
    # no per-image normalisation: a global shift of the input changes the output
    torch.manual_seed(1)
    ex = WatermarkExtractor(ExtractorConfig(depth=2, base_channels=4))
    x = torch.rand(1, 3, 16, 16) * 0.5
    assert not torch.allclose(ex(x), ex(x + 0.3))
