import numpy as np
import pytest
import torch

from varmark.data import ingest_pairs, load_image, make_synthetic_data, save_image, synthetic_cover, synthetic_logo


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return make_synthetic_data(root, n_covers=6, n_watermarks=5, size=32, seed=0)


def test_synthetic_generators_are_seeded_and_in_range():
    for fn in (synthetic_cover, synthetic_logo):
        a = fn(np.random.default_rng(4), 32)
        b = fn(np.random.default_rng(4), 32)
        assert a.shape == (32, 32, 3) and np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1


def test_single_pair(dataset):
    pairs = ingest_pairs(*dataset, n=1, seed=0, size=32)
    assert len(pairs) == 1
    cover, mark = pairs[0]
    assert cover.shape == mark.shape == (3, 32, 32)
    assert float(cover.min()) >= 0 and float(cover.max()) <= 1


def test_same_seed_same_pairing(dataset):
    a = ingest_pairs(*dataset, n=5, seed=3, size=32)
    b = ingest_pairs(*dataset, n=5, seed=3, size=32)
    c = ingest_pairs(*dataset, n=5, seed=4, size=32)
    assert all(torch.equal(x[0], y[0]) and torch.equal(x[1], y[1]) for x, y in zip(a, b))
    assert not all(torch.equal(x[0], y[0]) for x, y in zip(a, c))


def test_pairing_without_replacement(dataset):
    pairs = ingest_pairs(*dataset, n=5, seed=1, size=32)
    covers = {c.numpy().tobytes() for c, _ in pairs}
    assert len(covers) == 5


def test_too_many_pairs_is_an_error(dataset):
    with pytest.raises(ValueError, match="requested 6"):
        ingest_pairs(*dataset, n=6, seed=0, size=32)


def test_empty_and_missing_directories(dataset, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError, match="no decodable"):
        ingest_pairs(empty, dataset[1], n=1, seed=0)
    with pytest.raises(FileNotFoundError):
        ingest_pairs(tmp_path / "missing", dataset[1], n=1, seed=0)


def test_undecodable_files_are_skipped(dataset, tmp_path, caplog):
    covers = tmp_path / "covers"
    covers.mkdir()
    for p in sorted(dataset[0].iterdir())[:2]:
        (covers / p.name).write_bytes(p.read_bytes())
    (covers / "broken.png").write_bytes(b"not an image")
    pairs = ingest_pairs(covers, dataset[1], n=2, seed=0, size=32)
    assert len(pairs) == 2
    assert "skipped 1 cover" in caplog.text


def test_resize_on_load_and_round_trip(tmp_path):
    img = torch.rand(3, 20, 20)
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png")
    assert float((back - img).abs().max()) <= 0.5 / 255 + 1e-6
    assert load_image(tmp_path / "x.png", size=16).shape == (3, 16, 16)
