"""Dataset ingestion, batching, metrics, and the binary image formats.
Round-trip properties are checked with hypothesis where the input space is
worth fuzzing."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sure_denoise.data import (
    Batch, Dataset, batches, extract_patches, generate_synthetic,
    load_mnist_idx, psnr, read_pgm, write_pgm,
)
from sure_denoise.errors import DataError


# -- IDX ---------------------------------------------------------------------

def _write_idx_images(path, arr: np.ndarray):
    n, h, w = arr.shape
    path.write_bytes(struct.pack(">iiii", 0x803, n, h, w) + arr.tobytes())


def _write_idx_labels(path, labels: np.ndarray):
    path.write_bytes(struct.pack(">ii", 0x801, labels.size) + labels.tobytes())


def test_idx_round_trip(tmp_path):
    imgs = np.arange(3 * 4 * 5, dtype=np.uint8).reshape(3, 4, 5)
    labels = np.array([1, 0, 7], dtype=np.uint8)
    _write_idx_images(tmp_path / "imgs", imgs)
    _write_idx_labels(tmp_path / "labels", labels)
    ds = load_mnist_idx(tmp_path / "imgs", tmp_path / "labels")
    assert ds.clean.shape == (3, 1, 4, 5)
    assert np.allclose(ds.clean[:, 0] * 255.0, imgs)
    assert np.array_equal(ds.labels, labels)
    assert ds.noisy is None and ds.has_clean


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(struct.pack(">iiii", 0x123, 1, 2, 2) + bytes(4))
    with pytest.raises(DataError, match="magic"):
        load_mnist_idx(p)


def test_idx_truncated(tmp_path):
    p = tmp_path / "short"
    p.write_bytes(struct.pack(">iiii", 0x803, 10, 28, 28) + bytes(100))
    with pytest.raises(DataError, match="truncated"):
        load_mnist_idx(p)


def test_idx_label_count_mismatch(tmp_path):
    _write_idx_images(tmp_path / "i", np.zeros((2, 2, 2), dtype=np.uint8))
    _write_idx_labels(tmp_path / "l", np.zeros(3, dtype=np.uint8))
    with pytest.raises(DataError, match="mismatch"):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")


# -- PGM ---------------------------------------------------------------------

def test_pgm_round_trip_exact(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    write_pgm(tmp_path / "a.pgm", img / 255.0)
    back = read_pgm(tmp_path / "a.pgm")
    assert np.array_equal(np.round(back * 255).astype(np.uint8), img)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 31 - 1))
def test_pgm_round_trip_property(h, w, seed):
    img = np.random.default_rng(seed).integers(0, 256, size=(h, w)).astype(np.uint8)
    import tempfile, pathlib
    with tempfile.TemporaryDirectory() as td:
        p = pathlib.Path(td) / "x.pgm"
        write_pgm(p, img / 255.0)
        back = read_pgm(p)
    assert np.array_equal((back * 255).round().astype(np.uint8), img)


def test_pgm_comment_and_errors(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x10\x20\x30")
    assert read_pgm(p).shape == (2, 2)
    (tmp_path / "p2.pgm").write_bytes(b"P2\n2 2\n255\n0 1 2 3")
    with pytest.raises(DataError, match="P5"):
        read_pgm(tmp_path / "p2.pgm")
    (tmp_path / "m.pgm").write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(DataError, match="maxval"):
        read_pgm(tmp_path / "m.pgm")
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(DataError, match="truncated"):
        read_pgm(tmp_path / "t.pgm")


def test_write_pgm_clips_and_quantizes(tmp_path):
    write_pgm(tmp_path / "q.pgm", np.array([[-0.5, 0.5], [1.5, 0.001]]))
    back = read_pgm(tmp_path / "q.pgm") * 255
    assert np.allclose(back, [[0, 128], [255, 0]])


# -- synthetic generation ----------------------------------------------------

@pytest.mark.parametrize("kind", ["strokes", "gradients", "checker"])
def test_generate_synthetic(kind):
    ds = generate_synthetic(4, (16, 16), kind, 0)
    assert ds.clean.shape == (4, 1, 16, 16)
    assert ds.clean.min() >= 0.0 and ds.clean.max() <= 1.0
    again = generate_synthetic(4, (16, 16), kind, 0)
    assert np.array_equal(ds.clean, again.clean)
    assert not np.array_equal(
        ds.clean, generate_synthetic(4, (16, 16), kind, 1).clean
    )


def test_generate_synthetic_unknown_kind():
    with pytest.raises(DataError):
        generate_synthetic(1, (8, 8), "noise", 0)


def test_checker_is_two_level():
    ds = generate_synthetic(2, (16, 16), "checker", 5)
    assert set(np.unique(ds.clean)) == {0.2, 0.8}


# -- batching / patches ------------------------------------------------------

def _toy_dataset(n=10):
    clean = np.arange(n, dtype=np.float64).reshape(n, 1, 1, 1) * np.ones((1, 1, 2, 2))
    return Dataset(noisy=clean + 0.5, clean=clean, sigma=np.arange(n) * 0.1)


def test_batches_cover_each_sample_once():
    ds = _toy_dataset(10)
    seen = []
    for b in batches(ds, 3, epoch_seed=1):
        assert isinstance(b, Batch)
        assert b.y.shape[0] == b.x.shape[0] == b.sigma.shape[0] == len(b.sel)
        assert np.allclose(b.y, ds.noisy[b.sel])
        seen.extend(b.sel.tolist())
    assert sorted(seen) == list(range(10))
    sizes = [len(b.sel) for b in batches(ds, 3, epoch_seed=1)]
    assert sizes == [3, 3, 3, 1]  # short final batch kept


def test_batches_permutation_varies_by_seed():
    ds = _toy_dataset(10)
    order1 = np.concatenate([b.sel for b in batches(ds, 10, epoch_seed=1)])
    order2 = np.concatenate([b.sel for b in batches(ds, 10, epoch_seed=2)])
    order1b = np.concatenate([b.sel for b in batches(ds, 10, epoch_seed=1)])
    assert not np.array_equal(order1, order2)
    assert np.array_equal(order1, order1b)


def test_batch_size_exceeds_dataset():
    with pytest.raises(DataError):
        next(batches(_toy_dataset(4), 5, epoch_seed=0))


def test_gt_free_dataset_refuses_clean_access():
    ds = Dataset(noisy=np.zeros((2, 1, 4, 4)), name="blind")
    assert not ds.has_clean and len(ds) == 2
    with pytest.raises(DataError, match="blind"):
        ds.require_clean()
    b = next(batches(ds, 2, epoch_seed=0))
    assert b.x is None


def test_extract_patches():
    ds = generate_synthetic(3, (16, 16), "gradients", 2)
    ds.noisy = ds.clean + 0.1
    patches = extract_patches(ds, (8, 8), 20, rng=0)
    assert patches.clean.shape == (20, 1, 8, 8)
    assert patches.noisy.shape == (20, 1, 8, 8)
    with pytest.raises(DataError):
        extract_patches(ds, (32, 32), 5, rng=0)


# -- psnr --------------------------------------------------------------------

def test_psnr_known_value():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 0.1)
    assert math.isclose(psnr(a, b), 20.0, rel_tol=1e-12)  # mse 0.01 -> 20 dB


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).random((3, 3))
    assert psnr(a, a) == math.inf


def test_psnr_validation():
    with pytest.raises(DataError):
        psnr(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(DataError):
        psnr(np.zeros((2, 2)), np.zeros((2, 2)), peak=0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_psnr_symmetric_and_peak_shift(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((4, 4)), rng.random((4, 4))
    if np.array_equal(a, b):
        return
    assert math.isclose(psnr(a, b), psnr(b, a))
    # doubling the peak adds exactly 20*log10(2) dB
    assert math.isclose(psnr(a, b, peak=2.0) - psnr(a, b), 20 * math.log10(2))
