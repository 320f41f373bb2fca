import hashlib
import os
import shutil

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from conftest import FIXTURES
from vogn import recipes
from vogn.data import (
    AugmentationSpec,
    Dataset,
    augment,
    effective_n,
    load_csv,
    load_digits,
    load_idx,
    make_synthetic,
    minibatches,
    read_idx,
    verify_manifest,
    write_idx,
)
from vogn.tensor import RngStream

IMAGES = os.path.join(FIXTURES, "images4.idx")
LABELS = os.path.join(FIXTURES, "labels4.idx")


# -- IDX ------------------------------------------------------------------------------

def test_idx_fixture_header_arithmetic():
    data = load_idx(IMAGES, LABELS)
    assert len(data) == 4 and data.x.shape == (4, 1, 3, 5)
    assert data.y.tolist() == [3, 1, 4, 1]
    assert data.x.min() >= 0.0 and data.x.max() <= 1.0
    raw = open(IMAGES, "rb").read()
    assert raw[:4] == bytes([0, 0, 0x08, 3])
    assert len(raw) == 4 + 3 * 4 + 4 * 3 * 5


def test_idx_fixture_checksums():
    assert verify_manifest(os.path.join(FIXTURES, "manifest.json"))
    digest = hashlib.sha256(open(LABELS, "rb").read()).hexdigest()
    assert digest == "d79a7557b0b2bea1f3428d1e702cfde7e597f7ba335f3c66f5e6d747d3938f67"


def test_manifest_detects_tampering(tmp_path):
    for f in ("images4.idx", "labels4.idx", "manifest.json"):
        shutil.copy(os.path.join(FIXTURES, f), tmp_path / f)
    with open(tmp_path / "labels4.idx", "r+b") as fh:
        fh.seek(-1, 2)
        fh.write(b"\x07")
    with pytest.raises(ValueError, match="labels4"):
        verify_manifest(str(tmp_path / "manifest.json"))


@pytest.mark.parametrize("dtype", ["u1", "i1", ">i2", ">i4", ">f4", ">f8"])
def test_idx_roundtrip(tmp_path, dtype):
    arr = (RngStream(0).normal((3, 2, 4)) * 50).astype(dtype)
    write_idx(tmp_path / "a.idx", arr)
    back = read_idx(tmp_path / "a.idx")
    assert back.shape == arr.shape and np.array_equal(back, arr)


def test_idx_bad_magic(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x01\x05")
    with pytest.raises(ValueError, match="byte 0"):
        read_idx(tmp_path / "bad.idx")


def test_idx_trailing_bytes(tmp_path):
    (tmp_path / "t.idx").write_bytes(open(LABELS, "rb").read() + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        read_idx(tmp_path / "t.idx")


@given(st.integers(0, 4 + 12 + 59))
def test_idx_any_truncation_errors(tmp_path_factory, cut):
    raw = open(IMAGES, "rb").read()
    path = tmp_path_factory.mktemp("trunc") / "t.idx"
    path.write_bytes(raw[:cut])
    with pytest.raises(ValueError, match="byte"):
        read_idx(path)


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "l.idx", np.array([1, 2], np.uint8))
    with pytest.raises(ValueError):
        load_idx(IMAGES, tmp_path / "l.idx")


# -- CSV ------------------------------------------------------------------------------------

def test_csv_loader():
    d = load_csv(os.path.join(FIXTURES, "tiny.csv"))
    assert d.x.tolist() == [[0.5, -1.0], [1.5, 2.0], [-0.25, 0.0]]
    assert d.y.tolist() == [1, 0, 2] and d.n_classes == 3


def test_csv_missing_label_column():
    with pytest.raises(ValueError, match="label column"):
        load_csv(os.path.join(FIXTURES, "tiny.csv"), label_column="target")


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), [0, 3], 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), [0], 3)


# -- synthetic ----------------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["two-moons", "gaussian-blobs"])
def test_synthetic_deterministic(kind):
    a, b = make_synthetic(kind, 101, 0.2, seed=3), make_synthetic(kind, 101, 0.2, seed=3)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.x, make_synthetic(kind, 101, 0.2, seed=4).x)


@given(st.sampled_from(["two-moons", "gaussian-blobs"]), st.integers(2, 300), st.integers(0, 1000),
       st.integers(2, 6))
def test_synthetic_balanced(kind, n, seed, k):
    d = make_synthetic(kind, n, 0.3, seed, n_classes=k)
    counts = np.bincount(d.y, minlength=d.n_classes)
    assert counts.max() - counts.min() <= 1 and counts.sum() == n


def test_noiseless_moons_on_their_curves():
    d = make_synthetic("two-moons", 400, 0.0, seed=5)
    x, y = d.x[:, 0], d.x[:, 1]
    upper = np.abs(x**2 + y**2 - 1.0) < 1e-9
    lower = np.abs((x - 1.0) ** 2 + (y - 0.5) ** 2 - 1.0) < 1e-9
    assert np.all(upper ^ lower)
    assert np.array_equal(lower.astype(int), d.y)


def test_distant_blobs_one_nearest_neighbour():
    train = make_synthetic("gaussian-blobs", 90, 0.5, seed=6, centers=[[0, 0], [20, 0], [0, 20]])
    test = make_synthetic("gaussian-blobs", 90, 0.5, seed=7, centers=[[0, 0], [20, 0], [0, 20]])
    dist = ((test.x[:, None, :] - train.x[None, :, :]) ** 2).sum(-1)
    assert np.mean(train.y[dist.argmin(axis=1)] == test.y) == 1.0


def test_blob_shift_translates():
    a = make_synthetic("gaussian-blobs", 30, 0.1, seed=8)
    b = make_synthetic("gaussian-blobs", 30, 0.1, seed=8, shift=[12, 12])
    assert np.allclose(b.x - a.x, 12.0)


def test_synthetic_errors():
    with pytest.raises(ValueError):
        make_synthetic("spirals", 10, 0.1, 0)
    with pytest.raises(ValueError):
        make_synthetic("two-moons", 1, 0.1, 0)


def test_digits():
    d = load_digits()
    assert d.x.shape == (1797, 64) and d.n_classes == 10
    assert 0.0 <= d.x.min() and d.x.max() <= 1.0
    assert load_digits(flat=False).x.shape == (1797, 1, 8, 8)


# -- augmentation ------------------------------------------------------------------------------

def images(m=6, c=2, s=5, seed=9):
    return RngStream(seed).normal((m, c, s, s))


def test_augment_identity():
    x = images()
    out = augment(x, AugmentationSpec(pad=0, crop=None, hflip=False), RngStream(0))
    assert np.array_equal(out, x)


def test_augment_flip_involution():
    x = images()
    spec = AugmentationSpec(pad=0)
    once = augment(x, spec, RngStream(1), flip=True)
    assert np.array_equal(once, x[..., ::-1])
    assert np.array_equal(augment(once, spec, RngStream(2), flip=True), x)


def test_augment_shapes_and_crop_content():
    x = images(s=8)
    out, off = augment(x, AugmentationSpec(pad=2, crop=6), RngStream(3), flip=False, return_offsets=True)
    assert out.shape == (6, 2, 6, 6)
    padded = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    for i, (oy, ox) in enumerate(off):
        assert np.array_equal(out[i], padded[i, :, oy:oy + 6, ox:ox + 6])


def test_augment_crop_too_large():
    with pytest.raises(ValueError):
        augment(images(), AugmentationSpec(pad=1, crop=8), RngStream(0))


def test_augment_offsets_uniform():
    x = np.zeros((10_000, 1, 4, 4))
    _, off = augment(x, AugmentationSpec(pad=2, crop=4), RngStream(4), return_offsets=True)
    counts = np.bincount(off[:, 0] * 5 + off[:, 1], minlength=25)
    assert counts.sum() == 10_000 and np.all(counts > 0)
    assert chisquare(counts).pvalue > 1e-3


def test_augment_flip_rate():
    x = np.tile(np.arange(4.0), (4000, 1, 4, 1))
    out = augment(x, AugmentationSpec(pad=0), RngStream(5))
    flipped = np.mean(out[:, 0, 0, 0] == 3.0)
    assert abs(flipped - 0.5) < 0.03


# -- effective N ------------------------------------------------------------------------------

def test_cifar_rho():
    assert recipes.CIFAR_AUGMENTATION.rho(32) == 10 == recipes.CIFAR_RHO
    assert effective_n(50_000, recipes.CIFAR_RHO) == 500_000


def test_imagenet_rho():
    assert recipes.IMAGENET_RHO == 5


def test_no_augmentation_rho():
    assert AugmentationSpec(pad=0, crop=None, hflip=False).rho(32) == 1
    assert effective_n(1234, 1) == 1234


@given(st.integers(1, 10**6), st.floats(1, 20), st.floats(1, 20))
def test_effective_n_linear_and_monotone(n, r1, r2):
    assert effective_n(2 * n, r1) == 2 * effective_n(n, r1)
    if r1 <= r2:
        assert effective_n(n, r1) <= effective_n(n, r2)


def test_effective_n_rejects_rho_below_one():
    with pytest.raises(ValueError):
        effective_n(10, 0.5)


def test_minibatches_cover_epoch():
    seen = np.concatenate(list(minibatches(23, 5, RngStream(6))))
    assert sorted(seen.tolist()) == list(range(23))
