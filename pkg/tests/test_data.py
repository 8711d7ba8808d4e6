import struct

import numpy as np
import pytest
from scipy.stats import norm

from mrkd.data import (
    AugmentPolicy,
    DataFormatError,
    _simplex_means,
    augment_batch,
    channel_standardize,
    gen_gaussian_mixture,
    load_cifar_bin,
    load_cifar_dir,
    load_dataset,
    load_idx,
    pad_crop,
    save_dataset,
)


def write_idx(path, magic, dims, payload: bytes):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload)


# --- gaussian mixture --------------------------------------------------------

def test_mixture_deterministic():
    a = gen_gaussian_mixture(4, 6, 50, 20, 3.0, seed=5)
    b = gen_gaussian_mixture(4, 6, 50, 20, 3.0, seed=5)
    c = gen_gaussian_mixture(4, 6, 50, 20, 3.0, seed=6)
    assert a.x_train.tobytes() == b.x_train.tobytes() and a.y_test.tobytes() == b.y_test.tobytes()
    assert a.x_train.tobytes() != c.x_train.tobytes()


def test_mixture_stratified_labels():
    d = gen_gaussian_mixture(10, 32, 5000, 1000, 4.0, seed=0)
    for y, n in ((d.y_train, 5000), (d.y_test, 1000)):
        counts = np.bincount(y, minlength=10)
        assert counts.max() - counts.min() <= 1 and counts.sum() == n


@pytest.mark.parametrize("m,dims", [(2, 2), (3, 2), (10, 32), (33, 32)])
def test_means_are_equidistant(m, dims):
    means = _simplex_means(m, dims, 7.5, np.random.default_rng(0))
    dist = np.linalg.norm(means[:, None] - means[None], axis=-1)
    off = dist[~np.eye(m, dtype=bool)]
    np.testing.assert_allclose(off, 7.5, rtol=1e-12)


def test_mixture_infeasible_geometry():
    with pytest.raises(ValueError):
        gen_gaussian_mixture(10, 5, 10, 10, 2.0, seed=0)
    with pytest.raises(ValueError):
        gen_gaussian_mixture(1, 5, 10, 10, 2.0, seed=0)
    with pytest.raises(ValueError):
        gen_gaussian_mixture(3, 5, 10, 10, 0.0, seed=0)


def test_well_separated_pair_is_nearly_bayes_perfect():
    # two unit Gaussians 10 apart: Bayes error is Phi(-5)
    bayes = norm.cdf(-5.0)
    assert bayes == pytest.approx(2.87e-7, rel=1e-2)
    d = gen_gaussian_mixture(2, 8, 500, 1000, 10.0, seed=1)
    means = np.stack([d.x_train[d.y_train == k].mean(axis=0) for k in range(2)])
    pred = np.linalg.norm(d.x_test[:, None] - means[None], axis=-1).argmin(axis=1)
    assert np.mean(pred != d.y_test) == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_train_and_test_share_distribution(seed):
    d = gen_gaussian_mixture(10, 32, 5000, 1000, 4.0, seed=seed)
    sigma = np.concatenate([d.x_train, d.x_test]).std(axis=0)
    bound = 5 * sigma * np.sqrt(1 / 5000 + 1 / 1000)
    assert np.all(np.abs(d.x_train.mean(axis=0) - d.x_test.mean(axis=0)) < bound)


def test_container_round_trip(tmp_path):
    d = gen_gaussian_mixture(3, 4, 11, 7, 2.0, seed=0)
    path = tmp_path / "ds.bin"
    save_dataset(d, path)
    assert path.read_bytes()[:7] == b"MRKD-DS"
    e = load_dataset(path)
    assert e.num_classes == 3
    for name in ("x_train", "y_train", "x_test", "y_test"):
        assert np.array_equal(getattr(d, name), getattr(e, name))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(DataFormatError):
        load_dataset(path)


# --- IDX -----------------------------------------------------------------------

def test_idx_fixture(tmp_path):
    pixels = bytes(range(18))
    write_idx(tmp_path / "img", 0x803, (2, 3, 3), pixels)
    write_idx(tmp_path / "lab", 0x801, (2,), bytes([7, 2]))
    x, y = load_idx(tmp_path / "img", tmp_path / "lab")
    assert x.shape == (2, 9)
    np.testing.assert_array_equal(x.ravel() * 255, np.arange(18))
    np.testing.assert_array_equal(y, [7, 2])


def test_idx_wrong_magic(tmp_path):
    write_idx(tmp_path / "lab", 0x801, (2,), bytes([1, 2]))
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "lab", tmp_path / "lab")


def test_idx_empty(tmp_path):
    write_idx(tmp_path / "img", 0x803, (0, 28, 28), b"")
    write_idx(tmp_path / "lab", 0x801, (0,), b"")
    x, y = load_idx(tmp_path / "img", tmp_path / "lab")
    assert x.shape == (0, 784) and y.shape == (0,)


def test_idx_truncated_and_mismatched(tmp_path):
    write_idx(tmp_path / "img", 0x803, (2, 3, 3), bytes(17))
    write_idx(tmp_path / "lab", 0x801, (2,), bytes(2))
    with pytest.raises(DataFormatError, match="expected"):
        load_idx(tmp_path / "img", tmp_path / "lab")
    write_idx(tmp_path / "img", 0x803, (2, 3, 3), bytes(18))
    write_idx(tmp_path / "lab", 0x801, (3,), bytes(3))
    with pytest.raises(DataFormatError, match="labels"):
        load_idx(tmp_path / "img", tmp_path / "lab")


# --- CIFAR ---------------------------------------------------------------------

def cifar_records(labels, fill):
    out = b""
    for lab, f in zip(labels, fill):
        out += bytes(lab) + bytes([f]) * 3071 + bytes([255 - f])
    return out


def test_cifar10_fixture(tmp_path):
    (tmp_path / "b").write_bytes(cifar_records([[3], [9]], [10, 20]))
    x, y = load_cifar_bin([tmp_path / "b"], 10)
    np.testing.assert_array_equal(y, [3, 9])
    assert x.shape == (2, 3072)
    assert x[0, 0] * 255 == pytest.approx(10) and x[0, -1] * 255 == pytest.approx(245)
    assert x[1, 0] * 255 == pytest.approx(20) and x[1, -1] * 255 == pytest.approx(235)


def test_cifar100_uses_fine_label(tmp_path):
    (tmp_path / "b").write_bytes(cifar_records([[4, 77], [19, 2]], [0, 1]))
    _, y = load_cifar_bin([tmp_path / "b"], 100)
    np.testing.assert_array_equal(y, [77, 2])


def test_cifar_bad_record_size(tmp_path):
    (tmp_path / "b").write_bytes(bytes(3074))
    with pytest.raises(DataFormatError):
        load_cifar_bin([tmp_path / "b"], 10)


def test_cifar_dir_concatenates_five_batches(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(1, 6):
        labels = [[int(v)] for v in rng.integers(0, 10, 3)]
        (tmp_path / f"data_batch_{i}.bin").write_bytes(cifar_records(labels, rng.integers(0, 255, 3)))
    (tmp_path / "test_batch.bin").write_bytes(cifar_records([[1], [2]], [5, 6]))
    d = load_cifar_dir(tmp_path, 10)
    # real batches hold 10 000 records each, so five give the 50 000-image split
    assert d.x_train.shape == (5 * 3, 3072) and d.x_test.shape == (2, 3072)
    assert d.augment == AugmentPolicy.standard() and d.image_shape == (3, 32, 32)
    per_channel = d.x_train.reshape(15, 3, -1)
    np.testing.assert_allclose(per_channel.mean(axis=(0, 2)), 0, atol=1e-12)


def test_channel_standardize_uses_train_statistics():
    rng = np.random.default_rng(0)
    tr = rng.uniform(size=(20, 2 * 4))
    te = rng.uniform(size=(5, 2 * 4))
    a, b = channel_standardize(tr, te, (2, 2, 2))
    np.testing.assert_allclose(a.reshape(20, 2, -1).std(axis=(0, 2)), 1, rtol=1e-12)
    mean = tr.reshape(20, 2, -1).mean(axis=(0, 2))
    std = tr.reshape(20, 2, -1).std(axis=(0, 2))
    np.testing.assert_allclose(b.reshape(5, 2, -1), (te.reshape(5, 2, -1) - mean[:, None]) / std[:, None])


# --- augmentation -------------------------------------------------------------------

class ForcedRng:
    def __init__(self, flip: bool, offset=(4, 4)):
        self.flip, self.offset = flip, offset

    def random(self, n):
        return np.full(n, 0.0 if self.flip else 1.0)

    def integers(self, lo, hi, size):
        return np.tile(self.offset, (size[0], 1))


SHAPE = (3, 5, 6)


def images(n=4):
    return np.arange(n * np.prod(SHAPE), dtype=float).reshape(n, -1)


def test_augment_off_is_identity():
    x = images()
    np.testing.assert_array_equal(augment_batch(x, AugmentPolicy(), SHAPE, np.random.default_rng(0)), x)


def test_forced_flip_reverses_columns():
    x = images()
    out = augment_batch(x, AugmentPolicy(horizontal_flip=True), SHAPE, ForcedRng(True))
    src = x.reshape((-1,) + SHAPE)
    expected = np.empty_like(src)
    for w in range(SHAPE[2]):
        expected[..., w] = src[..., SHAPE[2] - 1 - w]
    np.testing.assert_array_equal(out.reshape(expected.shape), expected)


def test_centre_crop_is_identity():
    x = images()
    out = augment_batch(x, AugmentPolicy(pad_crop=True), SHAPE, ForcedRng(False, (4, 4)))
    np.testing.assert_array_equal(out, x)


def test_corner_crop_shifts_in_zeros():
    img = np.ones((1, 1, 3, 3))
    out = pad_crop(img, np.array([[0, 0]]), 1)
    np.testing.assert_array_equal(out[0, 0], [[0, 0, 0], [0, 1, 1], [0, 1, 1]])


def test_augment_preserves_shape_and_is_seeded():
    x = images(8)
    pol = AugmentPolicy.standard()
    a = augment_batch(x, pol, SHAPE, np.random.default_rng(3))
    b = augment_batch(x, pol, SHAPE, np.random.default_rng(3))
    assert a.shape == x.shape and np.array_equal(a, b)


def test_augment_shape_mismatch():
    with pytest.raises(ValueError):
        augment_batch(np.zeros((2, 10)), AugmentPolicy.standard(), SHAPE, np.random.default_rng(0))
