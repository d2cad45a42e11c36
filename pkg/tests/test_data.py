import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from cellsearch.data import (Dataset, DatasetSpec, cutout, decode_binary_dataset, encode_binary_dataset,
                             generate_synthetic, load_binary_dataset, search_split, write_binary_dataset)
from cellsearch.exceptions import ConfigError, FormatError


def _small():
    return generate_synthetic(DatasetSpec(train_count=40, test_count=8, image_size=8)).train


def test_generation_is_deterministic():
    a = generate_synthetic(DatasetSpec(train_count=64, test_count=16))
    b = generate_synthetic(DatasetSpec(train_count=64, test_count=16))
    assert a.train.images.tobytes() == b.train.images.tobytes()
    assert a.test.labels.tobytes() == b.test.labels.tobytes()
    c = generate_synthetic(DatasetSpec(train_count=64, test_count=16, seed=1))
    assert a.train.images.tobytes() != c.train.images.tobytes()


def test_shapes_classes_are_exactly_balanced():
    splits = generate_synthetic(DatasetSpec(generator="shapes", classes=4, image_size=16, train_count=2048,
                                            test_count=0))
    np.testing.assert_array_equal(splits.train.class_counts(), [512] * 4)
    assert splits.train.image_shape == (3, 16, 16)


def test_shortcut_is_linearly_separable():
    splits = generate_synthetic(DatasetSpec(generator="shortcut", train_count=512, test_count=256))
    flat = lambda d: d.floats().reshape(len(d), -1)
    probe = LogisticRegression(max_iter=2000).fit(flat(splits.train), splits.train.labels)
    assert probe.score(flat(splits.test), splits.test.labels) >= 0.9


def test_pdts_round_trip_is_byte_identical(tmp_path):
    data = _small()
    write_binary_dataset(tmp_path / "a.pdts", data)
    back = load_binary_dataset(tmp_path / "a.pdts")
    write_binary_dataset(tmp_path / "b.pdts", back)
    assert (tmp_path / "a.pdts").read_bytes() == (tmp_path / "b.pdts").read_bytes()
    np.testing.assert_array_equal(back.images, data.images)
    np.testing.assert_array_equal(back.labels, data.labels)


def test_pdts_empty_dataset_round_trips():
    empty = Dataset(np.zeros((0, 3, 8, 8), dtype=np.uint8), np.zeros(0), 4)
    buf = encode_binary_dataset(empty)
    back = decode_binary_dataset(buf)
    assert len(back) == 0 and back.image_shape == (3, 8, 8)
    assert encode_binary_dataset(back) == buf


def test_pdts_errors_name_offsets():
    buf = encode_binary_dataset(_small())
    with pytest.raises(FormatError, match="offset 0"):
        decode_binary_dataset(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="truncated"):
        decode_binary_dataset(buf[:-5])
    with pytest.raises(FormatError, match="offset 0"):
        decode_binary_dataset(buf[:10])
    with pytest.raises(FormatError, match="trailing"):
        decode_binary_dataset(buf + b"\0")
    bad = bytearray(buf)
    bad[26 + 3] = 9
    with pytest.raises(FormatError, match=r"labels\[3\] \(offset 29\)"):
        decode_binary_dataset(bytes(bad))


def test_search_split_partitions_with_balance():
    labels = generate_synthetic(DatasetSpec(train_count=101, test_count=0, classes=3)).train.labels
    a, b = search_split(labels, seed=0)
    assert len(np.intersect1d(a, b)) == 0
    np.testing.assert_array_equal(np.sort(np.concatenate([a, b])), np.arange(101))
    for k in range(3):
        assert abs(int((labels[a] == k).sum()) - int((labels[b] == k).sum())) <= 1
    a2, _ = search_split(labels, seed=0)
    np.testing.assert_array_equal(a, a2)


def test_cutout_preserves_mean_in_expectation():
    rng = np.random.default_rng(0)
    images = rng.random((10_000, 1, 8, 8))
    fill = images.mean()
    out = cutout(images, 4, np.random.default_rng(1), fill=fill)
    assert abs(out.mean() - images.mean()) < 1e-2
    assert (out != images).any()
    np.testing.assert_array_equal(cutout(images[:3], 0, rng), images[:3])


def test_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(generator="mnist")
    with pytest.raises(ConfigError):
        DatasetSpec(classes=1)
    with pytest.raises(ConfigError):
        DatasetSpec(source="file")
