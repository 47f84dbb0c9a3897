import numpy as np
import pytest

from src.common.errors import ConfigError, DimensionError, IngestionError
from src.config import DatasetSpec
from src.data.dataset import Dataset, Normalizer, iterate_batches, num_batches, split, stratified_subset
from src.data.loader import load_dataset
from src.data.records import CIFAR10_LAYOUT, RecordLayout, load_binary_records, write_binary_records
from src.data.synthetic import class_templates, nearest_template_accuracy, synth_dataset
from src.data.transforms import cutout, random_crop_flip, scaled_length

SMALL = RecordLayout(channels=3, height=4, width=4, classes=10)


def _quantized_images(rng, n, layout=SMALL):
    raw = rng.integers(0, 256, size=(n, layout.channels, layout.height, layout.width))
    return raw.astype(np.float32) / np.float32(255.0)


class TestBinaryRecords:
    def test_cifar_record_size(self):
        assert CIFAR10_LAYOUT.record_size == 3073

    def test_written_records_load_back(self, tmp_path, rng):
        images = _quantized_images(rng, 5)
        labels = np.array([0, 9, 3, 3, 1])
        path = tmp_path / "batch.bin"
        write_binary_records(path, images, labels, SMALL)
        assert path.stat().st_size == 5 * SMALL.record_size

        data = load_binary_records(path, SMALL)
        np.testing.assert_array_equal(data.labels, labels)
        np.testing.assert_allclose(data.images, images, atol=1e-6)
        assert data.images.dtype == np.float32
        assert data.normalizer is not None

    def test_pixels_are_channel_planar(self, tmp_path):
        record = np.zeros(SMALL.record_size, dtype=np.uint8)
        record[0] = 2
        record[1 + 16 : 1 + 32] = 255
        path = tmp_path / "one.bin"
        path.write_bytes(record.tobytes())
        data = load_binary_records(path, SMALL)
        assert data.labels.tolist() == [2]
        np.testing.assert_array_equal(data.images[0, 0], 0.0)
        np.testing.assert_array_equal(data.images[0, 1], 1.0)
        np.testing.assert_array_equal(data.images[0, 2], 0.0)

    def test_trailing_partial_record(self, tmp_path, rng):
        path = tmp_path / "short.bin"
        write_binary_records(path, _quantized_images(rng, 2), np.array([1, 2]), SMALL)
        path.write_bytes(path.read_bytes() + b"\x00" * 7)
        with pytest.raises(IngestionError) as info:
            load_binary_records(path, SMALL)
        assert info.value.offset == 2 * SMALL.record_size

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(IngestionError, match="no records"):
            load_binary_records(path, SMALL)
        spec = DatasetSpec(
            source="binary_records", path=str(path), test_path=str(path), classes=10, image_size=4
        )
        with pytest.raises(IngestionError):
            load_dataset(spec)

    def test_label_out_of_range(self, tmp_path, rng):
        path = tmp_path / "bad.bin"
        write_binary_records(path, _quantized_images(rng, 3), np.array([1, 2, 3]), SMALL)
        raw = bytearray(path.read_bytes())
        raw[SMALL.record_size] = 12
        path.write_bytes(bytes(raw))
        with pytest.raises(IngestionError) as info:
            load_binary_records(path, SMALL)
        assert info.value.offset == SMALL.record_size

    def test_two_label_bytes_use_the_last(self, tmp_path):
        layout = RecordLayout(channels=1, height=2, width=2, classes=100, label_bytes=2)
        record = np.array([3, 57, 0, 0, 0, 0], dtype=np.uint8)
        path = tmp_path / "fine.bin"
        path.write_bytes(record.tobytes())
        assert load_binary_records(path, layout).labels.tolist() == [57]

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError):
            load_binary_records(tmp_path / "absent.bin", SMALL)

    def test_write_rejects_mismatched_layout(self, tmp_path):
        with pytest.raises(DimensionError):
            write_binary_records(tmp_path / "x.bin", np.zeros((1, 3, 8, 8)), np.array([0]), SMALL)


class TestSynthetic:
    def test_seeded(self):
        a = synth_dataset(3, 30, size=8, noise=0.2, seed=4)
        b = synth_dataset(3, 30, size=8, noise=0.2, seed=4)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_balanced_labels(self):
        data = synth_dataset(4, 40, size=8, noise=0.1, seed=0)
        assert data.class_counts().tolist() == [10, 10, 10, 10]
        assert data.image_shape == (3, 8, 8)
        assert data.images.min() >= 0.0 and data.images.max() <= 1.0

    def test_noise_free_samples_match_their_template(self):
        data = synth_dataset(5, 50, size=16, noise=0.0, seed=2)
        templates = class_templates(5, 16, 3, seed=2)
        assert nearest_template_accuracy(data, templates) == 1.0

    def test_shared_templates_across_splits(self):
        train = synth_dataset(3, 9, size=8, noise=0.0, seed=0, template_seed=0)
        test = synth_dataset(3, 9, size=8, noise=0.0, seed=1, template_seed=0)
        for c in range(3):
            first_train = train.images[train.labels == c][0]
            np.testing.assert_array_equal(first_train, test.images[test.labels == c][0])

    def test_templates_are_distinct(self):
        t = class_templates(6, 8, 3, seed=0)
        flat = t.reshape(6, -1)
        for i in range(6):
            for j in range(i + 1, 6):
                assert not np.array_equal(flat[i], flat[j])

    @pytest.mark.parametrize("kwargs", [{"classes": 1}, {"noise": -0.1}, {"classes": 500}])
    def test_invalid_arguments(self, kwargs):
        args = {"classes": 2, "n": 4, "size": 8, "noise": 0.1, "seed": 0, **kwargs}
        with pytest.raises(ConfigError):
            synth_dataset(**args)


class TestDataset:
    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            Dataset(np.zeros((2, 3, 4)), np.zeros(2, dtype=np.int64), 2)
        with pytest.raises(DimensionError):
            Dataset(np.zeros((2, 3, 4, 4)), np.zeros(3, dtype=np.int64), 2)
        with pytest.raises(IngestionError):
            Dataset(np.zeros((2, 3, 4, 4)), np.array([0, 2]), 2)

    def test_split_partitions_the_samples(self, tiny_data):
        train, _ = tiny_data
        a, b = split(train, 0.75, [0, 1])
        assert (len(a), len(b)) == (24, 8)
        a2, _ = split(train, 0.75, [0, 1])
        np.testing.assert_array_equal(a.images, a2.images)
        with pytest.raises(ConfigError):
            split(train, 1.0, 0)

    def test_stratified_subset_keeps_class_balance(self, tiny_data):
        train, _ = tiny_data
        subset = stratified_subset(train, 0.25, 3)
        assert subset.class_counts().tolist() == [4, 4]
        assert stratified_subset(train, 1.0, 3) is train
        with pytest.raises(ConfigError):
            stratified_subset(train, 0.0, 3)

    def test_stratified_subset_keeps_at_least_one_per_class(self, tiny_data):
        train, _ = tiny_data
        assert stratified_subset(train, 0.01, 0).class_counts().tolist() == [1, 1]

    def test_batches_cover_the_dataset(self, tiny_data, rng):
        train, _ = tiny_data
        batches = list(iterate_batches(train, 10, rng))
        assert [len(labels) for _, labels in batches] == [10, 10, 10, 2]
        assert num_batches(train, 10) == 4
        seen = np.concatenate([labels for _, labels in iterate_batches(train, 5)])
        np.testing.assert_array_equal(seen, train.labels)
        with pytest.raises(ConfigError):
            list(iterate_batches(train, 1))

    def test_single_sample_tail_is_dropped(self, tiny_data):
        train, _ = tiny_data
        assert [len(labels) for _, labels in iterate_batches(train, 31)] == [31]
        assert num_batches(train, 31) == 1

    def test_normalizer(self, rng):
        images = rng.random((6, 3, 4, 4)).astype(np.float32)
        normalizer = Normalizer.from_images(images)
        out = normalizer(images)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1.0, atol=1e-4)
        with pytest.raises(ConfigError):
            Normalizer(np.zeros(3), np.array([1.0, 0.0, 1.0]))

    def test_constant_channel_gets_unit_std(self):
        images = np.full((2, 1, 2, 2), 0.5, dtype=np.float32)
        assert Normalizer.from_images(images).std.tolist() == [1.0]


def test_load_dataset_shares_the_training_normalizer():
    spec = DatasetSpec(classes=3, train_samples=12, test_samples=6, image_size=8)
    train, test = load_dataset(spec)
    assert train.normalizer is test.normalizer
    np.testing.assert_allclose(train.normalizer.mean, train.images.mean(axis=(0, 2, 3)), rtol=1e-5)


def test_load_dataset_uses_configured_statistics():
    stats = {"mean": (0.5, 0.5, 0.5), "std": (0.25, 0.25, 0.25)}
    spec = DatasetSpec(train_samples=4, test_samples=4, image_size=8, **stats)
    train, _ = load_dataset(spec)
    np.testing.assert_array_equal(train.normalizer.mean, [0.5, 0.5, 0.5])


def test_load_dataset_reads_binary_records(tmp_path, rng):
    layout = RecordLayout(channels=3, height=4, width=4, classes=10)
    write_binary_records(tmp_path / "train.bin", _quantized_images(rng, 6), np.arange(6), layout)
    write_binary_records(tmp_path / "test.bin", _quantized_images(rng, 3), np.arange(3), layout)
    spec = DatasetSpec(
        source="binary_records",
        path=str(tmp_path / "train.bin"),
        test_path=str(tmp_path / "test.bin"),
        classes=10,
        image_size=4,
    )
    train, test = load_dataset(spec)
    assert (len(train), len(test)) == (6, 3)
    assert train.normalizer is test.normalizer


class TestTransforms:
    def test_scaled_length(self):
        assert scaled_length(16, 32) == 16
        assert scaled_length(16, 8) == 4
        assert scaled_length(4, 16) == 2

    def test_crop_without_padding_only_flips(self, rng):
        images = rng.random((8, 3, 5, 5)).astype(np.float32)
        out = random_crop_flip(images, 0, rng)
        for i in range(8):
            assert np.array_equal(out[i], images[i]) or np.array_equal(out[i], images[i, :, :, ::-1])

    def test_crop_keeps_shape(self, rng):
        images = rng.random((4, 3, 8, 8)).astype(np.float32)
        out = random_crop_flip(images, 2, rng)
        assert out.shape == images.shape
        assert out.dtype == images.dtype

    def test_cutout_zeroes_a_square(self, rng):
        images = np.ones((4, 3, 8, 8), dtype=np.float32)
        out = cutout(images, 4, rng)
        zeroed = (out == 0).all(axis=1).sum(axis=(1, 2))
        assert (zeroed > 0).all() and (zeroed <= 16).all()
        assert images.min() == 1.0
        assert cutout(images, 0, rng) is images
