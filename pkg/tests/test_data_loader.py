"""
Unit tests for the IDX readers and the synthetic dataset in the
modeconn.data_loader module.
"""
import gzip
import os
import shutil
import struct
import tempfile
import unittest

import numpy as np

from src.modeconn import config
from src.modeconn import data_loader
from src.modeconn.exceptions import IdxFormatError
from src.modeconn.netcore import LabeledDataset


class TestIdx(unittest.TestCase):
    """Test cases for `ingest_idx` and `write_idx`."""

    def setUp(self) -> None:
        self.tmp = tempfile.mkdtemp()
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, (5, 1, 3, 4))
        self.dataset = LabeledDataset(pixels / 255.0, np.array([3, 1, 4, 1, 5]))
        self.images = os.path.join(self.tmp, "images.idx")
        self.labels = os.path.join(self.tmp, "labels.idx")
        data_loader.write_idx(self.dataset, self.images, self.labels)

    def tearDown(self) -> None:
        shutil.rmtree(self.tmp)

    def _gzip(self, path: str) -> str:
        with open(path, "rb") as src, gzip.open(path + ".gz", "wb") as dst:
            dst.write(src.read())
        return path + ".gz"

    def test_reads_back_what_was_written(self) -> None:
        loaded = data_loader.ingest_idx(self.images, self.labels)
        self.assertEqual(loaded.inputs.shape, (5, 1, 3, 4))
        np.testing.assert_array_equal(loaded.labels, self.dataset.labels)
        np.testing.assert_array_equal(loaded.inputs, self.dataset.inputs)
        self.assertTrue(loaded.inputs.min() >= 0.0 and loaded.inputs.max() <= 1.0)

    def test_header_layout(self) -> None:
        with open(self.images, "rb") as f:
            header = struct.unpack(">IIII", f.read(16))
        self.assertEqual(header, (config.IDX_IMAGE_MAGIC, 5, 3, 4))
        self.assertEqual(os.path.getsize(self.labels), 8 + 5)

    def test_gzipped_files(self) -> None:
        loaded = data_loader.ingest_idx(self._gzip(self.images), self._gzip(self.labels))
        np.testing.assert_array_equal(loaded.inputs, self.dataset.inputs)

    def test_bad_magic(self) -> None:
        # label file given as the image file
        with self.assertRaises(IdxFormatError) as ctx:
            data_loader.ingest_idx(self.labels, self.labels)
        self.assertEqual(ctx.exception.offset, 0)

    def test_truncated_payload(self) -> None:
        with open(self.images, "rb") as f:
            raw = f.read()
        with open(self.images, "wb") as f:
            f.write(raw[:-3])
        with self.assertRaises(IdxFormatError) as ctx:
            data_loader.ingest_idx(self.images, self.labels)
        self.assertEqual(ctx.exception.offset, len(raw) - 3)

    def test_truncated_header(self) -> None:
        with open(self.labels, "wb") as f:
            f.write(struct.pack(">I", config.IDX_LABEL_MAGIC))
        with self.assertRaises(IdxFormatError):
            data_loader.ingest_idx(self.images, self.labels)

    def test_count_mismatch(self) -> None:
        short = LabeledDataset(self.dataset.inputs[:4], self.dataset.labels[:4])
        other_images = os.path.join(self.tmp, "other_images.idx")
        other_labels = os.path.join(self.tmp, "other_labels.idx")
        data_loader.write_idx(short, other_images, other_labels)
        with self.assertRaises(IdxFormatError) as ctx:
            data_loader.ingest_idx(self.images, other_labels)
        self.assertEqual(ctx.exception.offset, 4)

    def test_missing_file(self) -> None:
        with self.assertRaises(FileNotFoundError):
            data_loader.ingest_idx(os.path.join(self.tmp, "absent.idx"), self.labels)


class TestSynthDataset(unittest.TestCase):

    def test_shape_and_balance(self) -> None:
        data = data_loader.synth_dataset(4, 6, 0.3, seed=0, image_size=12)
        self.assertEqual(data.inputs.shape, (24, 1, 12, 12))
        np.testing.assert_array_equal(np.bincount(data.labels), [6, 6, 6, 6])
        self.assertTrue(data.inputs.min() >= 0.0 and data.inputs.max() <= 1.0)

    def test_seeded(self) -> None:
        first = data_loader.synth_dataset(3, 5, 0.3, seed=2, image_size=8)
        second = data_loader.synth_dataset(3, 5, 0.3, seed=2, image_size=8)
        third = data_loader.synth_dataset(3, 5, 0.3, seed=3, image_size=8)
        np.testing.assert_array_equal(first.inputs, second.inputs)
        np.testing.assert_array_equal(first.labels, second.labels)
        self.assertFalse(np.array_equal(first.inputs, third.inputs))

    def test_zero_spread_collapses_each_class(self) -> None:
        data = data_loader.synth_dataset(3, 4, 0.0, seed=1, image_size=8)
        for y in range(3):
            members = data.inputs[data.labels == y]
            np.testing.assert_array_equal(members, np.broadcast_to(members[0], members.shape))
        self.assertFalse(np.array_equal(data.inputs[data.labels == 0][0], data.inputs[data.labels == 1][0]))

    def test_invalid_arguments(self) -> None:
        for args in ((0, 5, 0.3), (3, 0, 0.3), (3, 5, -0.1)):
            with self.assertRaises(ValueError, msg=str(args)):
                data_loader.synth_dataset(*args, seed=0)


if __name__ == '__main__':
    unittest.main()
