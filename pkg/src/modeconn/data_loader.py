"""
Provides classes and functions for loading labeled image datasets: IDX files
(the MNIST binary format, optionally gzipped) and seeded synthetic
Gaussian-bump images for self-contained runs.

Loaded images are float64 arrays of shape (1, rows, cols) scaled to [0, 1].
"""
import gzip
import logging
import math
import struct
from abc import ABC, abstractmethod
from typing import IO, Tuple

import numpy as np

from . import config
from .exceptions import IdxFormatError
from .netcore import LabeledDataset
from .utils import spawn_rng

# Configure a logger for this module
logger = logging.getLogger(__name__)

_PIXEL_SCALE: float = 255.0


class BaseDataLoader(ABC):
    """
    Abstract base class for IDX loaders.

    Provides the shared header parsing. Subclasses implement `load_data`.

    Attributes:
        filepath (str): The path to the IDX file (".gz" files are decompressed).
    """

    def __init__(self, filepath: str):
        self.filepath: str = filepath

    @abstractmethod
    def load_data(self) -> np.ndarray:
        """Parses the file and returns its items as an array."""
        pass

    def _open(self) -> IO[bytes]:
        if self.filepath.endswith(".gz"):
            return gzip.open(self.filepath, "rb")
        return open(self.filepath, "rb")

    def _read_payload(self, expected_magic: int, num_dims: int) -> Tuple[Tuple[int, ...], bytes]:
        """
        Reads the big-endian header and the raw unsigned bytes that follow it.

        Raises:
            IdxFormatError: On a wrong magic number or a truncated file.
        """
        with self._open() as f:
            raw = f.read()
        header_size = 4 * (1 + num_dims)
        if len(raw) < 4:
            raise IdxFormatError(f"{self.filepath}: file too short for a magic number", offset=len(raw))
        (magic,) = struct.unpack(">I", raw[:4])
        if magic != expected_magic:
            raise IdxFormatError(f"{self.filepath}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
        if len(raw) < header_size:
            raise IdxFormatError(f"{self.filepath}: truncated header", offset=len(raw))
        dims = struct.unpack(f">{num_dims}I", raw[4:header_size])
        payload_size = int(np.prod(dims, dtype=np.int64))
        if len(raw) - header_size < payload_size:
            raise IdxFormatError(f"{self.filepath}: expected {payload_size} data bytes, "
                                 f"found {len(raw) - header_size}", offset=len(raw))
        if len(raw) - header_size > payload_size:
            logger.warning(f"{self.filepath}: ignoring {len(raw) - header_size - payload_size} trailing bytes")
        return tuple(int(d) for d in dims), raw[header_size:header_size + payload_size]


class IdxImageLoader(BaseDataLoader):
    """Loads an IDX image file (magic 0x00000803)."""

    def load_data(self) -> np.ndarray:
        """
        Returns:
            Array of shape (count, 1, rows, cols) with pixels scaled to [0, 1].
        """
        (count, rows, cols), payload = self._read_payload(config.IDX_IMAGE_MAGIC, 3)
        pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, 1, rows, cols)
        logger.info(f"Loaded {count} images of {rows}x{cols} from {self.filepath}")
        return pixels.astype(np.float64) / _PIXEL_SCALE


class IdxLabelLoader(BaseDataLoader):
    """Loads an IDX label file (magic 0x00000801)."""

    def load_data(self) -> np.ndarray:
        (count,), payload = self._read_payload(config.IDX_LABEL_MAGIC, 1)
        logger.info(f"Loaded {count} labels from {self.filepath}")
        return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def ingest_idx(path_images: str, path_labels: str) -> LabeledDataset:
    """
    Reads an IDX image/label file pair.

    Raises:
        FileNotFoundError: If a file is missing.
        IdxFormatError: On a bad magic number, a truncated file, or differing
            image and label counts.
    """
    images = IdxImageLoader(path_images).load_data()
    labels = IdxLabelLoader(path_labels).load_data()
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4)
    return LabeledDataset(images, labels)


def write_idx(dataset: LabeledDataset, path_images: str, path_labels: str) -> None:
    """
    Writes a dataset of (1, rows, cols) images as an IDX pair. Pixels are
    rounded back to bytes, so files read by `ingest_idx` are reproduced exactly.
    """
    count = len(dataset)
    _, rows, cols = dataset.input_shape
    pixels = np.clip(np.rint(dataset.inputs * _PIXEL_SCALE), 0, 255).astype(np.uint8)
    with open(path_images, "wb") as f:
        f.write(struct.pack(">IIII", config.IDX_IMAGE_MAGIC, count, rows, cols))
        f.write(pixels.tobytes())
    with open(path_labels, "wb") as f:
        f.write(struct.pack(">II", config.IDX_LABEL_MAGIC, count))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def synth_dataset(num_classes: int, per_class: int, spread: float, seed: int,
                  image_size: int = config.SYNTH_IMAGE_SIZE) -> LabeledDataset:
    """
    Class-conditional Gaussian-bump images.

    Class c places a bump on a circle around the image centre at angle
    2*pi*c/num_classes. Each image jitters the bump position by `spread` times
    the bump width and adds pixel noise of 0.05 * spread; with spread 0 all
    images of a class coincide. The result is shuffled.
    """
    if num_classes < 1 or per_class < 1 or image_size < 2:
        raise ValueError("num_classes, per_class and image_size must be positive")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    grid = np.arange(image_size, dtype=np.float64)
    rr, cc = np.meshgrid(grid, grid, indexing="ij")
    centre = (image_size - 1) / 2.0
    radius = image_size / 4.0
    width = image_size / 8.0

    images = np.empty((num_classes * per_class, 1, image_size, image_size))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    for c in range(num_classes):
        rng = spawn_rng(seed, 1, c)
        angle = 2.0 * math.pi * c / num_classes
        base = np.array([centre + radius * math.sin(angle), centre + radius * math.cos(angle)])
        shifts = spread * width * rng.standard_normal((per_class, 2))
        noise = 0.05 * spread * rng.standard_normal((per_class, image_size, image_size))
        for i in range(per_class):
            r0, c0 = base + shifts[i]
            bump = np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2.0 * width ** 2))
            images[c * per_class + i, 0] = np.clip(bump + noise[i], 0.0, 1.0)
    order = spawn_rng(seed, 2).permutation(labels.size)
    logger.info(f"Generated {labels.size} synthetic images ({num_classes} classes, spread {spread})")
    return LabeledDataset(images[order], labels[order])
