"""
Persistence helpers: the tensor-blob codec shared by checkpoints and generated
inputs, JSON documents, and content hashes of input files.

Blob layout (all integers little-endian):

    8 bytes   magic b"MCNET1\\0\\0"
    4 bytes   unsigned header length n
    n bytes   UTF-8 JSON header; header["tensors"] lists {"name", "shape"} in order
    ...       each tensor as raw IEEE-754 values, row-major, in header order; float32
              unless header["dtype"] is "float64"
"""
import hashlib
import json
import logging
import os
import struct
from typing import Any, Callable, Dict, List, Sequence, Tuple, TypeVar

import json5
import numpy as np

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

BLOB_MAGIC: bytes = b"MCNET1\x00\x00"
_HEADER_LEN = struct.Struct("<I")
_DTYPES: Dict[str, str] = {"float32": "<f4", "float64": "<f8"}

T = TypeVar("T")


def save_blob(filepath: str, header: Dict[str, Any], tensors: Sequence[Tuple[str, np.ndarray]],
              dtype: str = "float32") -> None:
    """
    Writes named tensors and a JSON header to a blob file.

    Args:
        filepath: Destination path; parent directories are created.
        header: JSON-serialisable metadata. A "tensors" entry is added.
        tensors: (name, array) pairs written in order.
        dtype: "float32" (the default, used by checkpoints) or "float64" for
            values that must reload bit-exactly.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported blob dtype '{dtype}'")
    full_header: Dict[str, Any] = dict(header)
    if dtype != "float32":
        full_header["dtype"] = dtype
    full_header["tensors"] = [{"name": name, "shape": [int(s) for s in np.shape(arr)]}
                              for name, arr in tensors]
    header_bytes: bytes = json.dumps(full_header, sort_keys=True, ensure_ascii=False).encode("utf-8")

    _ensure_parent(filepath)
    with open(filepath, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(_HEADER_LEN.pack(len(header_bytes)))
        f.write(header_bytes)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    logger.debug(f"Wrote {len(tensors)} tensor(s) to {filepath}")


def load_blob(filepath: str) -> Tuple[Dict[str, Any], List[Tuple[str, np.ndarray]]]:
    """
    Reads a blob written by `save_blob`.

    Returns:
        The header and the (name, float64 array) pairs. Values are the stored
        values, widened exactly when stored as float32.

    Raises:
        ValueError: If the magic bytes are wrong, the dtype is unknown or the
            file is truncated.
    """
    with open(filepath, "rb") as f:
        raw: bytes = f.read()
    if raw[:len(BLOB_MAGIC)] != BLOB_MAGIC:
        raise ValueError(f"{filepath} is not a tensor blob (bad magic)")
    offset: int = len(BLOB_MAGIC)
    if len(raw) < offset + _HEADER_LEN.size:
        raise ValueError(f"{filepath} is truncated before the header length")
    (header_len,) = _HEADER_LEN.unpack_from(raw, offset)
    offset += _HEADER_LEN.size
    header: Dict[str, Any] = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    if not isinstance(header, dict):
        raise ValueError(f"{filepath} has a malformed header")
    offset += header_len
    stored = _DTYPES.get(header.get("dtype", "float32"))
    if stored is None:
        raise ValueError(f"{filepath} has unsupported dtype '{header.get('dtype')}'")
    width: int = np.dtype(stored).itemsize

    tensors: List[Tuple[str, np.ndarray]] = []
    for entry in header.get("tensors", []):
        shape: Tuple[int, ...] = tuple(entry["shape"])
        count: int = int(np.prod(shape, dtype=np.int64))
        nbytes: int = width * count
        if offset + nbytes > len(raw):
            raise ValueError(f"{filepath} is truncated inside tensor '{entry['name']}'")
        values = np.frombuffer(raw, dtype=stored, count=count, offset=offset)
        tensors.append((entry["name"], values.astype(np.float64).reshape(shape)))
        offset += nbytes
    return header, tensors


def write_json(filepath: str, document: Any) -> None:
    """Writes a JSON document with stable key order."""
    _ensure_parent(filepath)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def read_json(filepath: str) -> Any:
    """Reads a (lenient) JSON document; comments and trailing commas are accepted."""
    with open(filepath, "r", encoding="utf-8") as f:
        return json5.load(f)


def read_json_object(filepath: str) -> Dict[str, Any]:
    """
    Reads a lenient JSON document whose top level must be an object.

    Raises:
        ConfigError: If the text does not parse or the top level is not an object.
    """
    try:
        document = read_json(filepath)
    except ValueError as e:
        raise ConfigError(f"{filepath} is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"{filepath} must contain a JSON object")
    return document


def require_field(document: Dict[str, Any], key: str, cast: Callable[[Any], T], source: str) -> T:
    """
    Fetches document[key] converted by `cast`.

    Raises:
        ConfigError: Naming `key`, if it is missing or `cast` rejects it.
    """
    if key not in document:
        raise ConfigError(f"{source} is missing '{key}'", field=key)
    try:
        return cast(document[key])
    except (TypeError, ValueError, KeyError, AttributeError) as e:
        raise ConfigError(f"{source} has an invalid '{key}': {e}", field=key) from e


def content_hash(filepath: str) -> str:
    """Git-style blob hash: SHA-1 over b"blob <size>\\0" followed by the file bytes."""
    with open(filepath, "rb") as f:
        data: bytes = f.read()
    digest = hashlib.sha1()
    digest.update(f"blob {len(data)}\0".encode("ascii"))
    digest.update(data)
    return digest.hexdigest()


def _ensure_parent(filepath: str) -> None:
    parent: str = os.path.dirname(os.path.abspath(filepath))
    os.makedirs(parent, exist_ok=True)
