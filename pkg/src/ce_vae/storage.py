"""Binary persistence for channel datasets (CEDF) and model checkpoints (CEVM).

Both formats are little-endian. Dataset layout::

    magic "CEDF" | version u32 | kind u8 | n_v u32 | n_h u32 | count u64 | normalized u8
    | noisy only: count x f64 noise variances | count*N x (f64 re, f64 im)

Checkpoint layout::

    magic "CEVM" | version u32 | header length u32 | UTF-8 JSON header | tensor count u32
    | per tensor: name length u16, name, ndim u8, ndim x u32 dims, f64 data
"""

import json
import logging
import math
import os
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional, Tuple

import numpy as np

from ce_vae.channels import ChannelDataset, DatasetKind
from ce_vae.exceptions import (
    BadMagicError,
    FileFormatError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from ce_vae.models import UraGeometry


logger = logging.getLogger(__name__)

DATASET_MAGIC = b"CEDF"
CHECKPOINT_MAGIC = b"CEVM"
FORMAT_VERSION = 1

_DATASET_HEADER = struct.Struct("<4sIBIIQB")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")


def _read_exact(f: BinaryIO, size: int, what: str) -> bytes:
    # sizes come from untrusted headers; never allocate past the end of the file
    remaining = os.fstat(f.fileno()).st_size - f.tell()
    if size > remaining:
        raise TruncatedPayloadError(
            f"truncated payload: expected {size} bytes of {what}, only {remaining} remain"
        )
    data = f.read(size)
    if len(data) != size:
        raise TruncatedPayloadError(
            f"truncated payload: expected {size} bytes of {what}, found {len(data)}"
        )
    return data


def _check_magic_and_version(magic: bytes, version: int, expected: bytes, path: Path) -> None:
    if magic != expected:
        raise BadMagicError(f"bad magic in {path}: expected {expected!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path} uses format version {version}; only version {FORMAT_VERSION} is supported"
        )


def save_dataset(ds: ChannelDataset, path: Path) -> None:
    """Write ``ds`` to ``path`` in CEDF format.

    Args:
        ds: Dataset to persist
        path: Destination file (parent directories are created)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _DATASET_HEADER.pack(
        DATASET_MAGIC,
        FORMAT_VERSION,
        int(ds.kind),
        ds.geometry.n_v,
        ds.geometry.n_h,
        ds.count,
        int(ds.normalized),
    )
    with open(path, "wb") as f:
        f.write(header)
        if ds.kind == DatasetKind.NOISY:
            f.write(np.ascontiguousarray(ds.noise_vars, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.samples, dtype="<c16").tobytes())
    logger.info(f"Saved {ds.count} {ds.kind.name.lower()} samples to {path}")


def load_dataset(path: Path, geometry: Optional[UraGeometry] = None) -> ChannelDataset:
    """Read a CEDF dataset.

    Spacings are not stored in the file; pass ``geometry`` to restore non-default spacings.
    Its antenna counts must agree with the file.

    Raises:
        BadMagicError: If the file is not a CEDF file
        UnsupportedVersionError: If the version is not 1
        TruncatedPayloadError: If the file ends early
        FileFormatError: For any other malformed content
    """
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise BadMagicError(f"bad magic in {path}: expected {DATASET_MAGIC!r}, found {magic!r}")
        rest = _read_exact(f, _DATASET_HEADER.size - 4, "header")
        _, version, kind, n_v, n_h, count, normalized = _DATASET_HEADER.unpack(magic + rest)
        _check_magic_and_version(magic, version, DATASET_MAGIC, path)
        if kind not in (DatasetKind.CLEAN, DatasetKind.NOISY):
            raise FileFormatError(f"{path}: unknown dataset kind {kind}")
        if n_v < 1 or n_h < 1:
            raise FileFormatError(f"{path}: invalid geometry {n_v}x{n_h}")

        if geometry is None:
            geometry = UraGeometry(n_v=n_v, n_h=n_h)
        elif (geometry.n_v, geometry.n_h) != (n_v, n_h):
            raise FileFormatError(
                f"{path} holds a {n_v}x{n_h} array but geometry {geometry.n_v}x{geometry.n_h} "
                "was requested"
            )

        noise_vars = None
        if kind == DatasetKind.NOISY:
            raw = _read_exact(f, 8 * count, "noise variances")
            noise_vars = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        n = n_v * n_h
        raw = _read_exact(f, 16 * count * n, "samples")
        samples = np.frombuffer(raw, dtype="<c16").astype(np.complex128).reshape(count, n)
        if f.read(1):
            raise FileFormatError(f"{path}: trailing bytes after payload")

    logger.debug(f"Loaded {count} samples ({n_v}x{n_h}) from {path}")
    return ChannelDataset(
        geometry=geometry,
        kind=DatasetKind(kind),
        samples=samples,
        noise_vars=noise_vars,
        normalized=bool(normalized),
    )


def save_checkpoint(
    path: Path, header: Dict[str, Any], tensors: List[Tuple[str, np.ndarray]]
) -> None:
    """Write a CEVM checkpoint: a JSON header followed by named f64 tensors in order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_U32.pack(FORMAT_VERSION))
        f.write(_U32.pack(len(blob)))
        f.write(blob)
        f.write(_U32.pack(len(tensors)))
        for name, data in tensors:
            encoded = name.encode("utf-8")
            f.write(_U16.pack(len(encoded)))
            f.write(encoded)
            f.write(_U8.pack(data.ndim))
            for dim in data.shape:
                f.write(_U32.pack(dim))
            f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")


def load_checkpoint(path: Path) -> Tuple[Dict[str, Any], List[Tuple[str, np.ndarray]]]:
    """Read a CEVM checkpoint.

    Returns:
        Tuple of the JSON header and the ``(name, array)`` list in stored order

    Raises:
        BadMagicError: If the file is not a CEVM file
        UnsupportedVersionError: If the version is not 1
        TruncatedPayloadError: If the file ends early
    """
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        version = _U32.unpack(_read_exact(f, 4, "version"))[0] if magic == CHECKPOINT_MAGIC else 0
        _check_magic_and_version(magic, version, CHECKPOINT_MAGIC, path)
        (length,) = _U32.unpack(_read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, length, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FileFormatError(f"{path}: corrupt checkpoint header: {e}") from e

        (count,) = _U32.unpack(_read_exact(f, 4, "tensor count"))
        tensors = []
        for _ in range(count):
            (name_len,) = _U16.unpack(_read_exact(f, 2, "tensor name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (ndim,) = _U8.unpack(_read_exact(f, 1, "tensor rank"))
            shape = tuple(_U32.unpack(_read_exact(f, 4, "tensor shape"))[0] for _ in range(ndim))
            size = math.prod(shape)
            raw = _read_exact(f, 8 * size, f"tensor '{name}'")
            values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            tensors.append((name, values.reshape(shape)))
        if f.read(1):
            raise FileFormatError(f"{path}: trailing bytes after tensors")

    logger.debug(f"Loaded checkpoint with {len(tensors)} tensors from {path}")
    return header, tensors
