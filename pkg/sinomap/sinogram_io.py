"""
Binary artifacts: SINO sinogram files, 16-bit PGM image export and text previews.

SINO layout (little-endian):
    magic "SINO" | u32 version | u32 kind | u32 n_angles | u32 n_detectors | f64 payload

kind 0 holds a log-domain sinogram, kind 1 holds measured photon counts I.
Every writer goes through atomic_write (temp file + rename).
"""

import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

from sinomap.errors import (
    BadMagicError,
    NonFiniteError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    ValidationError,
)
from sinomap.noise_sim import PhotonData

logger = logging.getLogger(__name__)

SINO_MAGIC = b"SINO"
SINO_VERSION = 1
KIND_SINOGRAM = 0
KIND_COUNTS = 1
_HEADER = struct.Struct("<4sIIII")

PathLike = Union[str, Path]


def atomic_write(path: PathLike, payload: Union[bytes, str]):
    """Write to a sibling temp file, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_sinogram(data: Union[np.ndarray, PhotonData]) -> bytes:
    if isinstance(data, PhotonData):
        kind, field = KIND_COUNTS, data.I
    else:
        kind, field = KIND_SINOGRAM, np.asarray(data, dtype=np.float64)
    if field.ndim != 2:
        raise ShapeMismatchError(f"sinogram must be 2-D, got shape {field.shape}")
    if not np.all(np.isfinite(field)):
        raise NonFiniteError("refusing to write non-finite values")
    header = _HEADER.pack(SINO_MAGIC, SINO_VERSION, kind, field.shape[0], field.shape[1])
    return header + np.ascontiguousarray(field, dtype="<f8").tobytes()


def decode_sinogram(blob: bytes) -> Union[np.ndarray, PhotonData]:
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, got {len(blob)}")
    magic, version, kind, n_angles, n_det = _HEADER.unpack_from(blob)
    if magic != SINO_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {SINO_MAGIC!r}")
    if version != SINO_VERSION:
        raise UnsupportedVersionError(f"unsupported SINO version {version}")
    if kind not in (KIND_SINOGRAM, KIND_COUNTS):
        raise ValidationError(f"unknown SINO kind {kind}")
    expected = 8 * n_angles * n_det
    payload = blob[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise ValidationError(f"{len(payload) - expected} trailing bytes after payload")
    field = np.frombuffer(payload, dtype="<f8").reshape(n_angles, n_det).astype(np.float64)
    if kind == KIND_COUNTS:
        return PhotonData.from_measured(field)
    return field


def write_sinogram(path: PathLike, data: Union[np.ndarray, PhotonData]):
    atomic_write(path, encode_sinogram(data))


def read_sinogram(path: PathLike) -> Union[np.ndarray, PhotonData]:
    """Kind 0 returns an array; kind 1 returns PhotonData with warm-start G."""
    return decode_sinogram(Path(path).read_bytes())


def read_kind(path: PathLike) -> int:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    magic, _, kind, _, _ = _HEADER.unpack(head)
    if magic != SINO_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    return kind


def export_pgm(path: PathLike, img: np.ndarray, low: float = None, high: float = None):
    """
    Write img as a 16-bit binary PGM with a linear window [low, high] (defaults to the
    image range). The window goes to a sidecar .txt next to the image.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatchError(f"image must be 2-D, got shape {img.shape}")
    low = float(np.min(img)) if low is None else float(low)
    high = float(np.max(img)) if high is None else float(high)
    span = high - low if high > low else 1.0
    levels = np.clip(np.rint((img - low) / span * 65535.0), 0, 65535).astype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
    path = Path(path)
    atomic_write(path, header + levels.tobytes())
    atomic_write(path.with_suffix(".txt"), f"window_low = {low!r}\nwindow_high = {high!r}\nmaxval = 65535\n")


def write_preview(path: PathLike, data: Union[np.ndarray, PhotonData], precision: int = 6):
    """Human-readable dump of a sinogram, one angle per line."""
    field = data.I if isinstance(data, PhotonData) else np.asarray(data)
    kind = "counts" if isinstance(data, PhotonData) else "sinogram"
    lines = [f"# kind = {kind}", f"# shape = {field.shape[0]} x {field.shape[1]}"]
    lines += [" ".join(f"{v:.{precision}g}" for v in row) for row in field]
    atomic_write(path, "\n".join(lines) + "\n")
