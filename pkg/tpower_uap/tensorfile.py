"""Formats binaires: TensorFile et conteneur "en-tête JSON + blocs float64".

TensorFile:
    b"TNSR1" | b"f64" | rank (uint32 LE) | shape (rank × uint64 LE) | payload float64 LE

Conteneur encadré (modèles, perturbations):
    magic (5 octets) | longueur d'en-tête (uint64 LE) | en-tête JSON UTF-8 | blocs float64 LE

L'en-tête JSON est sérialisé avec des clés triées, pour que deux écritures du même
contenu produisent des fichiers identiques octet par octet.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError, StorageError

TENSOR_MAGIC = b"TNSR1"
DTYPE_TAG = b"f64"
FLOAT_LE = np.dtype("<f8")


def _write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise StorageError(f"Écriture impossible: {path}", {"reason": str(e)}) from e


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"Fichier introuvable: {path}")
    try:
        return path.read_bytes()
    except OSError as e:
        raise StorageError(f"Lecture impossible: {path}", {"reason": str(e)}) from e


def encode_tensor(tensor: np.ndarray) -> bytes:
    arr = np.asarray(tensor, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError("TensorFile: valeurs non finies")
    head = TENSOR_MAGIC + DTYPE_TAG + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=FLOAT_LE).tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 12:
        raise FormatError("TensorFile: en-tête tronqué")
    if data[:5] != TENSOR_MAGIC:
        raise FormatError("TensorFile: magic invalide")
    if data[5:8] != DTYPE_TAG:
        raise FormatError(f"TensorFile: dtype non supporté {data[5:8]!r}")
    (rank,) = struct.unpack_from("<I", data, 8)
    offset = 12 + 8 * rank
    if len(data) < offset:
        raise FormatError("TensorFile: en-tête tronqué")
    shape = struct.unpack_from(f"<{rank}Q", data, 12)
    count = int(np.prod(shape)) if rank else 1
    payload = data[offset:]
    if len(payload) != 8 * count:
        raise FormatError(f"TensorFile: payload de {len(payload)} octets, attendu {8 * count}")
    return np.frombuffer(payload, dtype=FLOAT_LE).astype(np.float64).reshape(shape)


def write_tensor(path: Path, tensor: np.ndarray) -> Path:
    """Écrit un TensorFile; la relecture est exacte bit à bit."""
    _write_bytes(path, encode_tensor(tensor))
    return Path(path)


def read_tensor(path: Path) -> np.ndarray:
    return decode_tensor(_read_bytes(path))


def is_tensor_file(path: Path) -> bool:
    path = Path(path)
    if not path.is_file():
        return False
    with open(path, "rb") as f:
        return f.read(5) == TENSOR_MAGIC


def encode_framed(magic: bytes, header: dict[str, Any], arrays: list[np.ndarray]) -> bytes:
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<Q", len(header_bytes)), header_bytes]
    for arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype=FLOAT_LE).tobytes())
    return b"".join(parts)


def decode_framed(
    magic: bytes, data: bytes, shapes_key: str = "block_shapes"
) -> tuple[dict[str, Any], list[np.ndarray]]:
    """Décode un conteneur encadré; l'en-tête doit lister les formes des blocs sous `shapes_key`."""
    if data[: len(magic)] != magic:
        raise FormatError(f"Magic invalide: attendu {magic!r}")
    offset = len(magic)
    if len(data) < offset + 8:
        raise FormatError("En-tête tronqué")
    (header_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if offset + header_len > len(data):
        raise FormatError("En-tête tronqué")
    try:
        header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"En-tête JSON illisible: {e}") from e
    offset += header_len

    arrays = []
    for shape in header.get(shapes_key, []):
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise FormatError("Payload tronqué")
        arrays.append(np.frombuffer(data[offset:end], dtype=FLOAT_LE).astype(np.float64).reshape(shape))
        offset = end
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} octets en trop après les blocs déclarés")
    return header, arrays


def write_framed(path: Path, magic: bytes, header: dict[str, Any], arrays: list[np.ndarray]) -> bytes:
    data = encode_framed(magic, header, arrays)
    _write_bytes(path, data)
    return data


def read_framed(path: Path, magic: bytes, shapes_key: str = "block_shapes") -> tuple[dict[str, Any], list[np.ndarray]]:
    return decode_framed(magic, _read_bytes(path), shapes_key)
