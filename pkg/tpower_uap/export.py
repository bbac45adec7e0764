"""Export PGM/PPM binaires des perturbations et des images.

Deux échelles:
- "signed": [−1, 1] → 0..255, zéro en gris moyen (128), pour les perturbations
- "unit": [0, 1] → 0..255, pour les images
"""

from __future__ import annotations

import io
import logging
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image  # type: ignore

from .errors import FormatError, StorageError

logger = logging.getLogger(__name__)

Scale = Literal["signed", "unit"]


def to_bytes_grid(tensor: np.ndarray, scale: Scale) -> np.ndarray:
    """Quantifie un tenseur HWC en uint8 selon l'échelle demandée."""
    t = np.asarray(tensor, dtype=np.float64)
    if scale == "signed":
        levels = np.floor((np.clip(t, -1.0, 1.0) + 1.0) * 127.5 + 0.5)
    elif scale == "unit":
        levels = np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5)
    else:
        raise FormatError(f"Échelle inconnue: {scale!r}")
    return levels.astype(np.uint8)


def encode_pnm(tensor: np.ndarray, scale: Scale = "signed") -> bytes:
    """P5 (1 canal) ou P6 (3 canaux)."""
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim != 3:
        raise FormatError(f"Tenseur de rang 3 (H, W, C) attendu, reçu {t.shape}")
    channels = t.shape[2]
    if channels not in (1, 3):
        raise FormatError(f"Export PGM/PPM: 1 ou 3 canaux, reçu {channels}", {"shape": list(t.shape)})
    grid = to_bytes_grid(t, scale)
    image = Image.fromarray(np.ascontiguousarray(grid[:, :, 0] if channels == 1 else grid))
    buffer = io.BytesIO()
    image.save(buffer, format="PPM")
    return buffer.getvalue()


def export_pnm(tensor: np.ndarray, path: Path, scale: Scale = "signed") -> Path:
    data = encode_pnm(tensor, scale)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise StorageError(f"Écriture impossible: {path}", {"reason": str(e)}) from e
    logger.info("Image exportée -> %s", path)
    return path


def read_pnm(path: Path, scale: Scale = "unit") -> np.ndarray:
    """Relit un PGM/PPM en tenseur HWC float64 (inverse de la quantification)."""
    path = Path(path)
    try:
        with Image.open(path) as image:
            grid = np.asarray(image, dtype=np.float64)
    except (OSError, Image.UnidentifiedImageError) as e:
        raise FormatError(f"PGM/PPM illisible: {path}", {"reason": str(e)}) from e
    if grid.ndim == 2:
        grid = grid[:, :, None]
    if scale == "signed":
        return grid / 127.5 - 1.0
    return grid / 255.0
