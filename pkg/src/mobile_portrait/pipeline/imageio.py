"""Image and mask files through Pillow.

Frames are written as binary PPM (P6, maxval 255); masks as PGM (P5).
Any format Pillow reads (PNG included) is accepted on input.
"""

import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from mobile_portrait.tensor import Tensor
from mobile_portrait.validation import InputFormatError, check_rank

logger = logging.getLogger(__name__)


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 by round(clip(x) * 255), halves rounded up."""
    return np.floor(np.clip(values.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _open(path: Path, mode: str, size: int | None) -> np.ndarray:
    if not path.exists():
        raise InputFormatError(f"image '{path}' does not exist")
    try:
        with Image.open(path) as img:
            img = img.convert(mode)
            if size is not None and img.size != (size, size):
                logger.debug("Resizing %s from %s to %dx%d", path, img.size, size, size)
                img = img.resize((size, size), Image.Resampling.BILINEAR)
            return np.asarray(img, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as e:
        raise InputFormatError(f"cannot read image '{path}': {e}") from e


def read_image(path: Path | str, size: int | None = None) -> Tensor:
    """RGB image as a (1, 3, H, W) tensor in [0, 1]."""
    pixels = _open(Path(path), "RGB", size)
    return Tensor(pixels.transpose(2, 0, 1)[None])


def read_mask(path: Path | str, size: int | None = None) -> Tensor:
    """Grayscale mask as a (1, 1, H, W) tensor in [0, 1]."""
    pixels = _open(Path(path), "L", size)
    return Tensor(pixels[None, None])


def write_image(path: Path | str, image: Tensor) -> Path:
    """Write a (1, 3, H, W) or (1, 1, H, W) tensor; the suffix picks the format."""
    check_rank(image.shape, 4, "image")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = quantize(image.data[0])
    if pixels.shape[0] == 1:
        Image.fromarray(pixels[0]).save(path)
    else:
        Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0))).save(path)
    return path
