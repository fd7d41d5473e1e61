"""
Attention-map overlays written as binary PPM (P6) images.
"""

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import ExportError, ShapeError

logger = logging.getLogger(__name__)


def upsample_map(a_map, height, width):
    """Bilinear resize of an (h, w) or (h, w, 1) map to (height, width)."""
    a_map = np.asarray(a_map, dtype=np.float32)
    if a_map.ndim == 3 and a_map.shape[-1] == 1:
        a_map = a_map[..., 0]
    if a_map.ndim != 2:
        raise ShapeError(f"attention map must be (h, w), got {a_map.shape}")
    image = Image.fromarray(np.ascontiguousarray(a_map)).resize((width, height), Image.BILINEAR)
    return np.asarray(image, dtype=np.float32)


def heat_colors(values):
    """Map values in [0, 1] to a black-red-yellow heat ramp (RGB in [0, 1])."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([v, v * v, np.zeros_like(v)], axis=-1)


def blend_overlay(frame, a_map, alpha=0.5):
    """
    Blend an upsampled heat map over a frame.

    Args:
        frame: (H, W, 3) pixels in [0, 1]
        a_map: (h, w) or (h, w, 1) attention values
        alpha: weight of the heat layer

    Returns:
        uint8 array (H, W, 3)
    """
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[-1] != 3:
        raise ShapeError(f"frame must be (H, W, 3), got {frame.shape}")
    heat = heat_colors(upsample_map(a_map, frame.shape[0], frame.shape[1]))
    mixed = (1.0 - alpha) * np.clip(frame, 0.0, 1.0) + alpha * heat
    return np.round(mixed * 255.0).astype(np.uint8)


def export_attention_overlay(frame, a_map, path, alpha=0.5):
    """
    Write the attention overlay of one frame as a P6 pixmap.

    Args:
        frame: (H, W, 3) pixels in [0, 1]
        a_map: attention map of that frame
        path: output file
        alpha: weight of the heat layer

    Returns:
        Path of the written image

    Raises:
        ExportError: the file cannot be written
    """
    path = Path(path)
    pixels = blend_overlay(frame, a_map, alpha)
    try:
        Image.fromarray(pixels).save(path, format='PPM')
    except OSError as e:
        raise ExportError(f"cannot write overlay {path}: {e}") from e
    logger.debug("wrote overlay %s", path)
    return path
