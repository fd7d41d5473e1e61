"""
Toy convolutional backbone used as a stand-in feature provider.

Each stage is a 2x2 convolution with stride 2 written as space-to-depth
followed by a channel projection and relu, so three stages map an
(H, W) frame to (H/8, W/8) positions.
"""

import logging

import numpy as np

from .exceptions import ShapeError
from .numerics import ProjectionParams, channel_project
from .tensor import as_tensor, relu

logger = logging.getLogger(__name__)

PIXEL_CHANNELS = 3


def stage_names(prefix, num_stages):
    return [f'{prefix}.stage{i}' for i in range(num_stages)]


def init_backbone_parameters(rng, prefix, channels, c_backbone):
    """
    He-normal weights for a backbone with hidden ``channels`` ending in ``c_backbone``.

    Returns:
        dict name -> ndarray, names ``<prefix>.stage<i>.weight|bias``
    """
    widths = [PIXEL_CHANNELS] + list(channels) + [c_backbone]
    arrays = {}
    for name, c_in, c_out in zip(stage_names(prefix, len(widths) - 1), widths[:-1], widths[1:]):
        fan_in = 4 * c_in
        arrays[f'{name}.weight'] = (rng.standard_normal((fan_in, c_out)) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        arrays[f'{name}.bias'] = np.zeros(c_out, dtype=np.float32)
    return arrays


def _space_to_depth(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if (h2 * 2, w2 * 2) != (h, w):
        x = x[:, :h2 * 2, :w2 * 2, :]
    x = x.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h2, w2, 4 * c)


def toy_backbone(frames, stages):
    """
    Map pixel frames to backbone features.

    Args:
        frames: (..., H, W, 3) pixels; leading axes are kept (e.g. batch, t)
        stages: list of ProjectionParams, one per stride-2 stage

    Returns:
        Tensor (..., H / 2**n, W / 2**n, c_backbone); odd rows and columns are
        cropped at each stage

    Raises:
        ShapeError: frames smaller than the 2**n footprint or not RGB
    """
    x = as_tensor(frames)
    if x.ndim < 3 or x.shape[-1] != PIXEL_CHANNELS:
        raise ShapeError(f"frames must be (..., H, W, {PIXEL_CHANNELS}), got {x.shape}")
    footprint = 2 ** len(stages)
    height, width = x.shape[-3], x.shape[-2]
    if height < footprint or width < footprint:
        raise ShapeError(
            f"frames of {height}x{width} are smaller than the {footprint}x{footprint} backbone footprint")

    lead = x.shape[:-3]
    x = x.reshape((-1,) + x.shape[-3:])
    for stage in stages:
        if not isinstance(stage, ProjectionParams):
            raise ShapeError("backbone stages must be ProjectionParams")
        x = relu(channel_project(_space_to_depth(x), stage))
    return x.reshape(lead + x.shape[1:])
