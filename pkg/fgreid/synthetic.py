"""
Procedural pixel tracklets for desk-scale training and evaluation.

Identities come in pairs that share a body color and an accessory color;
the two members of a pair differ only in which side the accessory patch
sits on, so their mean colors match and only the fine detail separates
them. Frames add positional jitter, occlusion bars, brightness and pixel
noise.
"""

import logging

import numpy as np

from .exceptions import ConfigurationError
from .sampler import Tracklet

logger = logging.getLogger(__name__)

BACKGROUND = 0.45
OCCLUSION_PROBABILITY = 0.2
MAX_JITTER = 2


def _image_shape(image_size):
    if isinstance(image_size, (int, np.integer)):
        image_size = (image_size, image_size)
    try:
        height, width = image_size
    except (TypeError, ValueError):
        raise ConfigurationError(f"image size must be an int or (height, width), got {image_size!r}") from None
    for value in (height, width):
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
            raise ConfigurationError(f"image sides must be positive integers, got {image_size!r}")
    return int(height), int(width)


def identity_appearance(identity, pair_colors):
    """(body color, accessory color, accessory side) of an identity."""
    body, accessory = pair_colors[identity // 2]
    return body, accessory, identity % 2


def render_identity(height, width, body, accessory, side, background=BACKGROUND):
    """Clean frame of an identity: body block plus one accessory patch."""
    frame = np.full((height, width, 3), background, dtype=np.float32)
    top, bottom = height // 4, height - height // 8
    left, right = width // 4, width - width // 4
    frame[top:bottom, left:right] = body

    patch = max(2, height // 8)
    row = height // 2
    column = 1 if side == 0 else width - 1 - patch
    frame[row:row + patch, column:column + patch] = accessory
    return frame


def _augment(frame, rng):
    shift = rng.integers(-MAX_JITTER, MAX_JITTER + 1, size=2)
    out = np.roll(frame, shift=(int(shift[0]), int(shift[1])), axis=(0, 1))
    if rng.random() < OCCLUSION_PROBABILITY:
        height = out.shape[0]
        bar = max(1, height // 8)
        start = int(rng.integers(0, height - bar + 1))
        out[start:start + bar] = rng.uniform(0.2, 0.4)
    out = out * rng.uniform(0.8, 1.2) + rng.normal(0.0, 0.02, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def synth_dataset(num_identities, tracklets_per_id, frames, image_size, rng, num_cameras=2):
    """
    Build a labeled set of pixel tracklets.

    Args:
        num_identities: identities (paired two by two)
        tracklets_per_id: tracklets per identity
        frames: frames per tracklet
        image_size: int or (height, width)
        rng: numpy Generator
        num_cameras: tracklet j is seen by camera j % num_cameras

    Returns:
        list of Tracklet with frames (frames, H, W, 3) in [0, 1]

    Raises:
        ConfigurationError: a count below 1 or a malformed image size
    """
    for name, value in (('num_identities', num_identities), ('tracklets_per_id', tracklets_per_id),
                        ('frames', frames), ('num_cameras', num_cameras)):
        if value < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {value}")
    height, width = _image_shape(image_size)

    pair_colors = [
        (rng.uniform(0.15, 0.9, size=3).astype(np.float32), rng.uniform(0.0, 1.0, size=3).astype(np.float32))
        for _ in range((num_identities + 1) // 2)
    ]

    tracklets = []
    for identity in range(num_identities):
        body, accessory, side = identity_appearance(identity, pair_colors)
        clean = render_identity(height, width, body, accessory, side)
        for j in range(tracklets_per_id):
            clip = np.stack([_augment(clean, rng) for _ in range(frames)])
            tracklets.append(Tracklet(
                tracklet_id=f'id{identity:03d}_t{j:02d}',
                identity_id=identity,
                camera_id=j % num_cameras,
                frames=clip,
            ))
    logger.info("generated %d tracklets for %d identities", len(tracklets), num_identities)
    return tracklets


def split_dataset(tracklets, held_out=1):
    """
    Hold out the last ``held_out`` tracklets of every identity as queries.

    Returns:
        (train, query, gallery) where gallery is the training tracklets
    """
    groups = {}
    for tracklet in tracklets:
        groups.setdefault(tracklet.identity_id, []).append(tracklet)
    train, query = [], []
    for identity in sorted(groups):
        members = groups[identity]
        cut = max(0, len(members) - held_out)
        train.extend(members[:cut])
        query.extend(members[cut:])
    return train, query, list(train)
