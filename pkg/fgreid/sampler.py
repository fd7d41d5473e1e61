"""
Identity-balanced P x K batch sampling over tracklets.

A batch holds P distinct identities with K clips each; every clip is t
frames taken at a uniform stride over its tracklet.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import SamplingError

logger = logging.getLogger(__name__)


@dataclass
class Tracklet:
    """Frames of one identity seen by one camera; images have one frame."""
    tracklet_id: str
    identity_id: int
    camera_id: int
    frames: Optional[np.ndarray] = field(default=None, repr=False)
    archive: Optional[str] = None
    num_frames: int = 0

    def __post_init__(self):
        if self.identity_id < 0 or self.camera_id < 0:
            raise SamplingError(f"tracklet {self.tracklet_id}: identity and camera must be >= 0")
        if self.frames is not None:
            self.num_frames = int(self.frames.shape[0])
        if self.num_frames < 1:
            raise SamplingError(f"tracklet {self.tracklet_id} is empty")


@dataclass(frozen=True)
class BatchSpec:
    p: int
    k: int
    t: int

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise SamplingError(f"P and K must be >= 2, got P={self.p} K={self.k}")
        if self.t < 1:
            raise SamplingError(f"t must be >= 1, got {self.t}")

    @property
    def size(self):
        return self.p * self.k

    @classmethod
    def from_run_config(cls, cfg):
        batch = cfg.section('batch')
        return cls(p=batch['p'], k=batch['k'], t=batch['t'])


@dataclass
class Batch:
    frames: np.ndarray
    labels: np.ndarray
    identities: np.ndarray
    tracklet_ids: list


def clip_indices(num_frames, t, rng=None):
    """
    Frame indices of one clip of length ``t``.

    Frames are evenly spaced over the tracklet; ``rng`` draws a random
    offset inside the first stride. Tracklets shorter than ``t`` repeat
    cyclically.
    """
    if num_frames < 1:
        raise SamplingError("cannot sample a clip from an empty tracklet")
    if num_frames < t:
        return np.arange(t) % num_frames
    stride = num_frames // t
    offset = int(rng.integers(stride)) if rng is not None else 0
    return offset + stride * np.arange(t)


def label_map(tracklets):
    """Identity id -> contiguous class index, sorted by identity."""
    return {identity: index for index, identity in enumerate(sorted({tr.identity_id for tr in tracklets}))}


def group_by_identity(tracklets):
    groups = {}
    for tracklet in tracklets:
        groups.setdefault(tracklet.identity_id, []).append(tracklet)
    return groups


def sample_pk_batch(tracklets, spec, rng, identities=None, labels=None):
    """
    Draw one P x K batch.

    Args:
        tracklets: list of Tracklet with frames loaded
        spec: BatchSpec
        rng: numpy Generator
        identities: optional P identities to use instead of a random draw
        labels: identity -> class index (default: label_map(tracklets))

    Returns:
        Batch with frames (P*K, t, H, W, 3) and class labels (P*K,)

    Raises:
        SamplingError: fewer than P identities
    """
    groups = group_by_identity(tracklets)
    labels = label_map(tracklets) if labels is None else labels
    if identities is None:
        if len(groups) < spec.p:
            raise SamplingError(f"dataset has {len(groups)} identities, batch needs P={spec.p}")
        pool = sorted(groups)
        identities = [pool[i] for i in rng.choice(len(pool), size=spec.p, replace=False)]

    clips, classes, ids, names = [], [], [], []
    for identity in identities:
        members = groups[identity]
        picks = rng.choice(len(members), size=spec.k, replace=len(members) < spec.k)
        for pick in picks:
            tracklet = members[pick]
            if tracklet.frames is None:
                raise SamplingError(f"tracklet {tracklet.tracklet_id} has no frames loaded")
            clips.append(tracklet.frames[clip_indices(tracklet.num_frames, spec.t, rng)])
            classes.append(labels[identity])
            ids.append(identity)
            names.append(tracklet.tracklet_id)

    return Batch(
        frames=np.stack(clips).astype(np.float32),
        labels=np.asarray(classes, dtype=np.int64),
        identities=np.asarray(ids, dtype=np.int64),
        tracklet_ids=names,
    )


def iter_epoch_batches(tracklets, spec, rng, labels=None):
    """
    One epoch: identities are shuffled and split into groups of P.

    A trailing group smaller than P is dropped.
    """
    pool = sorted(group_by_identity(tracklets))
    if len(pool) < spec.p:
        raise SamplingError(f"dataset has {len(pool)} identities, batch needs P={spec.p}")
    order = [pool[i] for i in rng.permutation(len(pool))]
    for start in range(0, len(order) - spec.p + 1, spec.p):
        yield sample_pk_batch(tracklets, spec, rng, identities=order[start:start + spec.p], labels=labels)
