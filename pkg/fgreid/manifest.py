"""
Dataset manifests: one JSON object per line describing a tracklet.

    {"tracklet_id": "id000_t00", "identity": 0, "camera": 0,
     "archive": "frames.fgrd", "num_frames": 16}

Archive paths are relative to the manifest file. A frames archive holds
one (num_frames, H, W, 3) tensor per tracklet, named by tracklet id.
"""

import json
import logging
from pathlib import Path

from .archive import read_archive, write_archive
from .exceptions import ArchiveError, ManifestError
from .sampler import Tracklet

logger = logging.getLogger(__name__)

FIELDS = ('tracklet_id', 'identity', 'camera', 'archive', 'num_frames')


def _record(line, source, lineno):
    try:
        entry = json.loads(line)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{source}:{lineno}: invalid JSON: {e}") from e
    if not isinstance(entry, dict):
        raise ManifestError(f"{source}:{lineno}: expected a JSON object")
    missing = [name for name in FIELDS if name not in entry]
    if missing:
        raise ManifestError(f"{source}:{lineno}: missing fields {', '.join(missing)}")
    for name in ('identity', 'camera', 'num_frames'):
        value = entry[name]
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise ManifestError(f"{source}:{lineno}: {name} must be a nonnegative integer")
    if entry['num_frames'] < 1:
        raise ManifestError(f"{source}:{lineno}: num_frames must be >= 1")
    return entry


def read_manifest(path):
    """
    Parse a manifest into Tracklets (frames not loaded).

    Raises:
        ManifestError: unreadable file or invalid record
    """
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e

    tracklets = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        entry = _record(line, path, lineno)
        tracklets.append(Tracklet(
            tracklet_id=str(entry['tracklet_id']),
            identity_id=entry['identity'],
            camera_id=entry['camera'],
            archive=str((path.parent / entry['archive']).resolve()),
            num_frames=entry['num_frames'],
        ))
    logger.info("read %d tracklets from %s", len(tracklets), path)
    return tracklets


def load_frames(tracklets):
    """
    Attach frames from their archives; each archive is read once.

    Raises:
        ManifestError: archive missing, tensor absent or frame count mismatch
    """
    cache = {}
    for tracklet in tracklets:
        if tracklet.archive not in cache:
            try:
                cache[tracklet.archive] = read_archive(tracklet.archive)
            except ArchiveError as e:
                raise ManifestError(f"tracklet {tracklet.tracklet_id}: {e}") from e
        tensors = cache[tracklet.archive]
        if tracklet.tracklet_id not in tensors:
            raise ManifestError(f"archive {tracklet.archive} has no tensor {tracklet.tracklet_id!r}")
        frames = tensors[tracklet.tracklet_id]
        if frames.shape[0] != tracklet.num_frames:
            raise ManifestError(
                f"tracklet {tracklet.tracklet_id}: manifest says {tracklet.num_frames} frames, "
                f"archive holds {frames.shape[0]}")
        tracklet.frames = frames
    return tracklets


def load_dataset(path):
    """read_manifest followed by load_frames."""
    return load_frames(read_manifest(path))


def write_manifest(tracklets, path, archive_name, write_frames=True):
    """
    Write a manifest plus the frames archive it points to.

    Args:
        tracklets: Tracklets with frames
        path: manifest file
        archive_name: archive file name, relative to the manifest directory
        write_frames: also write the archive (off when it already holds these tracklets)

    Returns:
        Path of the manifest
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if write_frames:
        write_archive({tr.tracklet_id: tr.frames for tr in tracklets}, path.parent / archive_name)
    lines = [
        json.dumps({
            'tracklet_id': tr.tracklet_id,
            'identity': tr.identity_id,
            'camera': tr.camera_id,
            'archive': archive_name,
            'num_frames': tr.num_frames,
        }, sort_keys=False)
        for tr in tracklets
    ]
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    logger.info("wrote manifest %s (%d tracklets)", path, len(tracklets))
    return path
