"""
Retrieval evaluation: clip-averaged tracklet embeddings, similarity
ranking, CMC and mAP under the same-identity same-camera exclusion rule,
and report output.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .archive import decode_ids, encode_ids, read_archive, write_archive
from .exceptions import EvaluationError, ExportError
from .model import embed_frames
from .sampler import clip_indices

logger = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 10, 20)
MAX_CLIPS = 32


@dataclass
class EmbeddingRecord:
    tracklet_id: str
    identity_id: int
    camera_id: int
    vector: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.identity_id < 0 or self.camera_id < 0:
            raise EvaluationError(f"record {self.tracklet_id}: ids must be >= 0")
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if not np.all(np.isfinite(self.vector)):
            raise EvaluationError(f"record {self.tracklet_id} has a non-finite embedding")


@dataclass
class RankingResult:
    """Per-query rankings and the aggregate metrics over valid queries."""
    order: list
    average_precision: np.ndarray
    cmc: dict
    mean_ap: float
    excluded: int
    num_queries: int
    num_gallery: int


# ==================== Extraction ====================

def select_clips(num_frames, t, max_clips=MAX_CLIPS):
    """
    Index arrays of non-overlapping length-``t`` clips, evenly spread and
    capped at ``max_clips``. A tracklet shorter than ``t`` yields one
    cyclically repeated clip.
    """
    if num_frames < 1:
        raise EvaluationError("cannot embed an empty tracklet")
    count = num_frames // t
    if count == 0:
        return [clip_indices(num_frames, t)]
    starts = np.arange(count)
    if count > max_clips:
        starts = np.round(np.linspace(0, count - 1, max_clips)).astype(int)
    return [np.arange(start * t, (start + 1) * t) for start in starts]


def extract_tracklet_embedding(tracklet, params, config, t, max_clips=MAX_CLIPS):
    """
    Average the final embedding over up to ``max_clips`` clips of a tracklet.

    Args:
        tracklet: Tracklet with frames loaded
        params: trained HeadParameters
        config: HeadConfig
        t: frames per clip
        max_clips: clip cap

    Returns:
        EmbeddingRecord
    """
    if tracklet.frames is None or tracklet.frames.shape[0] == 0:
        raise EvaluationError(f"tracklet {tracklet.tracklet_id} has no frames")
    clips = np.stack([tracklet.frames[idx] for idx in select_clips(tracklet.frames.shape[0], t, max_clips)])
    bundle = embed_frames(clips.astype(np.float32), params, config, mode='infer')
    vector = np.mean(bundle.f_star.data, axis=0, dtype=np.float64)
    return EmbeddingRecord(tracklet.tracklet_id, tracklet.identity_id, tracklet.camera_id, vector)


def extract_embeddings(tracklets, params, config, t, max_clips=MAX_CLIPS):
    records = [extract_tracklet_embedding(tr, params, config, t, max_clips) for tr in tracklets]
    logger.info("extracted %d embeddings", len(records))
    return records


def aggregate_by_identity(records):
    """Average records per (identity, camera); one record per group."""
    groups = {}
    for record in records:
        groups.setdefault((record.identity_id, record.camera_id), []).append(record.vector)
    return [
        EmbeddingRecord(f'id{identity}_cam{camera}', identity, camera,
                        np.mean(np.stack(vectors), axis=0, dtype=np.float64))
        for (identity, camera), vectors in sorted(groups.items())
    ]


def records_to_arrays(records):
    """(vectors, identities, cameras) arrays of a record list."""
    if not records:
        raise EvaluationError("no embedding records")
    vectors = np.stack([r.vector for r in records])
    identities = np.array([r.identity_id for r in records], dtype=np.int64)
    cameras = np.array([r.camera_id for r in records], dtype=np.int64)
    return vectors, identities, cameras


def save_embeddings(records, path):
    """
    Embedding archive: ``embedding/<tracklet_id>`` tensors plus an (N, 4)
    table of split identity and camera ids (see encode_ids).
    """
    tensors = {f'embedding/{r.tracklet_id}': r.vector for r in records}
    tensors['meta/identity_camera'] = np.hstack([
        encode_ids([r.identity_id for r in records]), encode_ids([r.camera_id for r in records])])
    return write_archive(tensors, path)


def load_embeddings(path):
    tensors = read_archive(path)
    meta = tensors.pop('meta/identity_camera', None)
    names = [name for name in tensors if name.startswith('embedding/')]
    if meta is None or meta.shape != (len(names), 4):
        raise EvaluationError(f"{path} is not an embedding archive")
    identities, cameras = decode_ids(meta[:, :2]), decode_ids(meta[:, 2:])
    return [
        EmbeddingRecord(name[len('embedding/'):], identity, camera, tensors[name])
        for name, identity, camera in zip(names, identities, cameras)
    ]


# ==================== Scoring ====================

def similarity_matrix(queries, gallery, metric='dot'):
    """
    Pairwise scores, higher is more similar.

    ``dot`` L2-normalizes both sides (cosine similarity); ``euclidean``
    returns the negated Euclidean distance.
    """
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise EvaluationError(f"query and gallery widths differ: {q.shape} vs {g.shape}")
    if metric == 'dot':
        q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        return q @ g.T
    if metric == 'euclidean':
        sq = np.sum(q * q, axis=1)[:, None] + np.sum(g * g, axis=1)[None, :] - 2.0 * q @ g.T
        return -np.sqrt(np.maximum(sq, 0.0))
    raise EvaluationError(f"unknown similarity metric {metric!r}")


def _filtered_matches(row, q_id, q_cam, g_ids, g_cams):
    """Gallery order by descending score and the match flags of the kept entries."""
    order = np.argsort(-row, kind='stable')
    junk = (g_ids[order] == q_id) & (g_cams[order] == q_cam)
    kept = order[~junk]
    return order, g_ids[kept] == q_id


def _check(scores, q_ids, g_ids, q_cams, g_cams):
    scores = np.asarray(scores, dtype=np.float64)
    arrays = [np.asarray(a) for a in (q_ids, g_ids, q_cams, g_cams)]
    if scores.ndim != 2 or scores.shape != (arrays[0].size, arrays[1].size) \
            or arrays[2].size != arrays[0].size or arrays[3].size != arrays[1].size:
        raise EvaluationError(
            f"score matrix {scores.shape} does not match {arrays[0].size} queries "
            f"and {arrays[1].size} gallery items")
    return (scores, *arrays)


def evaluate_rankings(scores, q_ids, g_ids, q_cams, g_cams, ranks=DEFAULT_RANKS):
    """
    Rank the gallery for every query and compute CMC and mAP.

    Same-identity same-camera gallery entries are removed per query; a
    query left without a correct match is excluded and tallied.

    Returns:
        RankingResult (average_precision is NaN for excluded queries)
    """
    scores, q_ids, g_ids, q_cams, g_cams = _check(scores, q_ids, g_ids, q_cams, g_cams)
    ranks = sorted({int(r) for r in ranks})
    if not ranks or ranks[0] < 1:
        raise EvaluationError(f"ranks must be >= 1, got {ranks}")

    orders, aps, hits = [], [], {r: 0 for r in ranks}
    excluded = 0
    for i in range(scores.shape[0]):
        order, matches = _filtered_matches(scores[i], q_ids[i], q_cams[i], g_ids, g_cams)
        orders.append(order)
        if not matches.any():
            excluded += 1
            aps.append(np.nan)
            continue
        positions = np.flatnonzero(matches)
        precision = np.arange(1, positions.size + 1) / (positions + 1.0)
        aps.append(float(precision.mean()))
        for r in ranks:
            if positions[0] < r:
                hits[r] += 1

    valid = scores.shape[0] - excluded
    if excluded:
        logger.warning("%d of %d queries have no valid gallery match and are excluded",
                       excluded, scores.shape[0])
    cmc = {r: (hits[r] / valid if valid else 0.0) for r in ranks}
    aps = np.array(aps, dtype=np.float64)
    mean_ap = float(np.nanmean(aps)) if valid else 0.0
    return RankingResult(orders, aps, cmc, mean_ap, excluded, scores.shape[0], scores.shape[1])


def compute_cmc(scores, q_ids, g_ids, q_cams, g_cams, ranks=DEFAULT_RANKS):
    """CMC values per rank and the exclusion tally."""
    result = evaluate_rankings(scores, q_ids, g_ids, q_cams, g_cams, ranks)
    return result.cmc, result.excluded


def compute_map(scores, q_ids, g_ids, q_cams, g_cams):
    """Mean average precision over valid queries and the exclusion tally."""
    result = evaluate_rankings(scores, q_ids, g_ids, q_cams, g_cams, ranks=(1,))
    return result.mean_ap, result.excluded


def top_matches(scores, query_index, gallery_records, k=10):
    """(tracklet_id, identity, camera, score) of the k best gallery items for one query."""
    row = np.asarray(scores)[query_index]
    order = np.argsort(-row, kind='stable')[:k]
    return [(gallery_records[j].tracklet_id, gallery_records[j].identity_id,
             gallery_records[j].camera_id, float(row[j])) for j in order]


# ==================== Reports ====================

def format_summary(result, title='retrieval'):
    lines = [
        f"{title}: {result.num_queries} queries, {result.num_gallery} gallery items, "
        f"{result.excluded} excluded",
        f"  mAP   {result.mean_ap:.4f}",
    ]
    lines.extend(f"  R-{rank:<3d} {value:.4f}" for rank, value in result.cmc.items())
    return '\n'.join(lines)


def write_report(result, output_dir, extra=None):
    """
    Write ``cmc.csv`` (rank,value) and ``summary.yaml``.

    Args:
        result: RankingResult
        output_dir: report directory (created if missing)
        extra: additional summary fields (e.g. re-ranking parameters)

    Returns:
        (csv path, yaml path)
    """
    output_dir = Path(output_dir)
    summary = {
        'mAP': round(result.mean_ap, 6),
        'cmc': {int(r): round(v, 6) for r, v in result.cmc.items()},
        'excluded_queries': int(result.excluded),
        'num_queries': int(result.num_queries),
        'num_gallery': int(result.num_gallery),
    }
    summary.update(extra or {})
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        csv_path = output_dir / 'cmc.csv'
        with open(csv_path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(['rank', 'value'])
            for rank, value in result.cmc.items():
                writer.writerow([rank, f'{value:.6f}'])
        yaml_path = output_dir / 'summary.yaml'
        yaml_path.write_text(yaml.safe_dump(summary, sort_keys=False), encoding='utf-8')
    except OSError as e:
        raise ExportError(f"cannot write report to {output_dir}: {e}") from e
    return csv_path, yaml_path
