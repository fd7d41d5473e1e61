"""
Training losses and their weighted combination.

Every loss takes a batch of embeddings or class probabilities as Tensors
plus integer labels and returns a scalar Tensor averaged over the batch.
"""

import logging

import numpy as np

from .exceptions import LossPreconditionError, ShapeError
from .numerics import l2_normalize
from .tensor import Tensor, as_tensor, clamp_min, log

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
DISTANCE_EPSILON = 1e-12

# Fixed summation order of the total loss.
TERMS = ('ce', 'triplet', 'osm', 'var', 'center', 'kl', 'sr')


class LossWeights:
    """Mixing coefficients, per-loss hyperparameters and enable flags."""

    def __init__(self, beta_mix=0.5, w_var=0.01, w_center=0.0005, w_kl=1.0, w_sr=1.0,
                 smoothing_eps=0.1, triplet_margin=0.3, sr_margin=0.05,
                 osm_sigma=0.8, osm_margin=1.2, center_update_rate=0.5,
                 kl_reverse=False, enabled=None):
        if not 0.0 <= beta_mix <= 1.0:
            raise LossPreconditionError(f"beta_mix must be in [0, 1], got {beta_mix}")
        for name, value in (('w_var', w_var), ('w_center', w_center), ('w_kl', w_kl),
                            ('w_sr', w_sr), ('sr_margin', sr_margin)):
            if value < 0:
                raise LossPreconditionError(f"{name} must be >= 0, got {value}")
        if not 0.0 <= smoothing_eps < 1.0:
            raise LossPreconditionError(f"smoothing_eps must be in [0, 1), got {smoothing_eps}")
        if triplet_margin <= 0 or osm_sigma <= 0 or osm_margin <= 0:
            raise LossPreconditionError("triplet_margin, osm_sigma and osm_margin must be > 0")
        if not 0.0 < center_update_rate <= 1.0:
            raise LossPreconditionError(
                f"center_update_rate must be in (0, 1], got {center_update_rate}")
        unknown = set(enabled or {}) - set(TERMS)
        if unknown:
            raise LossPreconditionError(f"unknown loss terms: {sorted(unknown)}")

        self.beta_mix = float(beta_mix)
        self.w_var = float(w_var)
        self.w_center = float(w_center)
        self.w_kl = float(w_kl)
        self.w_sr = float(w_sr)
        self.smoothing_eps = float(smoothing_eps)
        self.triplet_margin = float(triplet_margin)
        self.sr_margin = float(sr_margin)
        self.osm_sigma = float(osm_sigma)
        self.osm_margin = float(osm_margin)
        self.center_update_rate = float(center_update_rate)
        self.kl_reverse = bool(kl_reverse)
        self.enabled = {term: True for term in TERMS}
        self.enabled.update(enabled or {})

    def coefficient(self, term):
        return {
            'ce': 1.0,
            'triplet': 1.0 - self.beta_mix,
            'osm': self.beta_mix,
            'var': self.w_var,
            'center': self.w_center,
            'kl': self.w_kl,
            'sr': self.w_sr,
        }[term]

    def is_enabled(self, term):
        return self.enabled[term]

    @classmethod
    def from_run_config(cls, cfg):
        loss = cfg.section('loss')
        return cls(
            beta_mix=loss['beta_mix'], w_var=loss['w_var'], w_center=loss['w_center'],
            w_kl=loss['w_kl'], w_sr=loss['w_sr'], smoothing_eps=loss['smoothing_eps'],
            triplet_margin=loss['triplet_margin'], sr_margin=loss['sr_margin'],
            osm_sigma=loss['osm_sigma'], osm_margin=loss['osm_margin'],
            center_update_rate=loss['center_update_rate'], kl_reverse=loss['kl_reverse'],
            enabled={term: loss[f'enable_{term}'] for term in TERMS},
        )


class ClassCenters:
    """One running center per class in embedding space."""

    def __init__(self, centers, update_rate=0.5):
        centers = np.array(centers, dtype=np.float32)
        if centers.ndim != 2:
            raise ShapeError(f"centers must be (num_classes, dim), got {centers.shape}")
        if not np.all(np.isfinite(centers)):
            raise LossPreconditionError("class centers must be finite")
        if not 0.0 < update_rate <= 1.0:
            raise LossPreconditionError(f"update_rate must be in (0, 1], got {update_rate}")
        self.centers = centers
        self.update_rate = float(update_rate)

    @classmethod
    def zeros(cls, num_classes, dim, update_rate=0.5):
        return cls(np.zeros((num_classes, dim), dtype=np.float32), update_rate)

    @property
    def num_classes(self):
        return self.centers.shape[0]


class LossResult:
    """Total loss tensor with its weighted per-term breakdown."""

    def __init__(self, tensor, breakdown):
        self.tensor = tensor
        self.breakdown = breakdown
        self.value = sum(breakdown.values())


def _labels(labels, batch, num_classes=None):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != batch:
        raise LossPreconditionError(f"expected {batch} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LossPreconditionError("labels must be integers")
    if labels.size and labels.min() < 0:
        raise LossPreconditionError("labels must be >= 0")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise LossPreconditionError(f"label {labels.max()} outside {num_classes} classes")
    return labels


def _as_batch(x):
    x = as_tensor(x)
    return (x.reshape(1, x.shape[0]), True) if x.ndim == 1 else (x, False)


def _center_array(centers):
    return centers.centers if isinstance(centers, ClassCenters) else np.asarray(centers, dtype=np.float32)


def pairwise_distances(embeddings, squared=False):
    """Euclidean distances between all rows; sqrt(d^2 + 1e-12) keeps the gradient finite."""
    e = as_tensor(embeddings)
    b, d = e.shape
    diff = e.reshape(b, 1, d) - e.reshape(1, b, d)
    sq = (diff * diff).sum(axis=-1)
    return sq if squared else (sq + DISTANCE_EPSILON).sqrt()


# ==================== Classification ====================

def ce_label_smooth(y, label, eps=0.1):
    """
    Cross-entropy against an eps-smoothed one-hot target.

    Args:
        y: probabilities (N,) or (batch, N)
        label: class id or (batch,) ids
        eps: smoothing mass spread uniformly over all N classes

    Returns:
        Scalar Tensor (batch mean)
    """
    y, _ = _as_batch(y)
    batch, classes = y.shape
    labels = _labels(np.atleast_1d(label), batch, classes)
    target = np.full((batch, classes), eps / classes, dtype=np.float64)
    target[np.arange(batch), labels] += 1.0 - eps
    per_sample = -(log(y, floor=LOG_FLOOR) * target.astype(y.dtype)).sum(axis=-1)
    return per_sample.mean()


def ce_avg(y1, y2, label, eps=0.1):
    """Mean of the smoothed cross-entropy over whichever predictions exist."""
    present = [y for y in (y1, y2) if y is not None]
    if not present:
        raise LossPreconditionError("ce_avg needs at least one prediction")
    total = ce_label_smooth(present[0], label, eps)
    for y in present[1:]:
        total = total + ce_label_smooth(y, label, eps)
    return total / float(len(present))


# ==================== Metric learning ====================

def batch_hard_triplet(embeddings, labels, margin=0.3):
    """
    Batch-hard triplet loss.

    For each anchor: hinge(max positive distance - min negative distance + margin),
    averaged over anchors.

    Raises:
        LossPreconditionError: fewer than two classes or a class with one instance
    """
    e = as_tensor(embeddings)
    labels = _labels(labels, e.shape[0])
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise LossPreconditionError("batch-hard triplet needs at least two classes in the batch")
    if counts.min() < 2:
        raise LossPreconditionError(
            f"batch-hard triplet needs >= 2 instances per class; class {classes[counts.argmin()]} has 1")

    dist = pairwise_distances(e)
    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(labels.size, dtype=bool)
    if not (positive.any(axis=1).all() and (~same).any(axis=1).all()):
        raise LossPreconditionError("every anchor needs a positive and a negative in the batch")
    rows = np.arange(labels.size)
    pos_index = np.where(positive, dist.data, -np.inf).argmax(axis=1)
    neg_index = np.where(same, np.inf, dist.data).argmin(axis=1)
    hardest_pos = dist[rows, pos_index]
    hardest_neg = dist[rows, neg_index]
    return clamp_min(hardest_pos - hardest_neg + margin, 0.0).mean()


def center_loss(embeddings, labels, centers):
    """Mean squared Euclidean distance of each embedding to its class center."""
    e = as_tensor(embeddings)
    c = _center_array(centers)
    labels = _labels(labels, e.shape[0], c.shape[0])
    if c.shape[1] != e.shape[1]:
        raise ShapeError(f"centers have width {c.shape[1]}, embeddings {e.shape[1]}")
    diff = e - c[labels].astype(e.dtype)
    return (diff * diff).sum(axis=-1).mean()


def update_centers(embeddings, labels, centers):
    """
    Move every class center present in the batch toward its batch mean.

    c <- c + update_rate * (mean_batch - c). Mutates and returns ``centers``.
    """
    e = np.asarray(as_tensor(embeddings).data, dtype=np.float64)
    labels = _labels(labels, e.shape[0], centers.num_classes)
    for cls in np.unique(labels):
        batch_mean = e[labels == cls].mean(axis=0)
        current = centers.centers[cls].astype(np.float64)
        centers.centers[cls] = current + centers.update_rate * (batch_mean - current)
    return centers


def osm_cl(embeddings, labels, centers, sigma=0.8, margin=1.2):
    """
    Online soft-mining contrastive loss with class-center attention.

    Embeddings and centers are L2-normalized. For each pair with distance d:
    positives weigh exp(-d^2/sigma^2), negatives exp(-max(0, margin - d)^2/sigma^2),
    and both are scaled by a_i * a_j with a_i = exp(-||f_i - c_i||^2 / sigma^2).
    The loss is half the sum of the weighted mean positive d^2 and the
    weighted mean negative hinge^2.
    """
    e = l2_normalize(as_tensor(embeddings), axis=-1)
    c = _center_array(centers)
    labels = _labels(labels, e.shape[0], c.shape[0])
    if c.shape[1] != e.shape[1]:
        raise ShapeError(f"centers have width {c.shape[1]}, embeddings {e.shape[1]}")
    own = c[labels].astype(np.float64)
    own = own / np.maximum(np.linalg.norm(own, axis=1, keepdims=True), 1e-12)

    s2 = sigma * sigma
    batch = labels.size
    sq = pairwise_distances(e, squared=True)
    dist = (sq + DISTANCE_EPSILON).sqrt()

    to_center = e - own.astype(e.dtype)
    attention = ((to_center * to_center).sum(axis=-1) * (-1.0 / s2)).exp()
    pair_attention = attention.reshape(batch, 1) * attention.reshape(1, batch)

    same = labels[:, None] == labels[None, :]
    positive = (same & ~np.eye(batch, dtype=bool)).astype(e.dtype)
    negative = (~same).astype(e.dtype)

    hinge = clamp_min(margin - dist, 0.0)
    hinge_sq = hinge * hinge
    w_pos = (sq * (-1.0 / s2)).exp() * pair_attention * positive
    w_neg = (hinge_sq * (-1.0 / s2)).exp() * pair_attention * negative

    pos_term = (w_pos * sq).sum() / (w_pos.sum() + DISTANCE_EPSILON)
    neg_term = (w_neg * hinge_sq).sum() / (w_neg.sum() + DISTANCE_EPSILON)
    return (pos_term + neg_term) * 0.5


def variance_reg(embeddings, labels):
    """
    Within-class variance: per class, mean over instances of the squared
    deviation from the class mean summed over dimensions; summed over classes.
    """
    e = as_tensor(embeddings)
    labels = _labels(labels, e.shape[0])
    total = Tensor(np.zeros((), dtype=e.dtype))
    for cls in np.unique(labels):
        index = np.flatnonzero(labels == cls)
        if index.size < 2:
            continue
        members = e[index]
        deviation = members - members.mean(axis=0, keepdims=True)
        total = total + (deviation * deviation).sum(axis=-1).mean()
    return total


# ==================== Branch consistency ====================

def kl_consistency(y1, y2, reverse=False):
    """D_KL(y2 || y1) averaged over the batch (D_KL(y1 || y2) when ``reverse``)."""
    y1, _ = _as_batch(y1)
    y2, _ = _as_batch(y2)
    if y1.shape != y2.shape:
        raise ShapeError(f"prediction shapes differ: {y1.shape} vs {y2.shape}")
    target, model = (y1, y2) if reverse else (y2, y1)
    per_sample = (target * (log(target, floor=LOG_FLOOR) - log(model, floor=LOG_FLOOR))).sum(axis=-1)
    return per_sample.mean()


def satisfied_rank_terms(y1, y2, label, sr_margin=0.05):
    """
    Rank and limiting terms on the true-class probabilities.

    L_r = hinge(y1[label] - y2[label] + margin) keeps the coarse prediction
    from dominating the fine one; L_s = hinge(margin - y1[label]) keeps the
    coarse branch from collapsing.

    Returns:
        (L_r, L_s) scalar Tensors (batch means)
    """
    y1, _ = _as_batch(y1)
    y2, _ = _as_batch(y2)
    batch, classes = y1.shape
    labels = _labels(np.atleast_1d(label), batch, classes)
    rows = np.arange(batch)
    p1 = y1[rows, labels]
    p2 = y2[rows, labels]
    rank = clamp_min(p1 - p2 + sr_margin, 0.0).mean()
    limit = clamp_min(sr_margin - p1, 0.0).mean()
    return rank, limit


def satisfied_rank(y1, y2, label, sr_margin=0.05):
    rank, limit = satisfied_rank_terms(y1, y2, label, sr_margin)
    return rank + limit


# ==================== Combination ====================

def compute_components(bundle, labels, centers, weights):
    """
    Every enabled loss term that applies to ``bundle``.

    Terms needing both predictions are skipped when a branch is absent.

    Returns:
        dict term -> scalar Tensor, in TERMS order
    """
    f_star = bundle.f_star
    components = {}
    if weights.is_enabled('ce'):
        components['ce'] = ce_avg(bundle.y1, bundle.y2, labels, weights.smoothing_eps)
    if weights.is_enabled('triplet'):
        components['triplet'] = batch_hard_triplet(f_star, labels, weights.triplet_margin)
    if weights.is_enabled('osm'):
        components['osm'] = osm_cl(f_star, labels, centers, weights.osm_sigma, weights.osm_margin)
    if weights.is_enabled('var'):
        components['var'] = variance_reg(f_star, labels)
    if weights.is_enabled('center'):
        components['center'] = center_loss(f_star, labels, centers)
    both = bundle.y1 is not None and bundle.y2 is not None
    if both and weights.is_enabled('kl'):
        components['kl'] = kl_consistency(bundle.y1, bundle.y2, weights.kl_reverse)
    if both and weights.is_enabled('sr'):
        components['sr'] = satisfied_rank(bundle.y1, bundle.y2, labels, weights.sr_margin)
    return components


def total_loss(components, weights):
    """
    Weighted sum of the loss terms in the fixed TERMS order.

    Disabled or missing terms contribute nothing and are left out of the
    breakdown. ``result.value`` is the Python sum of the breakdown in order.

    Args:
        components: dict term -> scalar Tensor or float
        weights: LossWeights

    Returns:
        LossResult
    """
    unknown = set(components) - set(TERMS)
    if unknown:
        raise LossPreconditionError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    breakdown = {}
    for term in TERMS:
        if term not in components or not weights.is_enabled(term):
            continue
        value = as_tensor(components[term])
        weighted = value * weights.coefficient(term)
        breakdown[term] = float(value.item()) * weights.coefficient(term)
        total = weighted if total is None else total + weighted
    if total is None:
        total = Tensor(np.zeros((), dtype=np.float32))
    return LossResult(total, breakdown)
