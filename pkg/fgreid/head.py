"""
Embedding head: dimension reduction, global feature module, fine-grained
spatial attention, shared query/key non-local context block and a shared
classifier over both branches.

Operations accept feature maps with any number of leading batch axes in
front of (t, h, w, c). ``forward`` runs the whole head on a batch of clips
and honours the ablation switches carried by HeadConfig.
"""

import logging

import numpy as np

from .exceptions import ConfigurationError, ShapeError
from .numerics import (
    BatchNormParams, ProjectionParams, batch_norm, channel_project, l2_normalize,
    mean_pool, softmax_axis,
)
from .tensor import Tensor, as_tensor, concat, matmul, relu, sigmoid, swap_last

logger = logging.getLogger(__name__)

PROJECTIONS = ('reduce_coarse', 'reduce_fine', 'theta', 'delta', 'beta_proj', 'k_proj')
BATCH_NORMS = ('bn_coarse', 'bn_fine')
CLASSIFIER = 'classifier'
BACKBONE_PREFIX = 'backbone.'

# Prefix of the clip-level feature axes (t, h, w, c).
_CLIP_AXES = (-4, -3, -2, -1)


class HeadConfig:
    """Widths and ablation switches of the head."""

    def __init__(self, c_backbone=2048, c_star=1024, num_classes=1,
                 use_channel_weights=True, use_nonlocal=True, distinct_kq=False,
                 use_gfm=True, use_fgm=True, shared_backbone=False, bn_affine=True):
        for name, value in (('c_backbone', c_backbone), ('c_star', c_star),
                            ('num_classes', num_classes)):
            if int(value) < 1:
                raise ConfigurationError(f"head {name} must be >= 1, got {value}")
        if c_star % 4:
            raise ConfigurationError(f"head c_star must be divisible by 4, got {c_star}")
        self.c_backbone = int(c_backbone)
        self.c_star = int(c_star)
        self.num_classes = int(num_classes)
        self.use_channel_weights = bool(use_channel_weights)
        self.use_nonlocal = bool(use_nonlocal)
        self.distinct_kq = bool(distinct_kq)
        self.use_gfm = bool(use_gfm)
        self.use_fgm = bool(use_fgm)
        self.shared_backbone = bool(shared_backbone)
        self.bn_affine = bool(bn_affine)
        if not (self.use_gfm or self.has_fine_branch):
            raise ConfigurationError(
                "head flags disable both branches; enable use_gfm, use_fgm or use_nonlocal")

    @property
    def c_bar(self):
        return self.c_star // 4

    @property
    def has_fine_branch(self):
        return self.use_fgm or self.use_nonlocal

    @property
    def needs_coarse_features(self):
        """Coarse features feed the global branch and the attention maps."""
        return self.use_gfm or (self.has_fine_branch and self.use_fgm)

    @property
    def embedding_dim(self):
        return self.c_star * (int(self.use_gfm) + int(self.has_fine_branch))

    def as_dict(self):
        return dict(vars(self))

    def replace(self, **changes):
        values = self.as_dict()
        values.update(changes)
        return HeadConfig(**values)

    @classmethod
    def from_run_config(cls, cfg, num_classes=None):
        head = cfg.section('head')
        classes = num_classes if num_classes is not None else head['num_classes']
        return cls(
            c_backbone=head['c_backbone'], c_star=head['c_star'], num_classes=classes or 1,
            use_channel_weights=head['use_channel_weights'], use_nonlocal=head['use_nonlocal'],
            distinct_kq=head['distinct_kq'], use_gfm=head['use_gfm'], use_fgm=head['use_fgm'],
            shared_backbone=head['shared_backbone'], bn_affine=head['bn_affine'],
        )


class HeadParameters:
    """
    Flat name -> array store of every learnable weight.

    Trainable arrays live in ``arrays`` under ``<layer>.<field>`` names
    (``theta.weight``, ``bn_fine.gamma``); batch-norm running statistics
    live in ``buffers``. Backbone stages share the store under the
    ``backbone.`` prefix.
    """

    def __init__(self, arrays=None, buffers=None):
        self.arrays = dict(arrays or {})
        self.buffers = dict(buffers or {})

    def has(self, layer):
        return any(name.startswith(layer + '.') for name in self.arrays) or \
            any(name.startswith(layer + '.') for name in self.buffers)

    def projection(self, layer):
        try:
            return ProjectionParams(self.arrays[f'{layer}.weight'], self.arrays[f'{layer}.bias'])
        except KeyError:
            raise ShapeError(f"head parameters have no projection {layer!r}") from None

    def batch_norm(self, layer, momentum=0.1, epsilon=1e-5):
        try:
            return BatchNormParams(
                self.arrays.get(f'{layer}.gamma'), self.arrays.get(f'{layer}.beta'),
                self.buffers[f'{layer}.running_mean'], self.buffers[f'{layer}.running_var'],
                momentum=momentum, epsilon=epsilon)
        except KeyError:
            raise ShapeError(f"head parameters have no batch norm {layer!r}") from None

    def bind(self):
        """Same weights as gradient-tracking leaves; buffers are shared."""
        bound = {
            name: Tensor(value.data if isinstance(value, Tensor) else value, requires_grad=True)
            for name, value in self.arrays.items()
        }
        return HeadParameters(bound, self.buffers)

    def numpy_arrays(self):
        return {name: as_tensor(value).data for name, value in self.arrays.items()}

    def copy(self):
        return HeadParameters(
            {name: np.array(value) for name, value in self.numpy_arrays().items()},
            {name: np.array(value) for name, value in self.buffers.items()},
        )


class EmbeddingBundle:
    """Per-clip outputs of ``forward``; absent branches are None."""

    def __init__(self, f_hat_coarse, f_hat_fine, f_star, y1, y2, a_maps, trace=None):
        self.f_hat_coarse = f_hat_coarse
        self.f_hat_fine = f_hat_fine
        self.f_star = f_star
        self.y1 = y1
        self.y2 = y2
        self.a_maps = a_maps
        self.trace = trace

    @property
    def predictions(self):
        return [y for y in (self.y1, self.y2) if y is not None]


class IntermediateTrace:
    """Detached intermediates of one forward pass (ndarrays, None if skipped)."""

    def __init__(self, a_gap=None, s_channel=None, a1=None, a2=None, a3=None, w_affinity=None):
        self.a_gap = a_gap
        self.s_channel = s_channel
        self.a1 = a1
        self.a2 = a2
        self.a3 = a3
        self.w_affinity = w_affinity


# ==================== Initialization ====================

def _projection_arrays(rng, name, c_in, c_out, std=None):
    std = np.sqrt(2.0 / c_in) if std is None else std
    weight = (rng.standard_normal((c_in, c_out)) * std).astype(np.float32)
    return {f'{name}.weight': weight, f'{name}.bias': np.zeros(c_out, dtype=np.float32)}


def layer_names(config):
    """Projection, classifier and batch-norm layers present under ``config``."""
    projections = []
    if config.needs_coarse_features:
        projections.append('reduce_coarse')
    if config.has_fine_branch:
        projections.append('reduce_fine')
        if config.use_nonlocal:
            projections.extend(['theta', 'delta', 'beta_proj'])
            if config.distinct_kq:
                projections.append('k_proj')
    norms = []
    if config.use_gfm:
        norms.append('bn_coarse')
    if config.has_fine_branch:
        norms.append('bn_fine')
    return projections, [CLASSIFIER], norms


def init_head_parameters(config, rng):
    """
    Draw initial head weights.

    Projections use He-normal weights, the non-local output projection starts
    at zero (the block starts as the identity), the classifier is N(0, 0.001)
    and batch norms start at gamma=1, beta=0 with running stats (0, 1).

    Args:
        config: HeadConfig
        rng: numpy Generator

    Returns:
        HeadParameters
    """
    c_in = {'reduce_coarse': config.c_backbone, 'reduce_fine': config.c_backbone,
            'theta': config.c_star, 'delta': config.c_star, 'k_proj': config.c_star,
            'beta_proj': config.c_bar}
    c_out = {'reduce_coarse': config.c_star, 'reduce_fine': config.c_star,
             'theta': config.c_bar, 'delta': config.c_bar, 'k_proj': config.c_bar,
             'beta_proj': config.c_star}

    projections, _, norms = layer_names(config)
    arrays, buffers = {}, {}
    for name in projections:
        std = 0.0 if name == 'beta_proj' else None
        arrays.update(_projection_arrays(rng, name, c_in[name], c_out[name], std=std))
    arrays.update(_projection_arrays(rng, CLASSIFIER, config.c_star, config.num_classes, std=0.001))
    for name in norms:
        if config.bn_affine:
            arrays[f'{name}.gamma'] = np.ones(config.c_star, dtype=np.float32)
            arrays[f'{name}.beta'] = np.zeros(config.c_star, dtype=np.float32)
        buffers[f'{name}.running_mean'] = np.zeros(config.c_star, dtype=np.float32)
        buffers[f'{name}.running_var'] = np.ones(config.c_star, dtype=np.float32)

    logger.debug("initialized head layers: %s", ', '.join(projections + norms + [CLASSIFIER]))
    return HeadParameters(arrays, buffers)


# ==================== Module operations ====================

def channel_weights(a_gap):
    """Per-frame softmax over channels of the spatially pooled features."""
    return softmax_axis(a_gap, axis=-1)


def attention_maps(f_coarse_reduced, s_channel):
    """
    Parameterless spatial attention.

    The reduced coarse features are shifted by their minimum over the whole
    clip, weighted per frame by ``s_channel`` and summed over channels;
    a sigmoid maps the result into (0, 1).

    Args:
        f_coarse_reduced: (..., t, h, w, c*)
        s_channel: (..., t, c*)

    Returns:
        Tensor (..., t, h, w, 1)
    """
    f = as_tensor(f_coarse_reduced)
    s = as_tensor(s_channel)
    if f.ndim < 4:
        raise ShapeError(f"feature map must have rank >= 4, got {f.ndim}")
    expected = f.shape[:-3] + (f.shape[-1],)
    if s.shape != expected:
        raise ShapeError(f"channel weights {s.shape} do not match feature map {f.shape}")
    lowest = f.min(axis=_CLIP_AXES, keepdims=True)
    shifted = f - lowest
    weights = s.reshape(s.shape[:-1] + (1, 1, s.shape[-1]))
    return sigmoid((shifted * weights).sum(axis=-1, keepdims=True))


def apply_attention(f_fine_reduced, a_maps):
    """Scale every channel of each position by its attention value."""
    f = as_tensor(f_fine_reduced)
    a = as_tensor(a_maps)
    if a.ndim == f.ndim - 1:
        a = a.reshape(a.shape + (1,))
    if a.shape[:-1] != f.shape[:-1] or a.shape[-1] != 1:
        raise ShapeError(f"attention maps {a.shape} do not match feature map {f.shape}")
    return f * a


def nonlocal_block(a1, params, distinct_kq=False):
    """
    Non-local context block over all t*h*w positions.

    Queries and keys share the theta projection (a separate ``k_proj`` is
    used when ``distinct_kq``); both are relu'd, flattened over positions and
    L2-normalized per position. W = softmax(Q K^T) row-wise (rows are
    queries), V_avg = W V, and the beta projection restores c* channels
    before the residual sum.

    Args:
        a1: (..., t, h, w, c*)
        params: HeadParameters holding theta, delta, beta_proj (and k_proj)
        distinct_kq: use the separate key projection

    Returns:
        (a2, w_affinity) with a2 shaped like a1 and w_affinity (..., n, n)
    """
    a1 = as_tensor(a1)
    if a1.ndim < 4:
        raise ShapeError(f"feature map must have rank >= 4, got {a1.ndim}")
    lead = a1.shape[:-4]
    t, h, w, _ = a1.shape[-4:]
    n = t * h * w

    def embed(layer):
        projected = relu(channel_project(a1, params.projection(layer)))
        return projected.reshape(lead + (n, projected.shape[-1]))

    query = l2_normalize(embed('theta'), axis=-1)
    key = l2_normalize(embed('k_proj'), axis=-1) if distinct_kq else query
    value = embed('delta')

    affinity = softmax_axis(matmul(query, swap_last(key)), axis=-1)
    v_avg = matmul(affinity, value).reshape(lead + (t, h, w, value.shape[-1]))
    a2 = channel_project(v_avg, params.projection('beta_proj')) + a1
    return a2, affinity


def attentive_pool(a2, a_maps):
    """Attention-normalized spatial sum: sum_hw a2 / sum_hw a_maps, per frame."""
    a2 = as_tensor(a2)
    a = as_tensor(a_maps)
    if a.ndim == a2.ndim - 1:
        a = a.reshape(a.shape + (1,))
    if a.shape[:-1] != a2.shape[:-1]:
        raise ShapeError(f"attention maps {a.shape} do not match feature map {a2.shape}")
    return a2.sum(axis=(-3, -2)) / a.sum(axis=(-3, -2))


def _normalize_clips(pooled, bn, mode):
    if pooled.ndim == 1:
        return batch_norm(pooled.reshape(1, pooled.shape[0]), bn, mode).reshape(pooled.shape)
    return batch_norm(pooled, bn, mode)


def global_feature(f_coarse_reduced, bn, mode='train'):
    """
    Global feature module: spatial mean per frame, temporal mean, batch norm.

    Returns:
        (f_hat_coarse, a_gap) where a_gap is (..., t, c*) and also feeds the
        channel weights.
    """
    a_gap = mean_pool(f_coarse_reduced, {'h', 'w'})
    return _normalize_clips(a_gap.mean(axis=-2), bn, mode), a_gap


def finalize_fine(a3, bn, mode='train'):
    """Temporal mean of the attentively pooled frames, then batch norm."""
    a3 = as_tensor(a3)
    if a3.ndim < 2:
        raise ShapeError(f"pooled frames must be (t, c), got {a3.shape}")
    return _normalize_clips(a3.mean(axis=-2), bn, mode)


def classify(f_hat, classifier):
    """Softmax class probabilities; the same classifier serves both branches."""
    return softmax_axis(channel_project(as_tensor(f_hat), classifier), axis=-1)


def _check_inputs(f_coarse_raw, f_fine_raw, config):
    present = [f for f in (f_coarse_raw, f_fine_raw) if f is not None]
    if not present:
        raise ShapeError("forward needs at least one feature map")
    shapes = {f.shape[:-1] for f in present}
    if len(shapes) > 1:
        raise ShapeError(
            f"coarse {f_coarse_raw.shape} and fine {f_fine_raw.shape} inputs differ in (t, h, w)")
    for f in present:
        if f.ndim != 5:
            raise ShapeError(f"forward expects (batch, t, h, w, c) inputs, got {f.shape}")
        if f.shape[-1] != config.c_backbone:
            raise ShapeError(
                f"backbone features have {f.shape[-1]} channels, head expects {config.c_backbone}")
    if config.needs_coarse_features and f_coarse_raw is None:
        raise ShapeError("this head configuration needs coarse features")
    if config.has_fine_branch and f_fine_raw is None:
        raise ShapeError("this head configuration needs fine features")


def forward(f_coarse_raw, f_fine_raw, params, config, mode='train', trace=False):
    """
    Run the head on a batch of clips.

    Args:
        f_coarse_raw: (batch, t, h, w, c_backbone) coarse backbone features,
            or a single clip without the batch axis
        f_fine_raw: same for the fine branch (may be None when the fine
            branch is disabled)
        params: HeadParameters (plain or bound)
        config: HeadConfig
        mode: 'train' (batch statistics) or 'infer' (running statistics)
        trace: record an IntermediateTrace on the bundle

    Returns:
        EmbeddingBundle

    Raises:
        ShapeError: inputs disagree in (t, h, w) or channel count
    """
    f_coarse_raw = None if f_coarse_raw is None else as_tensor(f_coarse_raw)
    f_fine_raw = None if f_fine_raw is None else as_tensor(f_fine_raw)
    single = any(f is not None and f.ndim == 4 for f in (f_coarse_raw, f_fine_raw))
    if single:
        f_coarse_raw = None if f_coarse_raw is None else f_coarse_raw.reshape((1,) + f_coarse_raw.shape)
        f_fine_raw = None if f_fine_raw is None else f_fine_raw.reshape((1,) + f_fine_raw.shape)
    _check_inputs(f_coarse_raw, f_fine_raw, config)

    recorded = IntermediateTrace() if trace else None
    classifier = params.projection(CLASSIFIER)
    f_hat_coarse = f_hat_fine = y1 = y2 = a_maps = None

    f_coarse = a_gap = None
    if config.needs_coarse_features:
        f_coarse = channel_project(f_coarse_raw, params.projection('reduce_coarse'))
        a_gap = mean_pool(f_coarse, {'h', 'w'})
        if recorded:
            recorded.a_gap = a_gap.data

    if config.use_gfm:
        f_hat_coarse, _ = global_feature(f_coarse, params.batch_norm('bn_coarse'), mode)
        y1 = classify(f_hat_coarse, classifier)

    if config.has_fine_branch:
        f_fine = channel_project(f_fine_raw, params.projection('reduce_fine'))
        if config.use_fgm:
            if config.use_channel_weights:
                s_channel = channel_weights(a_gap)
            else:
                s_channel = Tensor(np.full(a_gap.shape, 1.0 / config.c_star, dtype=a_gap.dtype))
            a_maps = attention_maps(f_coarse, s_channel)
            if recorded:
                recorded.s_channel = s_channel.data
        else:
            a_maps = Tensor(np.ones(f_fine.shape[:-1] + (1,), dtype=f_fine.dtype))

        a1 = apply_attention(f_fine, a_maps)
        if config.use_nonlocal:
            a2, affinity = nonlocal_block(a1, params, config.distinct_kq)
        else:
            a2, affinity = a1, None
        a3 = attentive_pool(a2, a_maps)
        f_hat_fine = finalize_fine(a3, params.batch_norm('bn_fine'), mode)
        y2 = classify(f_hat_fine, classifier)
        if recorded:
            recorded.a1, recorded.a2, recorded.a3 = a1.data, a2.data, a3.data
            recorded.w_affinity = None if affinity is None else affinity.data

    parts = [f for f in (f_hat_coarse, f_hat_fine) if f is not None]
    f_star = parts[0] if len(parts) == 1 else concat(parts, axis=-1)

    bundle = EmbeddingBundle(f_hat_coarse, f_hat_fine, f_star, y1, y2, a_maps, recorded)
    if single:
        _squeeze_bundle(bundle)
    return bundle


def _squeeze_bundle(bundle):
    for field in ('f_hat_coarse', 'f_hat_fine', 'f_star', 'y1', 'y2', 'a_maps'):
        value = getattr(bundle, field)
        if value is not None:
            setattr(bundle, field, value.reshape(value.shape[1:]))


# ==================== Accounting ====================

def _layer_of(name):
    return name.rsplit('.', 1)[0]


def param_count(params, config=None):
    """
    Exact trainable-parameter accounting.

    Batch norms count gamma and beta only; running statistics are not
    trainable.

    Args:
        params: HeadParameters
        config: optional HeadConfig; enables the analytic deltas

    Returns:
        dict with ``components`` (layer -> count), ``head_total``,
        ``backbone_total``, ``total``, and when ``config`` is given
        ``kqv_delta`` (extra parameters of a separate key projection) and
        ``branch_sharing_saving`` (parameters saved if both branches shared
        one reduction and one batch norm)
    """
    components = {}
    for name, value in params.arrays.items():
        layer = _layer_of(name)
        components[layer] = components.get(layer, 0) + int(as_tensor(value).size)

    backbone_total = sum(n for layer, n in components.items() if layer.startswith(BACKBONE_PREFIX))
    head_total = sum(components.values()) - backbone_total
    report = {
        'components': dict(sorted(components.items())),
        'head_total': head_total,
        'backbone_total': backbone_total,
        'total': head_total + backbone_total,
    }
    if config is not None:
        report['kqv_delta'] = config.c_star * config.c_bar + config.c_bar
        shared = 0
        if config.use_gfm and config.has_fine_branch:
            shared = config.c_backbone * config.c_star + config.c_star
            if config.bn_affine:
                shared += 2 * config.c_star
        report['branch_sharing_saving'] = shared
    return report


def analytic_param_count(config):
    """Closed-form head parameter count (backbones excluded)."""
    def proj(c_in, c_out):
        return c_in * c_out + c_out

    projections, _, norms = layer_names(config)
    widths = {
        'reduce_coarse': (config.c_backbone, config.c_star),
        'reduce_fine': (config.c_backbone, config.c_star),
        'theta': (config.c_star, config.c_bar), 'delta': (config.c_star, config.c_bar),
        'k_proj': (config.c_star, config.c_bar), 'beta_proj': (config.c_bar, config.c_star),
    }
    total = sum(proj(*widths[name]) for name in projections)
    total += proj(config.c_star, config.num_classes)
    if config.bn_affine:
        total += 2 * config.c_star * len(norms)
    return total


def describe_layers(params):
    """Structural audit: which projection, classifier and batch-norm layers exist."""
    layers = {_layer_of(name) for name in params.arrays} | {_layer_of(name) for name in params.buffers}
    return {
        'projections': [name for name in PROJECTIONS if name in layers],
        'classifiers': [CLASSIFIER] if CLASSIFIER in layers else [],
        'batch_norms': [name for name in BATCH_NORMS if name in layers],
    }
