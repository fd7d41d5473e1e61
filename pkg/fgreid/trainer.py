"""
Optimization loop: learning-rate schedule, optimizers, single training
steps, epochs over P x K batches, checkpoints and the metrics log.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .archive import decode_ids, encode_ids, read_archive, write_archive
from .exceptions import ArchiveError, ConfigurationError, ExportError, NonFiniteLossError
from .head import HeadConfig, HeadParameters
from .losses import TERMS, ClassCenters, LossWeights, compute_components, total_loss, update_centers
from .model import embed_frames, init_model
from .sampler import BatchSpec, iter_epoch_batches, label_map

logger = logging.getLogger(__name__)

OPTIMIZERS = ('adam', 'sgd')
METRIC_COLUMNS = ('epoch', 'lr') + TERMS + ('total',)


class TrainConfig:
    """Everything a training run needs besides the data."""

    def __init__(self, head, losses, batch, epochs=120, base_lr=3.5e-4, warmup_epochs=10,
                 decay_epochs=(40, 70), decay_factor=0.1, seed=0, optimizer='adam',
                 adam_beta1=0.9, adam_beta2=0.999, adam_eps=1e-8, weight_decay=5e-4,
                 momentum=0.9, backbone_channels=(32, 64), prefetch=False):
        if epochs < 0 or warmup_epochs < 0:
            raise ConfigurationError("epochs and warmup_epochs must be >= 0")
        if base_lr < 0 or weight_decay < 0:
            raise ConfigurationError("base_lr and weight_decay must be >= 0")
        if optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {optimizer!r}; choose from {', '.join(OPTIMIZERS)}")
        self.head = head
        self.losses = losses
        self.batch = batch
        self.epochs = int(epochs)
        self.base_lr = float(base_lr)
        self.warmup_epochs = int(warmup_epochs)
        self.decay_epochs = tuple(int(e) for e in decay_epochs)
        self.decay_factor = float(decay_factor)
        self.seed = int(seed)
        self.optimizer = optimizer
        self.adam_beta1 = float(adam_beta1)
        self.adam_beta2 = float(adam_beta2)
        self.adam_eps = float(adam_eps)
        self.weight_decay = float(weight_decay)
        self.momentum = float(momentum)
        self.backbone_channels = tuple(int(c) for c in backbone_channels)
        self.prefetch = bool(prefetch)

    @classmethod
    def from_run_config(cls, cfg, num_classes=None):
        train = cfg.section('train')
        return cls(
            head=HeadConfig.from_run_config(cfg, num_classes),
            losses=LossWeights.from_run_config(cfg),
            batch=BatchSpec.from_run_config(cfg),
            epochs=train['epochs'], base_lr=train['base_lr'],
            warmup_epochs=train['warmup_epochs'], decay_epochs=train['decay_epochs'],
            decay_factor=train['decay_factor'], seed=train['seed'], optimizer=train['optimizer'],
            adam_beta1=train['adam_beta1'], adam_beta2=train['adam_beta2'],
            adam_eps=train['adam_eps'], weight_decay=train['weight_decay'],
            momentum=train['momentum'], backbone_channels=cfg['backbone.channels'],
            prefetch=train['prefetch'],
        )


def learning_rate(epoch, config):
    """
    Rate for 1-based ``epoch``: linear warmup to base_lr, then multiplied by
    decay_factor once for every decay epoch already passed.
    """
    if config.warmup_epochs and epoch <= config.warmup_epochs:
        return config.base_lr * epoch / config.warmup_epochs
    passed = sum(1 for boundary in config.decay_epochs if epoch > boundary)
    return config.base_lr * config.decay_factor ** passed


# ==================== Optimizers ====================

class AdamOptimizer:
    """Adam over a name -> ndarray store, with L2 weight decay added to the gradient."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, arrays, grads, lr):
        self.t += 1
        for name, grad in grads.items():
            if grad is None:
                continue
            p = arrays[name]
            g = grad.astype(np.float64) + self.weight_decay * p
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            p -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


class SGDOptimizer:
    """SGD with momentum and L2 weight decay."""

    def __init__(self, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, arrays, grads, lr):
        for name, grad in grads.items():
            if grad is None:
                continue
            p = arrays[name]
            g = grad.astype(np.float64) + self.weight_decay * p
            v = self.momentum * self.velocity.get(name, 0.0) + g
            self.velocity[name] = v
            p -= (lr * v).astype(p.dtype)


def make_optimizer(config):
    if config.optimizer == 'adam':
        return AdamOptimizer(config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay)
    return SGDOptimizer(config.momentum, config.weight_decay)


# ==================== Steps ====================

def compute_batch_loss(batch, params, centers, config):
    """
    Forward a batch and evaluate the total loss.

    Returns:
        (LossResult, EmbeddingBundle, bound HeadParameters)

    Raises:
        NonFiniteLossError: a loss term is NaN or infinite
    """
    bound = params.bind()
    bundle = embed_frames(batch.frames, bound, config.head, mode='train')
    components = compute_components(bundle, batch.labels, centers, config.losses)
    for term, value in components.items():
        if not np.isfinite(value.item()):
            raise NonFiniteLossError(f"non-finite {term} loss ({value.item()})", term=term)
    return total_loss(components, config.losses), bundle, bound


def train_step(batch, params, centers, config, optimizer, lr):
    """
    One optimizer step on ``batch`` followed by the class-center update.

    Parameters and centers are updated in place.

    Returns:
        LossResult of the batch before the update
    """
    result, bundle, bound = compute_batch_loss(batch, params, centers, config)
    result.tensor.backward()
    grads = {name: tensor.grad for name, tensor in bound.arrays.items()}
    optimizer.step(params.arrays, grads, lr)
    update_centers(bundle.f_star.data, batch.labels, centers)
    return result


# ==================== Checkpoints ====================

def save_checkpoint(path, params, centers, identities):
    """Archive parameters, running statistics, centers and the class -> identity table."""
    tensors = {f'param/{name}': value for name, value in params.numpy_arrays().items()}
    tensors.update({f'buffer/{name}': value for name, value in params.buffers.items()})
    tensors['centers'] = centers.centers
    tensors['meta/identities'] = encode_ids(identities)
    tensors['meta/center_update_rate'] = np.asarray([centers.update_rate], dtype=np.float32)
    return write_archive(tensors, path)


def load_checkpoint(path):
    """
    Returns:
        (HeadParameters, ClassCenters, list of identity ids by class index)
    """
    tensors = read_archive(path)
    missing = {'centers', 'meta/identities'} - set(tensors)
    if missing:
        raise ArchiveError(f"{path} is not a checkpoint (missing {', '.join(sorted(missing))})")
    arrays = {name[len('param/'):]: v for name, v in tensors.items() if name.startswith('param/')}
    buffers = {name[len('buffer/'):]: v for name, v in tensors.items() if name.startswith('buffer/')}
    rate = float(tensors.get('meta/center_update_rate', np.array([0.5]))[0])
    identities = decode_ids(tensors['meta/identities'])
    return HeadParameters(arrays, buffers), ClassCenters(tensors['centers'], rate), identities



# ==================== Loop ====================

class TrainResult:
    def __init__(self, params, centers, identities, metrics):
        self.params = params
        self.centers = centers
        self.identities = identities
        self.metrics = metrics


def write_metrics(rows, path):
    path = Path(path)
    try:
        with open(path, 'w', newline='', encoding='utf-8') as handle:
            writer = csv.DictWriter(handle, fieldnames=METRIC_COLUMNS, restval='')
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    except OSError as e:
        raise ExportError(f"cannot write metrics log {path}: {e}") from e
    return path


def _batches(tracklets, config, rng, labels):
    for _ in range(config.epochs):
        yield list(iter_epoch_batches(tracklets, config.batch, rng, labels))


def train_loop(tracklets, config, output_dir=None, run_config=None):
    """
    Train from scratch on ``tracklets``.

    Args:
        tracklets: training Tracklets with frames loaded
        config: TrainConfig (head.num_classes must cover every identity)
        output_dir: optional directory for per-epoch checkpoints, the final
            ``model.fgrd`` (+ ``model.cfg`` when ``run_config`` is given) and
            ``metrics.csv``
        run_config: RunConfig saved next to the final checkpoint

    Returns:
        TrainResult
    """
    labels = label_map(tracklets)
    identities = sorted(labels)
    if config.head.num_classes < len(identities):
        raise ConfigurationError(
            f"classifier has {config.head.num_classes} classes, training data has {len(identities)} identities")

    init_rng = np.random.default_rng(config.seed)
    sample_rng = np.random.default_rng([config.seed, 1])
    params = init_model(config.head, init_rng, config.backbone_channels)
    centers = ClassCenters.zeros(config.head.num_classes, config.head.embedding_dim,
                                 config.losses.center_update_rate)
    optimizer = make_optimizer(config)

    output_dir = Path(output_dir) if output_dir is not None else None
    if output_dir is not None:
        (output_dir / 'checkpoints').mkdir(parents=True, exist_ok=True)

    metrics = []
    epochs = _batches(tracklets, config, sample_rng, labels)
    executor = ThreadPoolExecutor(max_workers=1) if config.prefetch else None
    try:
        pending = executor.submit(next, epochs, None) if executor else None
        for epoch in range(1, config.epochs + 1):
            if executor:
                batches = pending.result()
                pending = executor.submit(next, epochs, None)
            else:
                batches = next(epochs)
            lr = learning_rate(epoch, config)
            sums = {}
            for batch in batches:
                result = train_step(batch, params, centers, config, optimizer, lr)
                for term, value in result.breakdown.items():
                    sums[term] = sums.get(term, 0.0) + value
            row = {'epoch': epoch, 'lr': lr}
            row.update({term: sums[term] / len(batches) for term in TERMS if term in sums})
            row['total'] = sum(row[term] for term in TERMS if term in row)
            metrics.append(row)
            logger.info("epoch %d lr %.6g %s total %.6f", epoch, lr,
                        ' '.join(f"{t} {row[t]:.5f}" for t in TERMS if t in row), row['total'])
            if output_dir is not None:
                save_checkpoint(output_dir / 'checkpoints' / f'epoch_{epoch:03d}.fgrd',
                                params, centers, identities)
    finally:
        if executor:
            executor.shutdown(wait=True)

    if output_dir is not None:
        save_checkpoint(output_dir / 'model.fgrd', params, centers, identities)
        write_metrics(metrics, output_dir / 'metrics.csv')
        if run_config is not None:
            run_config.save(output_dir / 'model.cfg')
    return TrainResult(params, centers, identities, metrics)
