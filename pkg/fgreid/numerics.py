"""
Kernel operations used by the head, each differentiable through ``Tensor``.

Feature maps follow the (t, h, w, c) layout with channels fastest; any
number of leading batch axes is allowed in front of it. Images are feature
maps with t = 1.
"""

import logging

import numpy as np

from .exceptions import GradientCheckError, ShapeError
from .tensor import Tensor, as_tensor, linear, softmax, l2_normalize as _l2_normalize

logger = logging.getLogger(__name__)

L2_EPSILON = 1e-12

# Feature-map axis names, counted from the end of the array.
FEATURE_AXES = {'t': -4, 'h': -3, 'w': -2}


class ProjectionParams:
    """Weights of a 1x1 channel projection (c_in -> c_out)."""

    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias
        w = as_tensor(weight)
        b = as_tensor(bias)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
            raise ShapeError(
                f"projection weight {w.shape} and bias {b.shape} are inconsistent")
        if not (np.all(np.isfinite(w.data)) and np.all(np.isfinite(b.data))):
            raise ShapeError("projection parameters must be finite")

    @property
    def c_in(self):
        return as_tensor(self.weight).shape[0]

    @property
    def c_out(self):
        return as_tensor(self.weight).shape[1]


class BatchNormParams:
    """Per-channel batch-norm state.

    ``gamma``/``beta`` are trainable (``None`` when the layer is not affine);
    ``running_mean``/``running_var`` are ndarrays updated in place during
    training.
    """

    def __init__(self, gamma, beta, running_mean, running_var, momentum=0.1, epsilon=1e-5):
        if epsilon <= 0:
            raise ShapeError("batch-norm epsilon must be > 0")
        running_var = np.asarray(running_var, dtype=np.float32)
        if np.any(running_var < 0):
            raise ShapeError("batch-norm running variance must be >= 0")
        self.gamma = gamma
        self.beta = beta
        self.running_mean = np.asarray(running_mean, dtype=np.float32)
        self.running_var = running_var
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)

    @property
    def channels(self):
        return self.running_mean.shape[0]

    @property
    def affine(self):
        return self.gamma is not None


def softmax_axis(x, axis=-1):
    """Softmax along ``axis``, stabilized by max-subtraction."""
    x = as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for rank {x.ndim}")
    return softmax(x, axis=axis)


def channel_project(x, params):
    """1x1 projection applied at every (t, h, w) position."""
    x = as_tensor(x)
    if x.shape[-1] != params.c_in:
        raise ShapeError(
            f"channel mismatch: feature map has {x.shape[-1]} channels, "
            f"projection expects {params.c_in}")
    return linear(x, as_tensor(params.weight), as_tensor(params.bias))


def batch_norm(x, params, mode='train'):
    """Normalize a (batch, c) tensor per channel.

    In train mode the batch statistics are used and the running statistics
    are updated with ``params.momentum``; in infer mode the running
    statistics are used.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.channels:
        raise ShapeError(f"batch norm expects (batch, {params.channels}), got {x.shape}")

    if mode == 'train':
        batch = x.shape[0]
        if batch < 2:
            raise ShapeError("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=0, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=0, keepdims=True)
        normalized = centered / (var + params.epsilon).sqrt()

        m = params.momentum
        batch_mean = mean.data.reshape(-1).astype(np.float64)
        unbiased = var.data.reshape(-1).astype(np.float64) * batch / (batch - 1)
        params.running_mean[...] = (1.0 - m) * params.running_mean + m * batch_mean
        params.running_var[...] = (1.0 - m) * params.running_var + m * unbiased
    elif mode == 'infer':
        mean = params.running_mean.astype(x.dtype)
        std = np.sqrt(params.running_var.astype(np.float64) + params.epsilon).astype(x.dtype)
        normalized = (x - mean) / std
    else:
        raise ValueError(f"unknown batch-norm mode: {mode!r}")

    if params.affine:
        normalized = normalized * as_tensor(params.gamma) + as_tensor(params.beta)
    return normalized


def mean_pool(x, axes, keepdims=False):
    """Arithmetic mean over named feature-map axes (subset of t, h, w)."""
    x = as_tensor(x)
    if x.ndim < 4:
        raise ShapeError(f"feature map must have rank >= 4, got {x.ndim}")
    unknown = set(axes) - set(FEATURE_AXES)
    if unknown:
        raise ShapeError(f"cannot pool over {sorted(unknown)}; allowed axes are t, h, w")
    if not axes:
        return x
    return x.mean(axis=tuple(x.ndim + FEATURE_AXES[a] for a in axes), keepdims=keepdims)


def l2_normalize(v, epsilon=L2_EPSILON, axis=-1):
    """v / max(||v||, epsilon) along ``axis``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return _l2_normalize(as_tensor(v), axis=axis, epsilon=epsilon)


def _projection_weights(shape, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=shape)


def grad_check(op, inputs, step=1e-3, seed=0):
    """Compare analytic gradients with central finite differences.

    Args:
        op: Callable taking a Tensor (or a dict of Tensors when ``inputs``
            is a dict) and returning a Tensor.
        inputs: ndarray, or dict name -> ndarray
        step: finite-difference step
        seed: seed of the random projection used for non-scalar outputs

    Returns:
        Worst per-element error |a - n| / max(1, |a|, |n|)

    Raises:
        GradientCheckError: non-positive step or non-finite values
    """
    if step <= 0:
        raise GradientCheckError("finite-difference step must be > 0")

    keyed = isinstance(inputs, dict)
    base = {k: np.array(v, dtype=np.float64) for k, v in (inputs.items() if keyed else [(None, inputs)])}

    def call(arrays, requires_grad=False):
        leaves = {k: Tensor(a, requires_grad=requires_grad) for k, a in arrays.items()}
        out = as_tensor(op(leaves if keyed else leaves[None]))
        if not np.all(np.isfinite(out.data)):
            raise GradientCheckError("operation produced non-finite values")
        return leaves, out

    leaves, out = call(base, requires_grad=True)
    weights = None if out.size == 1 else _projection_weights(out.shape, seed)

    def scalarize(t):
        return t.sum() if weights is None else (t * weights).sum()

    scalarize(out).backward()

    worst = 0.0
    for key, array in base.items():
        analytic = leaves[key].grad
        analytic = np.zeros_like(array) if analytic is None else np.asarray(analytic, dtype=np.float64)
        numeric = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            shifted = {k: a.copy() for k, a in base.items()}
            shifted[key][idx] += step
            f_plus = float(scalarize(call(shifted)[1]).data)
            shifted[key][idx] -= 2 * step
            f_minus = float(scalarize(call(shifted)[1]).data)
            numeric[idx] = (f_plus - f_minus) / (2 * step)
        if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
            raise GradientCheckError(f"non-finite gradient for input {key!r}")
        if array.size:
            scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
            err = float(np.max(np.abs(analytic - numeric) / scale))
            logger.debug("grad_check %s: max error %.3e", key, err)
            worst = max(worst, err)
    return worst
