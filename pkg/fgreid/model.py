"""
Backbone(s) plus head as one embedding model over pixel clips.
"""

import logging

from .backbone import init_backbone_parameters, stage_names, toy_backbone
from .head import BACKBONE_PREFIX, forward, init_head_parameters

logger = logging.getLogger(__name__)


def backbone_roles(config):
    """Backbone parameter sets required by ``config`` ('shared' or coarse/fine)."""
    if config.shared_backbone:
        return ['shared']
    roles = []
    if config.needs_coarse_features:
        roles.append('coarse')
    if config.has_fine_branch:
        roles.append('fine')
    return roles


def init_model(config, rng, backbone_channels=(32, 64)):
    """
    Initialize head and backbone weights in one HeadParameters store.

    Args:
        config: HeadConfig
        rng: numpy Generator
        backbone_channels: hidden widths of the toy backbone stages

    Returns:
        HeadParameters
    """
    params = init_head_parameters(config, rng)
    for role in backbone_roles(config):
        params.arrays.update(init_backbone_parameters(
            rng, BACKBONE_PREFIX + role, backbone_channels, config.c_backbone))
    return params


def backbone_stages(params, role):
    prefix = BACKBONE_PREFIX + role
    count = sum(1 for name in params.arrays if name.startswith(prefix + '.') and name.endswith('.weight'))
    return [params.projection(name) for name in stage_names(prefix, count)]


def embed_frames(frames, params, config, mode='train', trace=False):
    """
    Embed a batch of pixel clips.

    Args:
        frames: (batch, t, H, W, 3)
        params: HeadParameters with backbone stages
        config: HeadConfig
        mode: 'train' or 'infer'
        trace: record intermediates on the bundle

    Returns:
        EmbeddingBundle
    """
    if config.shared_backbone:
        shared = toy_backbone(frames, backbone_stages(params, 'shared'))
        coarse = shared if config.needs_coarse_features else None
        fine = shared if config.has_fine_branch else None
    else:
        coarse = toy_backbone(frames, backbone_stages(params, 'coarse')) if config.needs_coarse_features else None
        fine = toy_backbone(frames, backbone_stages(params, 'fine')) if config.has_fine_branch else None
    return forward(coarse, fine, params, config, mode=mode, trace=trace)
