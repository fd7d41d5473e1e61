"""
Configuration management for fgreid.

A run is configured by a flat ``key=value`` text file with dotted keys
(``head.c_star=1024``). Values are resolved from, highest priority first:
1. Environment variables (including those from .env)
2. The config file
3. A named preset (``mars-like``, ``image-like``, ...)
4. Default values

Unknown keys and values that do not parse as the key's type are rejected
with ConfigurationError.
"""

import os
import logging
from pathlib import Path

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

# ==================== Environment Variable Names ====================
ENV_VARS = {
    'train.seed': 'FGREID_SEED',
    'train.epochs': 'FGREID_EPOCHS',
    'run.output_dir': 'FGREID_OUTPUT_DIR',
}
ENV_PRESET = 'FGREID_PRESET'

# ==================== Schema ====================
# key -> (kind, default, description)
SCHEMA = {
    'run.output_dir': ('str', 'runs', 'directory for checkpoints, logs and reports'),

    'head.c_backbone': ('int', 2048, 'channels of backbone features'),
    'head.c_star': ('int', 1024, 'reduced channels c*; non-local inner width is c*/4'),
    'head.num_classes': ('int', 0, 'classifier width; 0 derives it from the training identities'),
    'head.use_channel_weights': ('bool', True, 'run-time channel weights (off: uniform 1/c*)'),
    'head.use_nonlocal': ('bool', True, 'context non-local block (off: a2 = a1)'),
    'head.distinct_kq': ('bool', False, 'separate key projection (KQV non-local)'),
    'head.use_gfm': ('bool', True, 'coarse global-feature branch'),
    'head.use_fgm': ('bool', True, 'parameterless spatial attention (off: plain spatial mean)'),
    'head.shared_backbone': ('bool', False, 'one backbone feeds both branches'),
    'head.bn_affine': ('bool', True, 'batch-norm layers carry gamma/beta'),

    'backbone.channels': ('ints', [32, 64], 'toy backbone hidden channels (stride-2 stages)'),
    'backbone.input_height': ('int', 250, 'frame height in pixels; loaded frames must match'),
    'backbone.input_width': ('int', 150, 'frame width in pixels; loaded frames must match'),

    'batch.p': ('int', 32, 'identities per batch'),
    'batch.k': ('int', 5, 'clips per identity'),
    'batch.t': ('int', 4, 'frames per clip'),

    'loss.beta_mix': ('float', 0.5, 'triplet/OSM mixing weight'),
    'loss.w_var': ('float', 0.01, 'variance regularization weight'),
    'loss.w_center': ('float', 0.0005, 'center loss weight'),
    'loss.w_kl': ('float', 1.0, 'KL consistency weight'),
    'loss.w_sr': ('float', 1.0, 'satisfied-rank weight'),
    'loss.smoothing_eps': ('float', 0.1, 'label smoothing'),
    'loss.triplet_margin': ('float', 0.3, 'batch-hard triplet margin'),
    'loss.sr_margin': ('float', 0.05, 'satisfied-rank margin'),
    'loss.osm_sigma': ('float', 0.8, 'OSM soft-mining bandwidth'),
    'loss.osm_margin': ('float', 1.2, 'OSM negative margin'),
    'loss.center_update_rate': ('float', 0.5, 'center update step'),
    'loss.kl_reverse': ('bool', False, 'use KL(y1 || y2) instead of KL(y2 || y1)'),
    'loss.enable_ce': ('bool', True, 'label-smoothed cross entropy'),
    'loss.enable_triplet': ('bool', True, 'batch-hard triplet'),
    'loss.enable_osm': ('bool', True, 'OSM with class-center attention'),
    'loss.enable_var': ('bool', True, 'variance regularization'),
    'loss.enable_center': ('bool', True, 'center loss'),
    'loss.enable_kl': ('bool', True, 'KL consistency'),
    'loss.enable_sr': ('bool', True, 'satisfied rank'),

    'train.epochs': ('int', 120, 'training epochs'),
    'train.base_lr': ('float', 3.5e-4, 'learning rate after warmup'),
    'train.warmup_epochs': ('int', 10, 'linear warmup epochs'),
    'train.decay_epochs': ('ints', [40, 70], 'epochs at which the rate is multiplied by decay_factor'),
    'train.decay_factor': ('float', 0.1, 'step decay multiplier'),
    'train.seed': ('int', 0, 'seed for initialization and sampling'),
    'train.optimizer': ('str', 'adam', 'adam or sgd'),
    'train.adam_beta1': ('float', 0.9, 'first-moment decay'),
    'train.adam_beta2': ('float', 0.999, 'second-moment decay'),
    'train.adam_eps': ('float', 1e-8, 'adam denominator epsilon'),
    'train.weight_decay': ('float', 5e-4, 'L2 penalty added to gradients'),
    'train.momentum': ('float', 0.9, 'sgd momentum'),
    'train.prefetch': ('bool', False, 'sample the next batch while the optimizer runs'),

    'eval.metric': ('str', 'dot', 'dot (cosine) or euclidean'),
    'eval.ranks': ('ints', [1, 5, 10, 20], 'CMC ranks to report'),
    'eval.rerank': ('bool', False, 'apply k-reciprocal re-ranking'),
    'eval.k1': ('int', 20, 're-ranking k1'),
    'eval.k2': ('int', 6, 're-ranking k2'),
    'eval.lambda': ('float', 0.3, 're-ranking blend weight of the original distance'),
    'eval.max_clips': ('int', 32, 'clips averaged per tracklet'),
    'eval.per_identity': ('bool', False, 'average embeddings per identity and camera (image protocol)'),

    'synth.num_identities': ('int', 16, 'synthetic identities'),
    'synth.tracklets_per_id': ('int', 4, 'tracklets per identity'),
    'synth.frames': ('int', 16, 'frames per tracklet'),
    'synth.num_cameras': ('int', 2, 'cameras; tracklet j is seen by camera j mod num_cameras'),
    'synth.held_out': ('int', 1, 'tracklets per identity kept out of training as queries'),
}

# ==================== Presets ====================
PRESETS = {
    'mars-like': {
        'batch.p': 32, 'batch.k': 5, 'batch.t': 4,
        'backbone.input_height': 250, 'backbone.input_width': 150,
    },
    'image-like': {
        'batch.p': 32, 'batch.k': 4, 'batch.t': 1,
        'backbone.input_height': 250, 'backbone.input_width': 150,
    },
    'ilids-like': {
        'batch.p': 28, 'batch.k': 5, 'batch.t': 5,
        'backbone.input_height': 220, 'backbone.input_width': 150,
    },
    'vehicle-like': {
        'batch.p': 32, 'batch.k': 4, 'batch.t': 1,
        'backbone.input_height': 150, 'backbone.input_width': 250,
    },
    'desk': {
        'head.c_backbone': 128, 'head.c_star': 64,
        'backbone.channels': [32, 64],
        'backbone.input_height': 32, 'backbone.input_width': 32,
        'batch.p': 4, 'batch.k': 4, 'batch.t': 4,
        'train.epochs': 100, 'train.base_lr': 1e-3, 'train.warmup_epochs': 5,
        'train.decay_epochs': [60, 85],
        'eval.k1': 6, 'eval.k2': 3,
    },
}

_TRUE = {'true', '1', 'yes', 'on'}
_FALSE = {'false', '0', 'no', 'off'}


def _parse_value(key, kind, raw):
    """Parse a raw string (or Python value) into the key's type."""
    try:
        if kind == 'int':
            if isinstance(raw, bool):
                raise ValueError(raw)
            if isinstance(raw, int):
                return raw
            return int(str(raw).strip())
        if kind == 'float':
            if isinstance(raw, bool):
                raise ValueError(raw)
            return float(str(raw).strip()) if not isinstance(raw, (int, float)) else float(raw)
        if kind == 'bool':
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(raw)
        if kind == 'str':
            text = str(raw).strip()
            if '\n' in text:
                raise ValueError(raw)
            return text
        if kind == 'ints':
            if isinstance(raw, (list, tuple)):
                return [_parse_value(key, 'int', v) for v in raw]
            text = str(raw).strip()
            return [int(v) for v in text.split(',')] if text else []
    except ValueError:
        raise ConfigurationError(f"invalid value for {key} ({kind}): {raw!r}") from None
    raise ConfigurationError(f"unknown value kind {kind!r} for {key}")


def _format_value(kind, value):
    if kind == 'bool':
        return 'true' if value else 'false'
    if kind == 'float':
        return repr(float(value))
    if kind == 'ints':
        return ','.join(_format_value(kind[:-1], v) for v in value)
    return str(value)


class RunConfig:
    """
    Typed holder of every run setting.

    Values are addressed by dotted key: ``cfg['batch.p']``.
    """

    def __init__(self, values=None):
        self._values = {
            key: list(default) if isinstance(default, list) else default
            for key, (_, default, _doc) in SCHEMA.items()
        }
        for key, value in (values or {}).items():
            self.set(key, value)

    def __getitem__(self, key):
        if key not in self._values:
            raise ConfigurationError(f"unknown config key: {key}")
        value = self._values[key]
        return list(value) if isinstance(value, list) else value

    def __contains__(self, key):
        return key in self._values

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def set(self, key, value):
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown config key: {key}")
        self._values[key] = _parse_value(key, SCHEMA[key][0], value)

    def copy(self):
        return RunConfig(self._values)

    def keys(self):
        return sorted(self._values)

    def section(self, prefix):
        """Values under ``prefix.`` keyed by their short name."""
        start = prefix + '.'
        return {k[len(start):]: self[k] for k in self.keys() if k.startswith(start)}

    def apply_preset(self, name):
        if name not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
        for key, value in PRESETS[name].items():
            self.set(key, value)
        logger.info("applied preset %s", name)

    def update_from_text(self, text, source='<text>'):
        """Apply ``key=value`` lines; '#' comments and blank lines are skipped."""
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith('#'):
                continue
            if '=' not in stripped:
                raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
            key, raw = stripped.split('=', 1)
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigurationError(f"{source}:{lineno}: unknown config key: {key}")
            self.set(key, raw)

    @classmethod
    def parse(cls, text, source='<text>'):
        cfg = cls()
        cfg.update_from_text(text, source)
        return cfg

    def serialize(self):
        """Canonical text form: every key, sorted, one per line."""
        lines = [f"{key}={_format_value(SCHEMA[key][0], self._values[key])}" for key in self.keys()]
        return '\n'.join(lines) + '\n'

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.serialize(), encoding='utf-8')
        return path


def describe_keys():
    """Lines documenting every key with its default."""
    return [
        f"{key}={_format_value(kind, default)}  # {doc}"
        for key, (kind, default, doc) in sorted(SCHEMA.items())
    ]


def load_config(config_path=None, preset=None, overrides=None):
    """
    Load configuration from presets, a config file and environment variables.

    Priority (highest to lowest):
    1. ``overrides`` mapping (command-line values)
    2. Environment variables (including those from .env)
    3. The config file
    4. The preset (argument, else FGREID_PRESET)
    5. Default values

    Args:
        config_path: Optional path to a key=value file.
        preset: Optional preset name.
        overrides: Optional mapping of dotted keys to values.

    Returns:
        A new RunConfig

    Raises:
        ConfigurationError: unreadable file, unknown keys or bad values
    """
    try_load_dotenv()

    cfg = RunConfig()

    preset = preset or os.environ.get(ENV_PRESET)
    if preset:
        cfg.apply_preset(preset)

    if config_path is not None:
        config_path = Path(config_path)
        try:
            text = config_path.read_text(encoding='utf-8')
        except OSError as e:
            raise ConfigurationError(f"cannot read config file {config_path}: {e}") from e
        cfg.update_from_text(text, source=str(config_path))
        logger.info("loaded config from %s", config_path)

    for key, env_name in ENV_VARS.items():
        env_value = os.environ.get(env_name)
        if env_value:
            cfg.set(key, env_value)
            logger.info("using environment variable %s for %s", env_name, key)

    for key, value in (overrides or {}).items():
        if value is not None:
            cfg.set(key, value)

    return cfg


def try_load_dotenv():
    """
    Load a .env file from the working directory if python-dotenv is available.

    Called by load_config(), not on module import.
    """
    try:
        from dotenv import load_dotenv
    except ImportError:
        return
    env_path = Path.cwd() / '.env'
    if env_path.exists():
        load_dotenv(env_path)
        logger.info("loaded environment variables from %s", env_path)
