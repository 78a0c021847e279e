""" Flat typed experiment configuration, loaded from YAML """
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass
class TrainerConfig:
    config_version: int = CONFIG_VERSION

    # RL objective
    gamma: float = 0.95
    eps_low: float = 0.2
    eps_high: float = 0.28
    dual_clip: float = 3.0
    kl_coeff: float = 0.001
    kernel_family: str = 'gaussian_temporal'
    kernel_bandwidth: float = 30.0
    group_size: int = 16
    retention: int = 256
    lr: float = 1e-2
    momentum: float = 0.0
    ppo_epochs: int = 1
    normalize_advantage: bool = True
    allow_singleton_baseline: bool = False
    debug_gradcheck: bool = False
    clipcov_enabled: bool = False
    clipcov_upper: float = 5.0
    clipcov_lower: float = 1.0
    clipcov_ratio: float = 0.0002
    rl_iterations: int = 40
    eval_every: int = 10

    # imitation warm-up
    il_lr: float = 0.5
    il_epochs: int = 30
    il_batch_size: int = 64
    il_schedule: str = 'cosine'
    il_val_percent: float = 0.0
    il_strategy: str = 'uniform'
    il_demos: int = 48
    demo_pool: int = 96
    scan_turn_prob: float = 0.1
    length_buckets: list = field(default_factory=lambda: [[0, 10], [10, 25], [25, None]])

    # policy
    init_type: str = 'zeros'
    hidden_width: int = 0

    # environment and layouts
    t_max: int = 200
    success_radius: int = 1
    slack_penalty: float = 0.01
    terminal_scale: float = 2.5
    reward_mode: str = 'dense'
    n_object_classes: int = 1
    layout_size: list = field(default_factory=lambda: [11, 15])
    layout_density: float = 0.2
    train_layouts: int = 32
    eval_layouts: int = 60
    eval_layout_size: list = field(default_factory=lambda: [15, 30])
    eval_per_bucket: int = 20
    eval_greedy: bool = True
    eval_layout_dir: Optional[str] = None

    # state encoding
    view_size: int = 5
    prune_delta: float = 0.95
    pos_code_freqs: int = 16
    pos_code_period: int = 32

    # orchestration and outputs
    seed: int = 0
    worker_count: int = 1
    eval_buckets: list = field(default_factory=lambda: [[0, 10], [10, 25], [25, None]])
    spill_dir: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    tensorboard_dir: Optional[str] = None
    progress: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def kernel(self):
        from loss.advantage import KernelSpec
        return KernelSpec(self.kernel_family, float(self.kernel_bandwidth))

    @property
    def clipcov(self):
        from loss.hapoLoss import ClipCovConfig
        return ClipCovConfig(self.clipcov_enabled, self.clipcov_upper, self.clipcov_lower, self.clipcov_ratio)

    @property
    def buckets(self):
        return parse_buckets(self.length_buckets)

    @property
    def report_buckets(self):
        return parse_buckets(self.eval_buckets)

    def validate(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f'unsupported config_version {self.config_version}, expected {CONFIG_VERSION}')
        clip_off = math.isinf(self.eps_low) and math.isinf(self.eps_high)
        if not clip_off and not (0 < self.eps_low <= self.eps_high < 1):
            raise ConfigError(f'need 0 < eps_low <= eps_high < 1, got {self.eps_low}, {self.eps_high}')
        if self.kl_coeff < 0:
            raise ConfigError(f'kl_coeff must be non-negative, got {self.kl_coeff}')
        if not self.lr > 0 or not self.il_lr > 0:
            raise ConfigError(f'learning rates must be positive, got lr={self.lr} il_lr={self.il_lr}')
        if not 0 < self.gamma <= 1:
            raise ConfigError(f'gamma must lie in (0, 1], got {self.gamma}')
        if self.view_size < 1 or self.view_size % 2 == 0:
            raise ConfigError(f'view_size must be a positive odd integer, got {self.view_size}')
        if self.group_size < 1 or self.retention < self.group_size:
            raise ConfigError(f'need 1 <= group_size <= retention, got {self.group_size}, {self.retention}')
        if self.worker_count < 1 or self.ppo_epochs < 1:
            raise ConfigError(f'worker_count and ppo_epochs must be >= 1, got {self.worker_count}, {self.ppo_epochs}')
        if self.reward_mode not in ('dense', 'sparse'):
            raise ConfigError(f'unknown reward_mode {self.reward_mode!r}')
        if self.il_schedule not in ('cosine', 'constant'):
            raise ConfigError(f'unknown il_schedule {self.il_schedule!r}')
        if self.il_strategy not in ('uniform', 'random'):
            raise ConfigError(f'unknown il_strategy {self.il_strategy!r}')
        if not 0 <= self.il_val_percent < 100:
            raise ConfigError(f'il_val_percent must lie in [0, 100), got {self.il_val_percent}')
        if self.dual_clip and self.dual_clip <= 1:
            raise ConfigError(f'dual_clip must exceed 1 (or be 0 to disable), got {self.dual_clip}')
        for name in ('layout_size', 'eval_layout_size'):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or not 3 <= lo_hi[0] <= lo_hi[1] < self.pos_code_period:
                raise ConfigError(f'{name} must be [lo, hi] with 3 <= lo <= hi < pos_code_period, got {lo_hi}')
        if self.eval_layouts < 1 or self.eval_per_bucket < 0:
            raise ConfigError(f'need eval_layouts >= 1 and eval_per_bucket >= 0, '
                              f'got {self.eval_layouts}, {self.eval_per_bucket}')
        parse_buckets(self.length_buckets)
        parse_buckets(self.eval_buckets)
        try:
            self.kernel
            self.clipcov
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def replace(self, **overrides):
        return dataclasses.replace(self, **overrides)

    def to_dict(self):
        return dataclasses.asdict(self)


def parse_buckets(buckets):
    """[[lo, hi], ...] with hi None (or .inf) for an open top, as half-open [lo, hi) ranges"""
    out = []
    for b in buckets:
        if len(b) != 2:
            raise ConfigError(f'bucket {b!r} is not a (lo, hi) pair')
        lo, hi = b
        hi = math.inf if hi is None else hi
        if not lo < hi:
            raise ConfigError(f'bucket {b!r} is empty')
        out.append((lo, hi))
    return tuple(out)


def bucket_of(value, buckets):
    for n, (lo, hi) in enumerate(buckets):
        if lo <= value < hi:
            return n
    return None


def _check_type(name, value, annotation):
    if value is None:
        return
    expected = {int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list, tuple)}.get(annotation)
    if expected is None:
        return
    if isinstance(value, bool) and annotation is not bool:
        raise ConfigError(f'{name} expects {annotation.__name__}, got bool')
    if not isinstance(value, expected):
        raise ConfigError(f'{name} expects {annotation.__name__}, got {type(value).__name__} {value!r}')


def config_from_dict(values, **overrides):
    values = dict(values or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name: f for f in dataclasses.fields(TrainerConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f'unknown config keys {unknown}')
    if 'config_version' not in values:
        raise ConfigError('config is missing config_version')
    for name, value in values.items():
        annotation = known[name].type
        if annotation == Optional[str]:
            annotation = str
        _check_type(name, value, annotation)
        if annotation is float and value is not None:
            values[name] = float(value)
    return TrainerConfig(**values)


def load_config(path, **overrides):
    try:
        with open(path, 'r') as file:
            values = yaml.safe_load(file)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f'cannot read config {path}: {e}') from e
    if values is not None and not isinstance(values, dict):
        raise ConfigError(f'config {path} is not a mapping')
    config = config_from_dict(values, **overrides)
    logging.info(f'Loaded config {path}')
    return config
