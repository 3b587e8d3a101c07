import os
import random
import logging
from dataclasses import dataclass, field, fields, asdict

import numpy as np
import torch
import yaml

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "STBP_OUTPUT_DIR"


class SnnError(Exception):
    exit_code = 1


class DimensionError(SnnError, ValueError):
    exit_code = 3


class ConfigurationError(SnnError, ValueError):
    exit_code = 2


class StateError(SnnError, RuntimeError):
    exit_code = 1


class GraphError(SnnError):
    exit_code = 1


class NumericError(SnnError, ArithmeticError):
    exit_code = 1


class DataError(SnnError):
    exit_code = 3


class FormatError(DataError):

    def __init__(self, message, offset=None):
        if offset is not None:
            message = "%s (at byte offset %d)" % (message, offset)
        super(FormatError, self).__init__(message)
        self.offset = offset


class UsageError(SnnError):
    exit_code = 2


def to_np(x):
    if isinstance(x, np.ndarray):
        return x
    return x.detach().cpu().numpy()


def to_pt(np_matrix, type='float'):
    if type == 'long':
        return torch.from_numpy(np.ascontiguousarray(np_matrix)).long()
    elif type == 'float':
        return torch.from_numpy(np.ascontiguousarray(np_matrix)).float()
    raise ValueError("unknown tensor type %s" % type)


def set_random_seed(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


class HistoryScoreCache:

    def __init__(self, capacity=1):
        self.capacity = capacity
        self.reset()

    def push(self, stuff):
        """stuff is float."""
        if len(self.memory) < self.capacity:
            self.memory.append(stuff)
        else:
            self.memory = self.memory[1:] + [stuff]

    def get_avg(self):
        if len(self.memory) == 0:
            return 0.0
        return float(np.mean(np.array(self.memory)))

    def reset(self):
        self.memory = []

    def __len__(self):
        return len(self.memory)


# dotted yaml path -> RunConfig field
CONFIG_KEYS = {
    "general.random_seed": "seed",
    "general.experiment_tag": "experiment_tag",
    "general.output_dir": "output_dir",
    "general.visdom": "visdom",
    "model.arch": "arch",
    "model.timesteps": "timesteps",
    "model.width_divisor": "width_divisor",
    "neuron.tau_decay": "tau_decay",
    "neuron.v_th": "v_th",
    "neuron.surrogate_width": "surrogate_width",
    "neuron.detach_reset": "detach_reset",
    "tdbn.eps": "tdbn_eps",
    "tdbn.momentum": "tdbn_momentum",
    "training.batch_size": "batch_size",
    "training.epochs": "epochs",
    "training.resume_from": "resume_from",
    "training.optimizer.learning_rate": "learning_rate",
    "training.optimizer.momentum": "momentum",
    "training.optimizer.decay_every": "decay_every",
    "training.optimizer.decay_factor": "decay_factor",
    "dataset.kind": "dataset_kind",
    "dataset.root": "dataset_root",
    "dataset.n_per_class": "n_per_class",
    "dataset.n_test_per_class": "n_test_per_class",
    "dataset.image_size": "image_size",
    "dataset.sensor_size": "sensor_size",
    "dataset.frame_size": "frame_size",
    "dataset.slice_ms": "slice_ms",
    "dataset.augment": "augment",
    "dataset.num_workers": "num_workers",
    "diagnostics.depth": "diag_depth",
    "diagnostics.batch_size": "diag_batch_size",
    "diagnostics.channels": "diag_channels",
    "diagnostics.image_size": "diag_image_size",
    "diagnostics.timesteps": "diag_timesteps",
    "diagnostics.samples": "diag_samples",
    "diagnostics.surrogate_width": "diag_surrogate_width",
    "diagnostics.sigma_in": "diag_sigma_in",
    "diagnostics.use_tdbn": "diag_use_tdbn",
    "diagnostics.zero_input": "diag_zero_input",
    "diagnostics.checkpoint": "diag_checkpoint",
}

# lr decay period per architecture when training.optimizer.decay_every is left empty
DECAY_EVERY = {
    "resnet17": 1000,
    "resnet19": 35,
    "resnet34": 35,
    "resnet34_large": 35,
    "resnet50": 45,
}


@dataclass
class RunConfig:
    seed: int = 42
    experiment_tag: str = "stbp_tdbn"
    output_dir: str = "."
    visdom: bool = False

    arch: str = "resnet8"
    timesteps: int = 2
    width_divisor: int = 1

    tau_decay: float = 0.25
    v_th: float = 1.0
    surrogate_width: float = 1.0
    detach_reset: bool = False

    tdbn_eps: float = 1e-5
    tdbn_momentum: float = 0.1

    batch_size: int = 16
    epochs: int = 20
    resume_from: str = ""
    learning_rate: float = 0.1
    momentum: float = 0.9
    decay_every: int = 0  # 0: architecture default
    decay_factor: float = 0.1

    dataset_kind: str = "two_gaussians"  # two_gaussians, xor_patches, moving_bar, manifest
    dataset_root: str = "data/two_gaussians"
    n_per_class: int = 64
    n_test_per_class: int = 32
    image_size: int = 8
    sensor_size: int = 32
    frame_size: int = 16
    slice_ms: float = 30.0
    augment: bool = False
    num_workers: int = 0

    diag_depth: int = 20
    diag_batch_size: int = 8
    diag_channels: int = 16
    diag_image_size: int = 8
    diag_timesteps: int = 4
    diag_samples: int = 4096
    diag_surrogate_width: str = "neuron"  # neuron, auto or a positive number
    diag_sigma_in: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    diag_use_tdbn: bool = True
    diag_zero_input: bool = False
    diag_checkpoint: str = ""

    @classmethod
    def from_dict(cls, tree):
        flat = {}
        _flatten(tree or {}, "", flat)
        values = {}
        for key, value in flat.items():
            if key not in CONFIG_KEYS:
                raise UsageError("unknown config key '%s'" % key)
            values[CONFIG_KEYS[key]] = value
        defaults = cls()
        for f in fields(cls):
            if f.name not in values or values[f.name] is None:
                continue
            values[f.name] = _coerce(f.name, values[f.name], getattr(defaults, f.name))
        config = cls(**{k: v for k, v in values.items() if v is not None})
        config.validate()
        return config

    def to_dict(self):
        tree = {}
        flat = asdict(self)
        for key, name in CONFIG_KEYS.items():
            entry = tree
            parts = key.split(".")
            for part in parts[:-1]:
                entry = entry.setdefault(part, {})
            entry[parts[-1]] = flat[name]
        return tree

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @property
    def lr_decay_every(self):
        if self.decay_every > 0:
            return self.decay_every
        return DECAY_EVERY.get(self.arch, 35)

    def validate(self):
        checks = [
            (self.timesteps >= 1, "model.timesteps must be >= 1"),
            (self.width_divisor >= 1, "model.width_divisor must be >= 1"),
            (0.0 <= self.tau_decay < 1.0, "neuron.tau_decay must lie in [0, 1)"),
            (self.v_th > 0.0, "neuron.v_th must be positive"),
            (self.surrogate_width > 0.0, "neuron.surrogate_width must be positive"),
            (self.tdbn_eps >= 0.0, "tdbn.eps must be non-negative"),
            (0.0 < self.tdbn_momentum < 1.0, "tdbn.momentum must lie in (0, 1)"),
            (self.batch_size >= 1, "training.batch_size must be >= 1"),
            (self.epochs >= 0, "training.epochs must be >= 0"),
            (self.learning_rate > 0.0, "training.optimizer.learning_rate must be positive"),
            (0.0 <= self.momentum < 1.0, "training.optimizer.momentum must lie in [0, 1)"),
            (self.decay_every >= 0, "training.optimizer.decay_every must be >= 0"),
            (0.0 < self.decay_factor < 1.0, "training.optimizer.decay_factor must lie in (0, 1)"),
            (self.n_per_class >= 2, "dataset.n_per_class must be >= 2"),
            (self.n_test_per_class >= 2, "dataset.n_test_per_class must be >= 2"),
            (self.slice_ms > 0.0, "dataset.slice_ms must be positive"),
            (self.num_workers >= 0, "dataset.num_workers must be >= 0"),
            (self.diag_depth >= 3, "diagnostics.depth must be >= 3"),
            (self.diag_timesteps >= 1, "diagnostics.timesteps must be >= 1"),
            (_is_width_choice(self.diag_surrogate_width),
             "diagnostics.surrogate_width must be neuron, auto or a positive number"),
        ]
        for ok, message in checks:
            if not ok:
                raise UsageError(message)


def _is_width_choice(value):
    if value in ("neuron", "auto"):
        return True
    try:
        return float(value) > 0.0
    except ValueError:
        return False


def _flatten(tree, prefix, out):
    if not isinstance(tree, dict):
        raise UsageError("config section '%s' must be a mapping" % prefix.rstrip("."))
    for key, value in tree.items():
        dotted = prefix + str(key)
        if isinstance(value, dict):
            _flatten(value, dotted + ".", out)
        else:
            out[dotted] = value


def _coerce(name, value, default):
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            return [float(v) for v in value]
        return str(value)
    except (TypeError, ValueError):
        raise UsageError("config key for '%s' has invalid value %r" % (name, value))


def load_config(config_file, params=()):
    """
    Read a yaml config and apply `section.key=value` overrides.
    """
    if not os.path.exists(config_file):
        raise UsageError("config file %s does not exist" % config_file)
    with open(config_file) as reader:
        try:
            config = yaml.safe_load(reader) or {}
        except yaml.YAMLError as e:
            raise UsageError("config file %s is not valid yaml: %s" % (config_file, e))
    # Parse overriden params.
    for param in params:
        if "=" not in param:
            raise UsageError("override '%s' must look like section.key=value" % param)
        fqn_key, value = param.split("=", 1)
        entry_to_change = config
        keys = fqn_key.split(".")
        for k in keys[:-1]:
            entry_to_change = entry_to_change.setdefault(k, {})
        entry_to_change[keys[-1]] = yaml.safe_load(value)
    return RunConfig.from_dict(config)


def add_config_arguments(parser):
    parser.add_argument("config_file", help="path to config file")
    parser.add_argument("-p", "--params", nargs="+", metavar="my.setting=value", default=[],
                        help="override params of the config file,"
                             " e.g. -p 'neuron.tau_decay=0.5'")


def resolve_output_dir(config):
    output_dir = os.environ.get(OUTPUT_DIR_ENV) or config.output_dir
    os.makedirs(output_dir, exist_ok=True)
    return output_dir
