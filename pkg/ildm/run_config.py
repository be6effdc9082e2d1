"""
Run configuration: built-in defaults per command, overridden by a parameters file and then by command-line flags.

A parameters file is a YAML mapping from command names to flat key/value mappings, e.g.::

    train-ildm:
      steps: 20000
      lam: 4.0

Every key a command accepts is listed in COMMAND_DEFAULTS (and documented in model_parameters/default.yml);
anything else is an error.
"""
import copy
import os

import yaml

from ildm.errors import ConfigError, ContainerIOError

RESOLVED_CONFIG_FILE = "resolved_config.yml"

_DATA = "data/train"
_IMAGE_VAE = "checkpoints/image_vae.ildm"
_INTRINSIC_VAE = "checkpoints/intrinsic_vae.ildm"

COMMAND_DEFAULTS = {
    "scene-gen": {
        "n": 512,
        "seed": 0,
        "res": 64,
        "out": _DATA,
        "workers": 1,
    },
    "train-vae": {
        "data": _DATA,
        "kind": "intrinsic",
        "out": _INTRINSIC_VAE,
        "steps": 3000,
        "lr": 1e-3,
        "batch_size": 16,
        "zero_mask_prob": 0.1,
        "kl_weight": 1e-6,
        "val_fraction": 0.1,
        "latent_channels": 4,
        "downsample": 4,
        "width": 32,
        "seed": 0,
    },
    "train-base": {
        "data": _DATA,
        "image_vae": _IMAGE_VAE,
        "out": "checkpoints/base.ildm",
        "steps": 10000,
        "lr": 2e-4,
        "batch_size": 16,
        "cond_drop_prob": 0.1,
        "weight_decay": 0.01,
        "seed": 0,
        "parameterization": "epsilon",
        "channels": [32, 64],
        "num_heads": 2,
        "num_timesteps": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "checkpoint_every": 1000,
    },
    "train-ildm": {
        "data": _DATA,
        "base": None,
        "image_vae": _IMAGE_VAE,
        "intrinsic_vae": _INTRINSIC_VAE,
        "out": "checkpoints/ildm.ildm",
        "steps": 20000,
        "lam": 4.0,
        "lr": 2e-4,
        "batch_size": 16,
        "cond_drop_prob": 0.1,
        "weight_decay": 0.01,
        "seed": 0,
        "lora_rank": 4,
        "lora_alpha": 4.0,
        "lora_cross_attention": False,
        "adapt_embeddings": False,
        "train_schedule": "full",
        "filter_flat_normals": False,
        "checkpoint_every": 1000,
    },
    "sample": {
        "checkpoint": "checkpoints/ildm.ildm",
        "image_vae": _IMAGE_VAE,
        "intrinsic_vae": _INTRINSIC_VAE,
        "prompt": "one red sphere on a plane",
        "seed": 0,
        "steps": 25,
        "cfg": 7.5,
        "schedule": "drop",
        "tau": None,
        "sigma": None,
        "alpha": None,
        "layers": None,
        "intrinsic_early_stop": None,
        "cfg_intrinsic": True,
        "attn_path": "fused",
        "out": "samples",
    },
    "train-estimator": {
        "data": _DATA,
        "out": "checkpoints/estimator.ildm",
        "steps": 3000,
        "lr": 1e-3,
        "batch_size": 16,
        "val_fraction": 0.1,
        "seed": 0,
    },
    "eval-consistency": {
        "checkpoint": "checkpoints/ildm.ildm",
        "image_vae": _IMAGE_VAE,
        "intrinsic_vae": _INTRINSIC_VAE,
        "estimator": "checkpoints/estimator.ildm",
        "data": _DATA,
        "n": 64,
        "seed": 0,
        "steps": 25,
        "cfg": 7.5,
        "num_seeds": 1,
        "schedule": "full",
        "out": "reports/consistency",
    },
    "verify-pgm": {
        "instances": 1000,
        "max_card": 4,
        "seed": 7,
        "out": "reports/verify_pgm",
    },
    "bench-attn": {
        "n": 256,
        "d": 64,
        "w": 0.5,
        "reps": 20,
        "num_heads": 1,
        "seed": 0,
        "out": "reports/bench_attn",
    },
    "mmd-report": {
        "data": _DATA,
        "image_vae": _IMAGE_VAE,
        "intrinsic_vae": _INTRINSIC_VAE,
        "n": 256,
        "bandwidth": None,
        "out": "reports/mmd.csv",
    },
}


def defaults(command):
    if command not in COMMAND_DEFAULTS:
        raise ConfigError(f"Unknown command '{command}'", key=command)
    return copy.deepcopy(COMMAND_DEFAULTS[command])


def read_parameters_file(path):
    """Load a parameters file, checking that every section and key is one we know about."""
    try:
        with open(path, "r") as f:
            parameters = yaml.load(f, Loader=yaml.SafeLoader) or {}
    except OSError as e:
        raise ContainerIOError(f"Cannot read parameters file: {e.strerror}", key=str(path)) from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Parameters file is not valid YAML: {e}", key=str(path)) from e
    if not isinstance(parameters, dict):
        raise ConfigError("Parameters file must be a mapping of command names", key=str(path))
    for command, section in parameters.items():
        if command not in COMMAND_DEFAULTS:
            raise ConfigError(f"Unknown command section '{command}' in {path}", key=command)
        if not isinstance(section, dict):
            raise ConfigError(f"Section '{command}' must be a mapping", key=command)
        unknown = sorted(set(section) - set(COMMAND_DEFAULTS[command]))
        if unknown:
            raise ConfigError(f"Unknown key(s) {unknown} for '{command}'", key=unknown[0])
    return parameters


def resolve(command, parameters_file=None, overrides=None):
    """
    Defaults, then the command's section of ``parameters_file`` (if given), then every override that is not None.
    """
    config = defaults(command)
    if parameters_file is not None:
        config.update(read_parameters_file(parameters_file).get(command, {}))
    for key, value in (overrides or {}).items():
        if key not in config:
            raise ConfigError(f"Unknown key '{key}' for '{command}'", key=key)
        if value is not None:
            config[key] = value
    return config


def require(config, *keys):
    """Raise a ConfigError naming the first key that has no value."""
    for key in keys:
        if config.get(key) is None:
            raise ConfigError(f"No value given for '{key}'", key=key)


def write_resolved(config, out_dir, command=None):
    """Write the fully resolved configuration next to a run's outputs. Returns the file path."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_CONFIG_FILE)
    document = {command: config} if command is not None else config
    with open(path, "w") as f:
        yaml.safe_dump(document, f, sort_keys=True, default_flow_style=False)
    return path
