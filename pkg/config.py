import copy
import logging
import os
import random
from pathlib import Path

import numpy as np
import torch
import yaml

from errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = "1.2"
OUTPUT_ROOT_ENV = "REGIONMAKEUP_OUTPUT_ROOT"

REGIONS = ("skin", "eyes", "nose", "mouth")

# ====== DEFAULTS PROFILE ======
DEFAULTS = {
    "data": {
        "canvas": 64,
        "image_size": 64,
        "report_size": 128,
        "num_styles": 50,
        "num_faces": 40,
        "styles_per_face": None,    # None = every face gets every style
        "style_margin": 0.05,       # minimum per-region color gap between styles
        "workers": 1,
    },
    "pairs": {
        "iou_threshold": 0.6,
        "iou_regions": ["eyes", "mouth"],
        "misalignment_rate": 0.3,
        "max_rotation_deg": 8.0,
        "max_scale": 0.08,
        "max_translation": 4.0,
        "min_translation": 1.0,
        "feather_radius": 2,
        "align": True,
    },
    "augment": {
        "tps_grid": 3,
        "tps_scale": 2.0,
        "crop_scale": [0.8, 1.0],
        "flip_prob": 0.5,
        "rotation_deg": 10.0,
        "translation": 3.0,
        "scale": [0.9, 1.1],
    },
    "style_encoder": {
        "image_size": 64,
        "patch_size": 8,
        "width": 128,
        "depth": 4,
        "heads": 4,
        "embed_dim": 64,
        "trainable_blocks": 1,
        "text_width": 64,
    },
    "stage1": {
        "steps": 400,
        "batch_size": 32,
        "lr": 3.0e-4,
        "tau": 0.1,
        "use_ssl": True,
        "use_text": True,
        "symmetric_ssl": True,
        "log_every": 20,
    },
    "denoiser": {
        "image_size": 64,
        "channels": [32, 64, 64],
        "heads": 4,
        "time_dim": 128,
        "timesteps": 1000,
        "beta_start": 1.0e-4,
        "beta_end": 0.02,
        "prompt": "a person with makeup",
    },
    "base_training": {
        "steps": 2000,
        "batch_size": 16,
        "lr": 2.0e-4,
        "log_every": 50,
    },
    "transfer": {
        "num_regions": 4,
        "query_dim": 64,
        "region_dim": 64,
        "projector_depth": 2,
        "projector_heads": 4,
        "lora_rank": 4,
        "lambda_attn": 1.0,
        "focal_alpha": 0.25,
        "focal_gamma": 2.0,
        "dice_reduction": "region",
        "use_pixel": True,
        "use_structure": True,
        "use_lora": True,
        "steps": 2000,
        "batch_size": 8,
        "lr": 1.0e-4,
        "log_every": 50,
    },
    "sampler": {
        "steps": 50,
        "eta": 0.0,
        "inpaint": True,
    },
    "eval": {
        "knn_k": 5,
        "ssim_window": 8,
        "num_eval_pairs": 8,
    },
    "ablation": {
        "encoder": ["none", "ssl", "text", "ssl+text"],
        "injection": [
            {"lora": True, "pixel": True, "structure": True},
            {"lora": False, "pixel": True, "structure": True},
            {"lora": True, "pixel": False, "structure": True},
            {"lora": True, "pixel": True, "structure": False},
        ],
        "attention": [False, True],
    },
    "runtime": {
        "seed": 0,
        "device": "cpu",
        "log_level": "INFO",
    },
}


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where)
        elif isinstance(base[key], dict):
            raise ConfigError(f"config key '{where}' must be a mapping")
        else:
            base[key] = value
    return base


def load_config(path=None, overrides=None):
    """
    Resolve a run configuration.
    Parameters:
        path: YAML key-value file merged over DEFAULTS (None = defaults profile)
        overrides: nested dict applied last (CLI flags)
    Returns:
        a fresh nested dict
    """
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        loaded.pop("schema_version", None)
        _merge(config, loaded)
    if overrides:
        _merge(config, overrides)
    return config


def save_config(config, path):
    data = {"schema_version": CONFIG_SCHEMA_VERSION, **config}
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=True)


def output_dir(out):
    """Relative output paths are resolved against $REGIONMAKEUP_OUTPUT_ROOT when set."""
    out = Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def device_of(config):
    wanted = config["runtime"]["device"]
    if wanted.startswith("cuda") and not torch.cuda.is_available():
        logger.warning("CUDA requested but not available, falling back to CPU")
        return torch.device("cpu")
    return torch.device(wanted)
