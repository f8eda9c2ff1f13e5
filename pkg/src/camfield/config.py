"""Run configuration: defaults, config-file merge, flag overrides.

A run config is a nested mapping resolved completely before any work starts
and written verbatim into the run directory, so a run can be reproduced from
its own output.
"""

import copy

import yaml

DEFAULTS = {
    "scene": None,                 # path to a scene file
    "labels": None,                # label directory (defaults to scene dir)
    "out": "runs/out",
    "seed": 0,
    "train": {
        "lr_init": 5e-4,
        "schedule": "cosine",
        "gamma": 0.9995,
        "static_steps": 2000,
        "dynamic_steps": 1000,
        "rays_per_batch": 1024,
        "dynamic_rays_per_batch": 512,
        "samples_per_ray": 48,
        "lambda_static": 1.0,
        "lambda_dynamic": 1.0,
        "lambda_optical": 0.1,
        "lambda_cycle": 1.0,
        "smooth_weight": 0.1,
        "max_grad_norm": 0.0,
        "hold_out": [],            # [camera_id, timestamp] pairs kept unseen
    },
    "model": {
        "levels": 8,
        "base_resolution": 16,
        "finest_resolution": 256,
        "table_size": 65536,
        "feature_dim": 2,
        "hidden": 64,
        "code_dim": 16,
        "bev_channels": 16,
        "bev_dims": [32, 32, 32],
    },
    "render": {
        "samples": 160,
        "chunk": 4096,
    },
    "failure": {
        "mode": "failed",
        "expected_count": 1,
        "seed": 0,
        "explicit": [],
    },
    "evaluate": {
        "time": None,              # defaults to the middle timestamp
        "counts": [0, 1, 2, 3],
    },
}


def _deep_merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None):
    """Defaults, overlaid with a YAML config file when given."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError("config file must contain a mapping")
    unknown = set(doc) - set(DEFAULTS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return _deep_merge(DEFAULTS, doc)


def apply_override(cfg, dotted, value):
    """Apply one ``section.key=value`` override in place (parsed as YAML)."""
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise KeyError(f"unknown config path {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise KeyError(f"unknown config key {dotted!r}")
    node[keys[-1]] = yaml.safe_load(value)


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True, default_flow_style=None)


def train_config_from(cfg):
    from .train import TrainConfig
    t = cfg["train"]
    return TrainConfig(lr_init=t["lr_init"], schedule=t["schedule"],
                       gamma=t["gamma"], static_steps=t["static_steps"],
                       dynamic_steps=t["dynamic_steps"],
                       rays_per_batch=t["rays_per_batch"],
                       dynamic_rays_per_batch=t["dynamic_rays_per_batch"],
                       samples_per_ray=t["samples_per_ray"],
                       lambda_static=t["lambda_static"],
                       lambda_dynamic=t["lambda_dynamic"],
                       lambda_optical=t["lambda_optical"],
                       lambda_cycle=t["lambda_cycle"],
                       smooth_weight=t["smooth_weight"],
                       max_grad_norm=t["max_grad_norm"],
                       seed=cfg["seed"])
