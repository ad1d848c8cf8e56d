"""Experiment configuration: presets, resolution and validation.

A config file is JSON. Whatever it sets is laid over the chosen preset
(``paper`` or ``desk``); the result is the *resolved* config, which is what
gets snapshotted into a run directory. Resolving a resolved config returns
it unchanged.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .losses import GAN_MODES, LossWeights
from .models import DiscriminatorConfig, GeneratorConfig, UNetConfig, min_discriminator_input
from .training import EssNetTrainConfig, UNetTrainConfig


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


_PAPER = {
    "preset": "paper",
    "seed": 0,
    "image_size": 256,
    "data": {"a": None, "b": None, "test": None},
    "generator": {"base_width": 64, "res_blocks": 9},
    "disc": {"base_width": 64},
    "loss": {
        "lambda1": 1.0,
        "lambda2": 1.0,
        "lambda3": 10.0,
        "lambda4": 10.0,
        "lambda5": 1.0,
        "gan_mode": "nonsaturating",
    },
    "essnet": {
        "epochs": 100,
        "batch_size": 1,
        "lr_g": 1e-4,
        "lr_d": 2e-4,
        "beta1": 0.5,
        "beta2": 0.999,
        "ablation_no_seg": False,
        "checkpoint_every": 10,
        "keep_last": 3,
    },
    "unet": {
        "base_width": 64,
        "depth": 5,
        "head_conv": False,
        "epochs": 300,
        "batch_size": 2,
        "lr": 1e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "checkpoint_every": 10,
        "keep_last": 3,
        "threshold": 0.5,
        # synthetic slices added to the real set, one U-Net per entry
        "arrangements": [0, 354, 714, 1034, 1487, 2050],
    },
    "pipeline": {"cyclegan_ablation": False, "ablation_takes": [714]},
}

_DESK_OVERRIDES = {
    "preset": "desk",
    "image_size": 64,
    "generator": {"base_width": 16},
    "disc": {"base_width": 16},
    "essnet": {"epochs": 5, "checkpoint_every": 5},
    "unet": {"base_width": 16, "epochs": 40, "checkpoint_every": 10, "arrangements": [0, 20]},
    "pipeline": {"ablation_takes": [20]},
}

# values a preset pins; a config that overrides them is inconsistent
_PINNED = {
    "paper": {
        "image_size": 256,
        "generator.base_width": 64,
        "disc.base_width": 64,
        "unet.base_width": 64,
        "loss.lambda1": 1.0,
        "loss.lambda2": 1.0,
        "loss.lambda3": 10.0,
        "loss.lambda4": 10.0,
        "loss.lambda5": 1.0,
        "essnet.lr_g": 1e-4,
        "essnet.lr_d": 2e-4,
        "essnet.epochs": 100,
        "essnet.batch_size": 1,
        "unet.epochs": 300,
        "unet.batch_size": 2,
    },
    "desk": {
        "image_size": 64,
        "generator.base_width": 16,
        "disc.base_width": 16,
        "unet.base_width": 16,
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset_defaults(name: str) -> dict:
    if name == "paper":
        return copy.deepcopy(_PAPER)
    if name == "desk":
        return _merge(_PAPER, _DESK_OVERRIDES)
    raise ConfigError([f"preset must be 'paper' or 'desk', got {name!r}"])


def _fingerprint(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "run_id"}
    return hashlib.sha1(json.dumps(body, sort_keys=True).encode()).hexdigest()[:8]


def resolve(user: dict) -> dict:
    cfg = _merge(preset_defaults(user.get("preset", "paper")), user)
    if not cfg.get("run_id"):
        cfg["run_id"] = f"{cfg['preset']}-{_fingerprint(cfg)}"
    return cfg


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


# ---------------------------------------------------------------------------
# validation

_INT_MIN = {
    "seed": 0,
    "image_size": 16,
    "generator.base_width": 4,
    "generator.res_blocks": 1,
    "disc.base_width": 1,
    "unet.base_width": 1,
    "unet.depth": 2,
    "essnet.epochs": 1,
    "essnet.batch_size": 1,
    "essnet.checkpoint_every": 1,
    "essnet.keep_last": 1,
    "unet.epochs": 1,
    "unet.batch_size": 1,
    "unet.checkpoint_every": 1,
    "unet.keep_last": 1,
}
_POSITIVE = ["essnet.lr_g", "essnet.lr_d", "unet.lr"]
_UNIT_INTERVAL = ["essnet.beta1", "essnet.beta2", "unet.beta1", "unet.beta2", "unet.threshold"]
_NON_NEGATIVE = [f"loss.lambda{i}" for i in range(1, 6)]
_BOOLS = ["essnet.ablation_no_seg", "unet.head_conv", "pipeline.cyclegan_ablation"]


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _unknown_keys(user: dict, ref: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in user.items():
        name = f"{prefix}{k}"
        if k == "run_id" and not prefix:
            continue
        if k not in ref:
            out.append(f"unknown key {name}")
        elif isinstance(ref[k], dict):
            if not isinstance(v, dict):
                out.append(f"{name} must be an object")
            else:
                out += _unknown_keys(v, ref[k], name + ".")
    return out


def validate_resolved(cfg: dict, user: dict | None = None) -> list[str]:
    diags = []
    for key, lo in _INT_MIN.items():
        v = get(cfg, key)
        if not isinstance(v, int) or isinstance(v, bool):
            diags.append(f"{key} must be an integer")
        elif v < lo:
            diags.append(f"{key} must be ≥ {lo}")
    for key in _POSITIVE:
        v = get(cfg, key)
        if not _is_number(v) or v <= 0:
            diags.append(f"{key} must be > 0")
    for key in _UNIT_INTERVAL:
        v = get(cfg, key)
        if not _is_number(v) or not 0 <= v < 1:
            diags.append(f"{key} must be in [0, 1)")
    for key in _NON_NEGATIVE:
        v = get(cfg, key)
        if not _is_number(v) or not v >= 0:
            diags.append(f"{key} must be ≥ 0")
    for key in _BOOLS:
        if not isinstance(get(cfg, key), bool):
            diags.append(f"{key} must be true or false")
    if cfg["loss"]["gan_mode"] not in GAN_MODES:
        diags.append(f"loss.gan_mode must be one of {', '.join(GAN_MODES)}")
    for key in ("unet.arrangements", "pipeline.ablation_takes"):
        v = get(cfg, key)
        if not isinstance(v, list) or not v or not all(isinstance(n, int) and not isinstance(n, bool) and n >= 0 for n in v):
            diags.append(f"{key} must be a nonempty list of integers ≥ 0")
        elif len(set(v)) != len(v):
            diags.append(f"{key} has duplicate entries")
    for key in ("a", "b", "test"):
        v = cfg["data"].get(key)
        if v is not None and not isinstance(v, str):
            diags.append(f"data.{key} must be a path string")

    size, depth = cfg["image_size"], cfg["unet"]["depth"]
    if isinstance(size, int) and isinstance(depth, int) and depth >= 2 and size >= 16:
        if size % 4:
            diags.append("image_size must be divisible by 4 (generator downsampling)")
        if size % 2 ** (depth - 1):
            diags.append(f"image_size must be divisible by {2 ** (depth - 1)} (U-Net depth {depth})")
        if size < min_discriminator_input(DiscriminatorConfig()):
            diags.append("image_size too small for the patch discriminator")

    preset = cfg.get("preset")
    if preset not in _PINNED:
        diags.append(f"preset must be 'paper' or 'desk', got {preset!r}")
    else:
        for key, want in _PINNED[preset].items():
            have = get(cfg, key)
            if _is_number(have) and have != want:
                diags.append(f"{key}={have} conflicts with preset {preset} (requires {want})")
    return diags


def load_user_config(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ConfigError([f"fatal: cannot read config {path}: {err}"]) from err
    if not isinstance(data, dict):
        raise ConfigError([f"fatal: config {path} must hold a JSON object"])
    return data


def validate_config(path: str | Path) -> list[str]:
    """Diagnostics for the config file at ``path``; an empty list means valid."""
    try:
        user = load_user_config(path)
    except ConfigError as err:
        return err.diagnostics
    preset = user.get("preset", "paper")
    if preset not in _PINNED:
        return [f"preset must be 'paper' or 'desk', got {preset!r}"]
    diags = _unknown_keys(user, preset_defaults(preset))
    if diags:
        return diags
    return validate_resolved(resolve(user))


def load_config(path: str | Path) -> dict:
    diags = validate_config(path)
    if diags:
        raise ConfigError(diags)
    return resolve(load_user_config(path))


# ---------------------------------------------------------------------------
# typed views


def generator_config(cfg: dict) -> GeneratorConfig:
    return GeneratorConfig(base_width=cfg["generator"]["base_width"], n_res_blocks=cfg["generator"]["res_blocks"])


def discriminator_config(cfg: dict) -> DiscriminatorConfig:
    return DiscriminatorConfig(base_width=cfg["disc"]["base_width"])


def unet_config(cfg: dict) -> UNetConfig:
    u = cfg["unet"]
    return UNetConfig(base_width=u["base_width"], depth=u["depth"], head_conv=u["head_conv"])


def loss_weights(cfg: dict) -> LossWeights:
    return LossWeights(**{f"lambda{i}": float(cfg["loss"][f"lambda{i}"]) for i in range(1, 6)})


def essnet_train_config(cfg: dict, ablation_no_seg: bool | None = None) -> EssNetTrainConfig:
    e = cfg["essnet"]
    return EssNetTrainConfig(
        epochs=e["epochs"],
        batch_size=e["batch_size"],
        lr_g=e["lr_g"],
        lr_d=e["lr_d"],
        betas=(e["beta1"], e["beta2"]),
        weights=loss_weights(cfg),
        seed=cfg["seed"],
        ablation_no_seg=e["ablation_no_seg"] if ablation_no_seg is None else ablation_no_seg,
        gan_mode=cfg["loss"]["gan_mode"],
        checkpoint_every=e["checkpoint_every"],
        keep_last=e["keep_last"],
        generator=generator_config(cfg),
        discriminator=discriminator_config(cfg),
    )


def unet_train_config(cfg: dict) -> UNetTrainConfig:
    u = cfg["unet"]
    return UNetTrainConfig(
        epochs=u["epochs"],
        batch_size=u["batch_size"],
        lr=u["lr"],
        betas=(u["beta1"], u["beta2"]),
        seed=cfg["seed"],
        checkpoint_every=u["checkpoint_every"],
        keep_last=u["keep_last"],
        unet=unet_config(cfg),
    )
