"""Run configuration as flat ``section.key = value`` text.

Unknown keys are errors. Values are parsed according to the type of the
default, so ``parse(serialize(cfg)) == cfg`` holds for every config.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # synthetic data
    data_n_train: int = 200
    data_n_eval: int = 50
    scene_views: int = 4
    scene_channels: int = 16
    scene_height: int = 16
    scene_width: int = 32
    scene_fov_deg: float = 90.0
    scene_vfov_deg: float = 30.0
    scene_min_boxes: int = 2
    scene_max_boxes: int = 6
    scene_min_distance: float = 10.0
    scene_noise: float = 0.1
    # depth encoders
    depth_d_min: float = 1.0
    depth_d_max: float = 75.0
    depth_bins: int = 16
    ode_k: int = 13
    ode_embed_dim: int = 32
    ode_hidden: int = 64
    # position embedding
    pe_variant: str = "object"
    pe_dim_per_axis: int = 16
    pe_ray_candidates: int = 8
    # decoder
    decoder_layers: int = 3
    decoder_queries: int = 32
    decoder_dim: int = 64
    decoder_ffn_dim: int = 128
    decoder_spatial_prior: float = 50.0
    # losses
    loss_alpha: float = 0.25
    loss_gamma: float = 2.0
    loss_pde: float = 1.0
    loss_ode: float = 5.0
    loss_dfl: float = 2.0
    loss_reg: float = 0.25
    # optimisation
    optim_lr: float = 2e-3
    optim_beta1: float = 0.9
    optim_beta2: float = 0.999
    optim_eps: float = 1e-8
    optim_weight_decay: float = 0.0
    optim_grad_clip: float = 10.0
    train_epochs: int = 1
    # evaluation
    eval_ap_threshold: float = 4.0
    eval_class_aware: int = 0

    def __post_init__(self):
        from .posembed import VARIANTS
        if self.pe_variant not in VARIANTS:
            raise ConfigError(f"pe.variant must be one of {VARIANTS}, got {self.pe_variant!r}")
        for name in ("data_n_train", "decoder_layers", "decoder_queries", "train_epochs", "ode_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{dotted(name)} must be at least 1")
        if self.data_n_eval < 0:
            raise ConfigError("data.n_eval must be nonnegative")
        if self.decoder_queries < self.scene_max_boxes:
            raise ConfigError("decoder.queries must be at least scene.max_boxes")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {dotted(f.name): getattr(self, f.name) for f in dataclasses.fields(self)}


def dotted(field_name):
    """``decoder_layers`` -> ``decoder.layers`` (first underscore only)."""
    head, sep, tail = field_name.partition("_")
    return f"{head}.{tail}" if sep and head != "seed" else field_name


_FIELDS = {dotted(f.name): f for f in dataclasses.fields(RunConfig)}


def _convert(key, text, kind):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return str(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config(text, base=None):
    """Parse ``key = value`` lines over ``base`` (defaults). ``#`` starts a comment."""
    base = RunConfig() if base is None else base
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        f = _FIELDS[key]
        kind = type(getattr(base, f.name))
        changes[f.name] = _convert(key, value, kind)
    return base.replace(**changes)


def serialize_config(cfg):
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                   for k, v in cfg.to_dict().items())


def load_config(path):
    """Read a config file; a JSON run manifest is accepted and its config replayed."""
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        try:
            manifest = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON manifest: {exc}") from None
        if "config" not in manifest:
            raise ConfigError(f"{path}: manifest has no 'config' section")
        return config_from_dict(manifest["config"])
    return parse_config(text)


def config_from_dict(d):
    lines = [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in d.items()]
    return parse_config("\n".join(lines))
