"""Plain-text key-value config files and the tuned/original presets.

Keys are named exactly like the hyperparameter-table entries (position_lr_init,
lambda_dssim, ...). A resolved dump reparses to an identical configuration.
"""

from __future__ import annotations

from dataclasses import fields

from .losses import LossWeights
from .optim import OptimConfig

PRESETS = ("tuned", "original")

# original-preset densification schedule (tuned values are the dataclass
# defaults, following the main hyperparameter table)
_ORIGINAL_OPTIM = dict(densification_interval=100, opacity_reset_interval=3000,
                       densify_from_iter=500, densify_until_iter=15000,
                       densify_grad_threshold=0.0002)


def preset(name: str):
    """(LossWeights, OptimConfig) for a named preset."""
    if name == "tuned":
        return LossWeights.tuned(), OptimConfig()
    if name == "original":
        return LossWeights.original(), OptimConfig(**_ORIGINAL_OPTIM)
    raise ValueError(f"unknown preset {name!r} (expected one of {PRESETS})")


def _format_value(v):
    if isinstance(v, bool):
        return "True" if v else "False"
    if isinstance(v, tuple):
        return "[" + ", ".join(repr(float(x)) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str):
    t = text.strip()
    if t in ("True", "False"):
        return t == "True"
    if t.startswith("[") and t.endswith("]"):
        return tuple(float(x) for x in t[1:-1].split(",") if x.strip())
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def dump_config(weights: LossWeights, cfg: OptimConfig) -> str:
    lines = []
    for f in fields(cfg):
        lines.append(f"{f.name} {_format_value(getattr(cfg, f.name))}")
    for f in fields(weights):
        lines.append(f"{f.name} {_format_value(getattr(weights, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def parse_config(text: str, weights: LossWeights = None, cfg: OptimConfig = None):
    """Apply key-value lines on top of the given (or tuned) configuration."""
    weights = weights if weights is not None else LossWeights.tuned()
    cfg = cfg if cfg is not None else OptimConfig()
    wnames = {f.name for f in fields(LossWeights)}
    cnames = {f.name for f in fields(OptimConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if not rest:
            key, _, rest = line.partition("=")
        value = _parse_value(rest)
        if key in wnames:
            setattr(weights, key, value)
        elif key in cnames:
            setattr(cfg, key, value)
        else:
            raise KeyError(f"line {lineno}: unknown configuration key {key!r}")
    return weights, cfg


def apply_overrides(weights, cfg, overrides):
    """Apply `key=value` strings (CLI --set)."""
    for item in overrides or []:
        key, _, val = item.partition("=")
        _ = parse_config(f"{key} {val}", weights, cfg)
    return weights, cfg
