"""AdamW with decoupled weight decay, warmup/decay schedule and gradient clipping."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

_BIAS_NAME = re.compile(r"b(\d*|[a-z]|_\w+)?|bias|gamma|beta")


@dataclass
class OptimizerConfig:
    peak_lr: float = 1e-4
    weight_decay: float = 0.01
    clip: float = 1.0
    clip_mode: str = "norm"  # norm | value
    warmup_fraction: float = 0.10
    total_steps: int = 1000
    batch_size: int = 16
    accumulation_steps: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        for name in ("peak_lr", "clip", "total_steps", "batch_size", "accumulation_steps", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.clip_mode not in ("norm", "value"):
            raise ConfigError(f"clip_mode must be 'norm' or 'value', got {self.clip_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear 0 -> peak over the warmup steps, then linear peak -> 0; 0 past the end."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    total = cfg.total_steps
    if step >= total:
        return 0.0
    warm = cfg.warmup_fraction * total
    if step < warm:
        return cfg.peak_lr * step / warm
    return cfg.peak_lr * (total - step) / (total - warm)


def decay_exempt(name: str) -> bool:
    """LayerNorm gains/offsets and biases are not weight-decayed."""
    return bool(_BIAS_NAME.fullmatch(name.rsplit(".", 1)[-1]))


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _require_finite(grads: dict):
    bad = [name for name, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradients in {', '.join(sorted(bad))}; step aborted")


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, cfg: OptimizerConfig) -> AdamWState:
    """One in-place AdamW update of ``params`` (name -> Tensor) from ``grads`` (name -> array).

    Parameters without a gradient entry are left untouched, moments included.
    """
    _require_finite(grads)
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.weight_decay and not decay_exempt(name):
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.data.dtype)
    return state


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values() if g is not None))


def clip_gradients(grads: dict, threshold: float, mode: str = "norm") -> tuple:
    """Return (clipped grads, pre-clip global norm).

    ``norm`` rescales every gradient by threshold/||g|| when the global L2
    norm exceeds the threshold; ``value`` clamps each entry to +-threshold.
    """
    if threshold <= 0:
        raise ConfigError("clip threshold must be positive")
    norm = global_norm(grads)
    if mode == "value":
        return {k: None if g is None else np.clip(g, -threshold, threshold) for k, g in grads.items()}, norm
    if mode != "norm":
        raise ConfigError(f"unknown clip mode {mode!r}")
    if norm <= threshold:
        return dict(grads), norm
    scale = threshold / norm
    return {k: None if g is None else (g * scale).astype(g.dtype) for k, g in grads.items()}, norm
