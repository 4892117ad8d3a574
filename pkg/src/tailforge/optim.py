"""SGD with momentum, weight decay and a warmup + step-decay schedule."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, NumericError


@dataclass
class OptimConfig:
    """Optimizer and schedule settings.

    The learning rate scales linearly with batch size:
    ``base_lr_per_256 * batch_size / 256``.
    """

    base_lr_per_256: float = 0.01
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 2
    decay_epochs: list = field(default_factory=lambda: [14, 20])
    decay_ratio: float = 0.1
    total_epochs: int = 24
    warmup_granularity: str = "step"

    @property
    def base_lr(self):
        return self.base_lr_per_256 * self.batch_size / 256

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (BN needs batch statistics)")
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ConfigError("decay_epochs must be strictly increasing")
        if not 0 < self.decay_ratio < 1:
            raise ConfigError("decay_ratio must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.warmup_epochs < 0 or self.total_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.warmup_granularity not in ("step", "epoch"):
            raise ConfigError("warmup_granularity must be 'step' or 'epoch'")
        return self


@dataclass
class OptimState:
    velocity: dict
    step: int = 0
    steps_per_epoch: int = 1

    @classmethod
    def zeros_like(cls, tensors, steps_per_epoch=1):
        return cls({k: np.zeros_like(v) for k, v in tensors.items()}, 0, steps_per_epoch)


def lr_at(step, cfg, steps_per_epoch):
    """Learning rate for a global step.

    Linear per-step warmup over ``warmup_epochs`` epochs (factor
    ``(step + 1) / warmup_steps``), then ``decay_ratio`` applied once for
    every decay boundary already reached. With ``warmup_granularity`` set
    to ``"epoch"`` the ramp moves once per epoch instead.
    """
    if steps_per_epoch <= 0:
        raise ConfigError("steps_per_epoch must be positive")
    if step < 0:
        raise ConfigError("step must be non-negative")
    base = cfg.base_lr
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    if step < warmup_steps:
        if cfg.warmup_granularity == "epoch":
            return base * (step // steps_per_epoch + 1) / cfg.warmup_epochs
        return base * (step + 1) / warmup_steps
    passed = sum(1 for e in cfg.decay_epochs if step >= e * steps_per_epoch)
    return base * cfg.decay_ratio ** passed


def decays(name):
    """Whether weight decay applies: not to biases or BN affine parameters."""
    return not (name.endswith("_b") or name.startswith("bn_"))


def sgd_update(params, grads, state, lr, cfg):
    """One momentum-SGD step on the tensors named in ``grads``.

    Tensors absent from ``grads`` are left untouched, which is how frozen
    parts of the network are expressed.
    """
    live = params.trainable()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        p = live[name]
        if cfg.weight_decay and decays(name):
            g = g + cfg.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= cfg.momentum
        v += g
        p -= (lr * v).astype(p.dtype, copy=False)
    state.step += 1
