"""Epoch index streams for instance- and class-balanced sampling."""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError


@dataclass
class SamplerKind:
    """``kind`` is ``"IBS"`` or ``"CBS"``; ``epoch_size`` 0 means "N"."""

    kind: str = "IBS"
    epoch_size: int = 0

    def validate(self):
        if self.kind not in ("IBS", "CBS"):
            raise ConfigError(f"sampler kind must be IBS or CBS, got {self.kind!r}")
        if self.epoch_size < 0:
            raise ConfigError("epoch_size must be >= 0")
        return self


def instance_balanced_epoch(n, rng):
    """Every index in ``range(n)`` exactly once, in random order."""
    if n < 1:
        raise ConfigError("need n >= 1")
    return rng.permutation(n)


def group_by_class(labels, num_classes):
    labels = np.asarray(labels)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(num_classes + 1))
    return [order[bounds[c]:bounds[c + 1]] for c in range(num_classes)]


def class_balanced_epoch(class_to_indices, epoch_size, rng):
    """Draw a class uniformly, then a member of it uniformly, ``epoch_size`` times."""
    if epoch_size < 1:
        raise ConfigError("epoch_size must be >= 1")
    members = [np.asarray(ix) for ix in class_to_indices]
    for c, ix in enumerate(members):
        if len(ix) == 0:
            raise ConfigError(f"class {c} has no samples; cannot balance over it")
    counts = np.array([len(ix) for ix in members])
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    flat = np.concatenate(members)
    cls = rng.integers(0, len(members), size=epoch_size)
    pos = np.floor(rng.random(epoch_size) * counts[cls]).astype(np.int64)
    return flat[offsets[cls] + pos]


def epoch_indices(sampler, labels, num_classes, rng):
    """Indices (positions into ``labels``) for one epoch under ``sampler``.

    Classes absent from ``labels`` are left out of class-balanced draws.
    """
    n = len(labels)
    if sampler.kind == "IBS":
        return instance_balanced_epoch(n, rng)
    groups = [g for g in group_by_class(labels, num_classes) if len(g)]
    return class_balanced_epoch(groups, sampler.epoch_size or n, rng)
