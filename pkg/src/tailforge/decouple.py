"""Rebalancing a trained network after representation learning.

Covers tau-normalization of the classifier rows (with a validation grid
search), classifier retraining under class-balanced sampling, and
finetuning on a small balanced subset of high-confidence samples.
"""

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .ensemble import mean_class_error_rate
from .exceptions import ConfigError, DegenerateWeightError
from .imageops import augment_batch
from .nnkernel import bn_features, init_classifier
from .optim import OptimConfig
from .sampling import SamplerKind
from .training import TrainSettings, train_classifier, train_model

DEFAULT_TAU_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class RebalanceConfig:
    tau: float = 0.6
    tau_grid: list = field(default_factory=lambda: list(DEFAULT_TAU_GRID))
    subset_per_class: int = 30
    subset_rule: str = "label_prob"
    finetune_scope: str = "classifier_only"
    finetune_epochs: int = 10
    retrain_mode: str = "retrain"
    feature_views: int = 0

    def validate(self):
        if not 0 <= self.tau <= 2:
            raise ConfigError("tau must lie in [0, 2]")
        if not self.tau_grid:
            raise ConfigError("tau_grid must not be empty")
        if self.subset_per_class < 1:
            raise ConfigError("subset_per_class must be >= 1")
        if self.subset_rule not in ("label_prob", "top1_prob"):
            raise ConfigError(f"unknown subset_rule {self.subset_rule!r}")
        if self.finetune_scope not in ("classifier_only", "full_network"):
            raise ConfigError(f"unknown finetune_scope {self.finetune_scope!r}")
        if self.retrain_mode not in ("retrain", "finetune"):
            raise ConfigError(f"unknown retrain_mode {self.retrain_mode!r}")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")
        if self.feature_views < 0:
            raise ConfigError("feature_views must be >= 0")
        return self


def tau_normalize(classifier_w, tau):
    """Scale each row ``w_i`` to ``w_i / ||w_i|| ** tau``.

    Returns a new array of the same dtype; the input is not modified.
    """
    w = np.asarray(classifier_w)
    norms = np.linalg.norm(w.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateWeightError(int(zero[0]))
    return (w / (norms ** tau)[:, None]).astype(w.dtype)


def apply_tau(params, tau):
    out = params.copy()
    out.classifier_w = tau_normalize(params.classifier_w, tau)
    return out


def grid_search_tau(params, images, labels, grid=DEFAULT_TAU_GRID):
    """Pick the tau with the lowest validation mean class error rate.

    Ties go to the smaller tau. Returns ``(best_tau, rows)`` where ``rows``
    lists ``(tau, mcer, top1)`` in ascending tau order.
    """
    if len(grid) == 0:
        raise ConfigError("tau grid must not be empty")
    labels = np.asarray(labels, dtype=np.int64)
    feats = bn_features(params, images)
    rows = []
    for tau in sorted(float(t) for t in grid):
        w = tau_normalize(params.classifier_w.astype(np.float64), tau)
        pred = np.argmax(feats @ w.T, axis=1)
        rows.append((tau, mean_class_error_rate(pred, labels, params.num_classes),
                     float(np.mean(pred == labels))))
    best = min(rows, key=lambda r: r[1])
    return best[0], rows


def write_tau_curve(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "mcer", "top1"])
        for tau, mcer, top1 in rows:
            w.writerow([repr(tau), repr(mcer), repr(top1)])


def _classifier_optim(optim, epochs):
    return dataclasses.replace(
        optim,
        total_epochs=epochs,
        warmup_epochs=0,
        decay_epochs=[e for e in (int(epochs * 0.6), int(epochs * 0.8)) if 0 < e < epochs]
        if epochs >= 5 else [],
    )


def retrain_classifier(params, images, labels, optim, rng, epochs=10, mode="retrain",
                       label_smoothing=0.0, epoch_size=0, views=0, augment=None):
    """Retrain (or finetune) only the classifier under class-balanced sampling.

    The backbone, embedding and BN tensors are frozen and BN runs in eval
    mode, so the classifier sees fixed features. ``mode="retrain"`` draws
    fresh N(0, 0.01) rows first; ``"finetune"`` starts from the current rows.

    With ``views=0`` the features come from the images as given. With
    ``views > 0`` they come from that many augmented copies of every image
    (``augment`` is an :class:`AugmentConfig`), drawn once up front; an
    epoch still has ``len(images)`` draws unless ``epoch_size`` says
    otherwise. Returns a new :class:`ModelParams`; ``params`` is untouched.
    """
    out = params.copy()
    if mode == "retrain":
        out.classifier_w = init_classifier(params.num_classes, params.d_emb, rng, params.dtype)
    elif mode != "finetune":
        raise ConfigError(f"unknown retrain mode {mode!r}")
    if epochs == 0:
        return out
    labels = np.asarray(labels, dtype=np.int64)
    if views:
        if augment is None:
            raise ConfigError("augmented feature views need an AugmentConfig")
        feats = np.concatenate(
            [bn_features(params, augment_batch(images, augment, rng)) for _ in range(views)]
        )
        labels = np.tile(labels, views)
        epoch_size = epoch_size or len(images)
    else:
        feats = bn_features(params, images)
    return train_classifier(
        feats, labels, out, _classifier_optim(optim, epochs),
        SamplerKind("CBS", epoch_size), rng, label_smoothing=label_smoothing,
    )


def build_balanced_subset(labels, probs, m, rule="label_prob"):
    """Top-``m`` samples per class ranked by model confidence.

    With ``rule="label_prob"`` samples labelled ``c`` are ranked by the
    probability the model gives to ``c``; ``"top1_prob"`` ranks them by
    their top-1 probability instead. Ties go to the lower index. Returns
    indices grouped by class in ascending class order.
    """
    if m < 1:
        raise ConfigError("m must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs)
    if rule == "label_prob":
        score = probs[np.arange(len(labels)), labels]
    elif rule == "top1_prob":
        score = probs.max(axis=1)
    else:
        raise ConfigError(f"unknown subset rule {rule!r}")
    out = []
    for c in range(probs.shape[1]):
        members = np.flatnonzero(labels == c)
        order = np.lexsort((members, -score[members]))
        out.extend(int(i) for i in members[order[:m]])
    return out


def finetune_on_subset(params, images, labels, subset, settings, rng, epochs=10,
                       scope="classifier_only"):
    """Finetune on a subset with instance-balanced sampling.

    ``scope="classifier_only"`` trains just ``classifier_w`` on frozen
    eval-mode features; ``"full_network"`` trains every tensor. Returns a
    new :class:`ModelParams`.
    """
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise ConfigError("subset must not be empty")
    out = params.copy()
    if epochs == 0:
        return out
    optim = _classifier_optim(settings.optim, epochs)
    x, y = images[subset], np.asarray(labels)[subset]
    if scope == "classifier_only":
        feats = bn_features(params, x)
        return train_classifier(feats, y, out, optim, SamplerKind("IBS"), rng,
                                label_smoothing=settings.label_smoothing)
    if scope == "full_network":
        ibs = dataclasses.replace(settings, sampler=SamplerKind("IBS"))
        return train_model(x, y, params.num_classes, ibs, rng, params=out, optim=optim)
    raise ConfigError(f"unknown finetune scope {scope!r}")


__all__ = [
    "RebalanceConfig",
    "TrainSettings",
    "OptimConfig",
    "apply_tau",
    "build_balanced_subset",
    "finetune_on_subset",
    "grid_search_tau",
    "retrain_classifier",
    "tau_normalize",
    "write_tau_curve",
]
