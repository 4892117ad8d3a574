"""Iterative confidence-based cleaning of noisy training labels.

Each round scores the surviving training samples, drops (or relabels)
the ones whose prediction disagrees with the given label at low
confidence, and retrains on what is left. Drops are soft: the stored
dataset is never modified, only an index set and a relabel map.
"""

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .decouple import retrain_classifier
from .ensemble import records_from_probs
from .exceptions import ClassExhaustionError, ConfigError
from .nnkernel import predict_proba
from .synthbench import Dataset
from .training import train_model

RULES = ("drop_mismatch_lowconf", "drop_lowlabelprob")


@dataclass
class CleaningConfig:
    """Knobs of the cleaning loop.

    ``scoring`` picks the model that scores the training set: ``"model"``
    uses the network as trained, ``"crt"`` first retrains a copy of its
    classifier under class-balanced sampling so tail samples are not
    flagged merely for being rare. ``retrain_epochs_per_round`` of None
    reuses the base training schedule.
    """

    rounds: int = 3
    rule: str = "drop_mismatch_lowconf"
    conf_threshold: float = 0.5
    threshold_mode: str = "absolute"
    conf_quantile: float = 0.5
    relabel_enabled: bool = False
    relabel_threshold: float = 0.9
    retrain_epochs_per_round: int = None
    warm_start: bool = False
    scoring: str = "crt"
    scoring_epochs: int = 10
    top_k: int = 10

    def validate(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.rule not in RULES:
            raise ConfigError(f"unknown cleaning rule {self.rule!r}")
        if not 0 < self.conf_threshold < 1:
            raise ConfigError("conf_threshold must lie in (0, 1)")
        if self.threshold_mode not in ("absolute", "quantile"):
            raise ConfigError(f"unknown threshold_mode {self.threshold_mode!r}")
        if not 0 <= self.conf_quantile <= 1:
            raise ConfigError("conf_quantile must lie in [0, 1]")
        if self.relabel_enabled and not (
            self.conf_threshold <= self.relabel_threshold <= 1
        ):
            raise ConfigError("relabel_threshold must lie in [conf_threshold, 1]")
        if self.retrain_epochs_per_round is not None and self.retrain_epochs_per_round < 0:
            raise ConfigError("retrain_epochs_per_round must be >= 0")
        if self.scoring not in ("model", "crt"):
            raise ConfigError(f"unknown scoring {self.scoring!r}")
        if self.scoring_epochs < 0 or self.top_k < 1:
            raise ConfigError("scoring_epochs must be >= 0 and top_k >= 1")
        return self


@dataclass
class CleaningRound:
    round_index: int
    kept: int
    dropped: int
    relabeled: int
    relabeled_correct: int
    oracle_precision: float
    oracle_recall: float
    threshold: float
    post_retrain_val_top1: float = None


@dataclass
class CleaningHistory:
    rounds: list = field(default_factory=list)
    surviving: list = field(default_factory=list)
    relabel_map: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "rounds": [dataclasses.asdict(r) for r in self.rounds],
            "surviving": [int(i) for i in self.surviving],
            "relabel_map": {str(k): int(v) for k, v in sorted(self.relabel_map.items())},
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(
            [CleaningRound(**r) for r in obj["rounds"]],
            list(obj["surviving"]),
            {int(k): int(v) for k, v in obj["relabel_map"].items()},
        )


@dataclass
class CleanedView:
    """Surviving subset of a dataset with possibly corrected labels."""

    base: Dataset
    indices: np.ndarray
    labels: np.ndarray

    @property
    def images(self):
        return self.base.images[self.indices]

    @property
    def true_labels(self):
        return self.base.true_labels[self.indices]

    @property
    def flip_mask(self):
        return self.labels != self.true_labels

    def __len__(self):
        return len(self.indices)

    def to_dataset(self):
        return Dataset(
            self.images, self.labels.astype(np.uint32), self.true_labels.copy(),
            self.flip_mask, self.base.spec, self.base.split,
        )


def score_training_set(params, images, k=10, ids=None, batch_size=256):
    """Eval-mode top-``k`` records for every image, in input order."""
    return records_from_probs(predict_proba(params, images, batch_size), k, ids)


def _top1(records):
    cls = np.array([r.top[0][0] if r.top else -1 for r in records], dtype=np.int64)
    prob = np.array([r.top[0][1] if r.top else 0.0 for r in records])
    return cls, prob


def select_noisy(records, labels, cfg):
    """Flag suspected label noise.

    Returns ``(drop_mask, relabel_map, threshold)``. ``relabel_map`` maps a
    position in ``records`` to its new class. Samples whose top-1 class
    equals their label are never flagged.
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(records):
        raise ConfigError("records and labels differ in length")
    top_cls, top_p = _top1(records)
    mismatch = top_cls != labels
    if cfg.rule == "drop_mismatch_lowconf":
        score = top_p
    else:
        score = np.array([r.prob_of(int(y)) for r, y in zip(records, labels)])
    theta = cfg.conf_threshold
    if cfg.threshold_mode == "quantile":
        theta = float(np.quantile(score[mismatch], cfg.conf_quantile)) if mismatch.any() else 0.0
    drop = mismatch & (score < theta)
    relabel = {}
    if cfg.relabel_enabled:
        hi = mismatch & (top_p >= cfg.relabel_threshold)
        relabel = {int(i): int(top_cls[i]) for i in np.flatnonzero(hi)}
        drop &= ~hi
    return drop, relabel, float(theta)


def confidence_histogram(records, labels, bins=10):
    """Counts of top-1 confidence over ``bins`` uniform bins of [0, 1].

    Rows are ``(bin_low, bin_high, agree, disagree)``, split by whether the
    top-1 class matches the given label.
    """
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    labels = np.asarray(labels, dtype=np.int64)
    top_cls, top_p = _top1(records)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.floor(top_p * bins).astype(np.int64), 0, bins - 1)
    agree = np.bincount(idx[top_cls == labels], minlength=bins)
    disagree = np.bincount(idx[top_cls != labels], minlength=bins)
    return [(float(edges[b]), float(edges[b + 1]), int(agree[b]), int(disagree[b]))
            for b in range(bins)]


def histogram_means(rows):
    """Count-weighted mean bin centre of the agree and disagree columns."""
    centres = np.array([(lo + hi) / 2 for lo, hi, _, _ in rows])
    a = np.array([r[2] for r in rows], dtype=float)
    d = np.array([r[3] for r in rows], dtype=float)

    def mean(w):
        return float(centres @ w / w.sum()) if w.sum() else float("nan")

    return mean(a), mean(d)


def write_histogram(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "agree", "disagree"])
        for lo, hi, a, d in rows:
            w.writerow([repr(lo), repr(hi), a, d])


def _ratio(num, den):
    return float(num / den) if den else 1.0


def _scorer(params, images, labels, settings, clean_cfg, rng):
    if clean_cfg.scoring == "model":
        return params
    return retrain_classifier(params, images, labels, settings.optim, rng,
                              epochs=clean_cfg.scoring_epochs)


def iterative_clean(train, settings, clean_cfg, rng, params=None, val=None,
                    callback=None):
    """Alternate scoring, selection and retraining for ``clean_cfg.rounds``.

    Parameters
    ----------
    train : Dataset
    settings : TrainSettings
        Recipe for each retrain; ``retrain_epochs_per_round`` overrides its
        epoch budget.
    clean_cfg : CleaningConfig
    rng : numpy Generator
    params : ModelParams, optional
        Model already trained on the full set. Trained here when omitted.
    val : Dataset, optional
        When given, each round records the retrained model's top-1.
    callback : callable, optional
        Called as ``callback(round, drop_mask)`` with a full-length mask.

    Returns
    -------
    view : CleanedView
    history : CleaningHistory
    params : ModelParams
        Model retrained on the final surviving set.

    Raises
    ------
    ClassExhaustionError
        If a round would remove every sample of a class.
    """
    clean_cfg.validate()
    num_classes = train.num_classes
    optim = settings.optim
    if clean_cfg.retrain_epochs_per_round is not None:
        optim = dataclasses.replace(optim, total_epochs=clean_cfg.retrain_epochs_per_round)
    if params is None:
        params = train_model(train.images, train.labels.astype(np.int64), num_classes,
                             settings, rng, optim=optim)

    idx = np.arange(len(train))
    labels = train.labels.astype(np.int64)
    true = train.true_labels.astype(np.int64)
    relabel_map = {}
    history = CleaningHistory()
    for r in range(clean_cfg.rounds):
        x, y = train.images[idx], labels[idx]
        scorer = _scorer(params, x, y, settings, clean_cfg, rng)
        records = score_training_set(scorer, x, clean_cfg.top_k, ids=idx)
        drop, relabel, theta = select_noisy(records, y, clean_cfg)

        new_y = y.copy()
        for pos, c in relabel.items():
            new_y[pos] = c
        before = np.bincount(y, minlength=num_classes)
        after = np.bincount(new_y[~drop], minlength=num_classes)
        gone = np.flatnonzero((before > 0) & (after == 0))
        if gone.size:
            raise ClassExhaustionError(int(gone[0]), r)

        flipped = y != true[idx]
        relabeled_correct = sum(int(c == true[idx[p]]) for p, c in relabel.items())
        for pos, c in relabel.items():
            relabel_map[int(idx[pos])] = c
        labels[idx] = new_y

        if callback is not None:
            full = np.zeros(len(train), dtype=bool)
            full[idx[drop]] = True
            callback(r, full)
        idx = idx[~drop]

        retrain_from = params.copy() if clean_cfg.warm_start else None
        params = train_model(train.images[idx], labels[idx], num_classes, settings, rng,
                             params=retrain_from, optim=optim)
        val_top1 = None
        if val is not None:
            pred = predict_proba(params, val.images).argmax(axis=1)
            val_top1 = float(np.mean(pred == val.labels))
        history.rounds.append(CleaningRound(
            round_index=r,
            kept=int(len(idx)),
            dropped=int(drop.sum()),
            relabeled=len(relabel),
            relabeled_correct=relabeled_correct,
            oracle_precision=_ratio(int((drop & flipped).sum()), int(drop.sum())),
            oracle_recall=_ratio(int((drop & flipped).sum()), int(flipped.sum())),
            threshold=theta,
            post_retrain_val_top1=val_top1,
        ))

    history.surviving = [int(i) for i in idx]
    history.relabel_map = relabel_map
    return CleanedView(train, idx, labels[idx]), history, params


def write_history(history, out_dir, drop_masks=()):
    """History as ``cleaning_history.json`` plus ``drop_mask_round{r}.u8``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "cleaning_history.json"), "w") as fh:
        json.dump(history.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths = []
    for r, mask in enumerate(drop_masks):
        p = os.path.join(out_dir, f"drop_mask_round{r}.u8")
        np.asarray(mask, dtype=np.uint8).tofile(p)
        paths.append(p)
    return paths


def read_history(path):
    with open(path) as fh:
        return CleaningHistory.from_dict(json.load(fh))
