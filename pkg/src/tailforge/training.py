"""Mini-batch training loops shared by every pipeline stage."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError
from .imageops import AugmentConfig, augment_batch
from .nnkernel import (
    Batch,
    backward,
    batch_loss,
    forward,
    init_params,
    mixup_batch,
    softmax_cross_entropy_ls,
)
from .optim import OptimConfig, OptimState, lr_at, sgd_update
from .sampling import SamplerKind, epoch_indices


@dataclass
class ModelConfig:
    channels: tuple = (8, 16)
    d_emb: int = 64
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def validate(self):
        if not self.channels or min(self.channels) < 1 or self.d_emb < 1:
            raise ConfigError("channels and d_emb must be positive")
        return self

    def init(self, num_classes, rng):
        return init_params(
            num_classes, rng, tuple(self.channels), self.d_emb,
            bn_momentum=self.bn_momentum, bn_eps=self.bn_eps,
        )


@dataclass
class TrainSettings:
    """Everything needed to fit the network on a labelled image stack."""

    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampler: SamplerKind = field(default_factory=SamplerKind)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    label_smoothing: float = 0.0
    mixup_alpha: float = 0.0


def _batches(indices, batch_size):
    # The incomplete tail batch is dropped: a handful of samples gives
    # batch statistics noisy enough to corrupt the BN running estimates.
    # An epoch shorter than one batch is used whole.
    if len(indices) < batch_size:
        if len(indices) >= 2:
            yield indices
        return
    for start in range(0, len(indices) - batch_size + 1, batch_size):
        yield indices[start:start + batch_size]


def _steps_per_epoch(epoch_len, batch_size):
    return max(1, epoch_len // batch_size)


def train_model(images, labels, num_classes, settings, rng, params=None,
                trainable=None, optim=None):
    """Fit (or continue fitting) the whole network.

    Parameters
    ----------
    images : ndarray, shape (N, H, W)
    labels : ndarray, shape (N,)
    settings : TrainSettings
    rng : numpy Generator driving init, sampling, augmentation and mixup.
    params : ModelParams, optional
        Start point; a fresh initialization is drawn when omitted. Updated
        in place and returned.
    trainable : collection of str, optional
        Restrict updates to these tensor names (others stay bit-identical).
    optim : OptimConfig, optional
        Overrides ``settings.optim`` (used by finetuning stages).

    Returns
    -------
    ModelParams
    """
    optim = (optim or settings.optim).validate()
    labels = np.asarray(labels, dtype=np.int64)
    if params is None:
        params = settings.model.init(num_classes, rng)
    if len(labels) < 2:
        raise ConfigError("need at least two training samples")
    epoch_len = len(labels) if settings.sampler.kind == "IBS" else (
        settings.sampler.epoch_size or len(labels)
    )
    spe = _steps_per_epoch(epoch_len, optim.batch_size)
    state = OptimState.zeros_like(params.trainable(), spe)
    aug = settings.augment
    aug_on = aug is not None and aug != AugmentConfig.off()

    for _ in range(optim.total_epochs):
        order = epoch_indices(settings.sampler, labels, num_classes, rng)
        for chunk in _batches(order, optim.batch_size):
            x = images[chunk]
            if aug_on:
                x = augment_batch(x, aug, rng)
            batch = Batch(x, labels[chunk])
            if settings.mixup_alpha > 0:
                batch = mixup_batch(batch, settings.mixup_alpha, rng)
            logits, cache = forward(params, batch.images, mode="train")
            _, dlogits = batch_loss(logits, batch, settings.label_smoothing)
            grads = backward(params, cache, dlogits)
            if trainable is not None:
                grads = {k: v for k, v in grads.items() if k in trainable}
            sgd_update(params, grads, state, lr_at(state.step, optim, spe), optim)
    return params


def train_classifier(features, labels, params, optim, sampler, rng,
                     num_classes=None, label_smoothing=0.0):
    """Train only ``classifier_w`` on fixed BNNeck features.

    With the backbone frozen and BN in eval mode the classifier input is a
    constant per sample, so features are computed once by the caller.
    """
    optim.validate()
    num_classes = num_classes or params.num_classes
    labels = np.asarray(labels, dtype=np.int64)
    feats = np.asarray(features, dtype=params.dtype)
    epoch_len = len(labels) if sampler.kind == "IBS" else (sampler.epoch_size or len(labels))
    spe = _steps_per_epoch(epoch_len, optim.batch_size)
    state = OptimState.zeros_like({"classifier_w": params.classifier_w}, spe)
    for _ in range(optim.total_epochs):
        order = epoch_indices(sampler, labels, num_classes, rng)
        for chunk in _batches(order, optim.batch_size):
            f = feats[chunk]
            logits = f @ params.classifier_w.T
            _, dlogits = softmax_cross_entropy_ls(logits, labels[chunk], label_smoothing)
            grad = dlogits.T @ f
            sgd_update(params, {"classifier_w": grad}, state,
                       lr_at(state.step, optim, spe), optim)
    return params
