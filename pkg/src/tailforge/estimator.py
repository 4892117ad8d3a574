"""scikit-learn style wrapper around the training loop."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .decouple import apply_tau, retrain_classifier
from .exceptions import ConfigError
from .imageops import AugmentConfig
from .nnkernel import predict_proba
from .optim import OptimConfig
from .sampling import SamplerKind
from .training import ModelConfig, TrainSettings, train_model


def _as_image_stack(X, image_shape=None):
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if X.ndim == 2:
        side = int(round(np.sqrt(X.shape[1])))
        if image_shape is not None:
            X = X.reshape(len(X), *image_shape)
        elif side * side == X.shape[1]:
            X = X.reshape(len(X), side, side)
        else:
            raise ValueError(
                f"cannot reshape {X.shape[1]} features into a square image; "
                "pass an (n_samples, height, width) array"
            )
    if X.ndim != 3:
        raise ValueError(f"expected (n_samples, height, width) images, got shape {X.shape}")
    if image_shape is not None and X.shape[1:] != tuple(image_shape):
        raise ValueError(f"images have shape {X.shape[1:]}, estimator was fit on {image_shape}")
    return X


class TailNetClassifier(ClassifierMixin, BaseEstimator):
    """Small convolutional classifier for long-tailed grayscale images.

    Parameters
    ----------
    channels : tuple of int
        Output channels of the stride-2 convolution layers.
    d_emb : int
        Embedding width (the BNNeck dimension).
    epochs, batch_size, lr_per_256, momentum, weight_decay, warmup_epochs :
        SGD schedule; the learning rate is ``lr_per_256 * batch_size / 256``
        and decays by 10x at 60% and 85% of ``epochs``.
    sampler : {"IBS", "CBS"}
        Instance- or class-balanced mini-batch sampling.
    augment : bool
        Apply the default train-time augmentation.
    label_smoothing, mixup_alpha : float
        Loss regularizers; 0 disables them.
    rebalance : {None, "crt"}
        ``"crt"`` retrains the classifier on frozen features with
        class-balanced sampling after the main fit.
    tau : float
        Exponent of the final classifier-row normalization; 0 disables it.
    random_state : int, numpy Generator or None

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    image_shape_ : tuple of int
    n_features_in_ : int
    params_ : ModelParams
    """

    def __init__(self, channels=(16, 32), d_emb=64, epochs=24, batch_size=64,
                 lr_per_256=0.4, momentum=0.9, weight_decay=5e-4, warmup_epochs=2,
                 sampler="IBS", augment=True, label_smoothing=0.0, mixup_alpha=0.0,
                 rebalance=None, tau=0.0, random_state=None):
        self.channels = channels
        self.d_emb = d_emb
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_per_256 = lr_per_256
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.sampler = sampler
        self.augment = augment
        self.label_smoothing = label_smoothing
        self.mixup_alpha = mixup_alpha
        self.rebalance = rebalance
        self.tau = tau
        self.random_state = random_state

    def _settings(self):
        decay = sorted({int(self.epochs * 0.6), int(self.epochs * 0.85)} - {0})
        decay = [d for d in decay if d < self.epochs]
        optim = OptimConfig(
            base_lr_per_256=self.lr_per_256, batch_size=self.batch_size,
            momentum=self.momentum, weight_decay=self.weight_decay,
            warmup_epochs=self.warmup_epochs, decay_epochs=decay,
            total_epochs=self.epochs,
        ).validate()
        augment = AugmentConfig() if self.augment else AugmentConfig.off()
        return TrainSettings(
            model=ModelConfig(channels=tuple(self.channels), d_emb=self.d_emb).validate(),
            optim=optim,
            sampler=SamplerKind(self.sampler).validate(),
            augment=augment.validate(),
            label_smoothing=self.label_smoothing,
            mixup_alpha=self.mixup_alpha,
        )

    def fit(self, X, y):
        """Train from scratch on images ``X`` with labels ``y``."""
        if self.rebalance not in (None, "crt"):
            raise ConfigError(f"unknown rebalance {self.rebalance!r}")
        X = _as_image_stack(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        self.image_shape_ = X.shape[1:]
        self.n_features_in_ = int(np.prod(self.image_shape_))

        settings = self._settings()
        rng = np.random.default_rng(self.random_state)
        params = train_model(X, encoded, len(self.classes_), settings, rng)
        if self.rebalance == "crt":
            params = retrain_classifier(params, X, encoded, settings.optim, rng)
        if self.tau:
            params = apply_tau(params, self.tau)
        self.params_ = params
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return predict_proba(self.params_, _as_image_stack(X, self.image_shape_))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
