"""Small from-scratch network: strided conv stack, global average pooling,
affine embedding, BNNeck and a bias-free linear classifier.

Activations are kept channels-last (``B, H, W, C``). Train-mode forward
passes run in the parameters' dtype (float32 for training); eval-mode
passes are promoted to float64 so that a sample's output does not depend
on which other samples share its batch.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import (
    ChecksumError,
    ConfigError,
    MissingFileError,
    NumericError,
    ShapeError,
    SizeMismatchError,
    VersionMismatchError,
)
from .parallel import map_chunks

CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Every tensor of the network plus the BN hyperparameters."""

    conv_w: list
    conv_b: list
    embed_w: np.ndarray
    embed_b: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    classifier_w: np.ndarray
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def num_classes(self):
        return self.classifier_w.shape[0]

    @property
    def d_emb(self):
        return self.embed_w.shape[0]

    @property
    def channels(self):
        return tuple(w.shape[0] for w in self.conv_w)

    @property
    def dtype(self):
        return self.classifier_w.dtype

    def trainable(self):
        """Ordered mapping name -> array (the live arrays, not copies)."""
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"conv{i}_w"] = w
            out[f"conv{i}_b"] = b
        out["embed_w"] = self.embed_w
        out["embed_b"] = self.embed_b
        out["bn_gamma"] = self.bn_gamma
        out["bn_beta"] = self.bn_beta
        out["classifier_w"] = self.classifier_w
        return out

    def tensors(self):
        """All tensors, trainable ones followed by the BN running statistics."""
        out = self.trainable()
        out["bn_running_mean"] = self.bn_running_mean
        out["bn_running_var"] = self.bn_running_var
        return out

    def copy(self, dtype=None):
        def cp(a):
            return np.array(a, dtype=dtype or a.dtype, copy=True)

        return ModelParams(
            conv_w=[cp(w) for w in self.conv_w],
            conv_b=[cp(b) for b in self.conv_b],
            embed_w=cp(self.embed_w),
            embed_b=cp(self.embed_b),
            bn_gamma=cp(self.bn_gamma),
            bn_beta=cp(self.bn_beta),
            bn_running_mean=cp(self.bn_running_mean),
            bn_running_var=cp(self.bn_running_var),
            classifier_w=cp(self.classifier_w),
            bn_momentum=self.bn_momentum,
            bn_eps=self.bn_eps,
        )

    def check(self):
        in_ch = 1
        for w, b in zip(self.conv_w, self.conv_b):
            if w.ndim != 4 or w.shape[1:] != (in_ch, 3, 3) or b.shape != (w.shape[0],):
                raise ShapeError(f"conv kernel shape {w.shape} does not follow {in_ch} input channels")
            in_ch = w.shape[0]
        d = self.d_emb
        if self.embed_w.shape != (d, in_ch) or self.embed_b.shape != (d,):
            raise ShapeError("embedding shape inconsistent with last conv layer")
        for name in ("bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
            if getattr(self, name).shape != (d,):
                raise ShapeError(f"{name} must have shape ({d},)")
        if self.classifier_w.ndim != 2 or self.classifier_w.shape[1] != d:
            raise ShapeError("classifier_w column count must equal d_emb")
        if not np.all(self.bn_running_var > 0):
            raise ConfigError("bn_running_var must be strictly positive")
        return self


def init_params(num_classes, rng, channels=(8, 16), d_emb=64, dtype=np.float32,
                bn_momentum=0.1, bn_eps=1e-5):
    """He-normal conv/embedding weights, N(0, 0.01) classifier rows."""
    conv_w, conv_b = [], []
    in_ch = 1
    for out_ch in channels:
        fan_in = in_ch * 9
        conv_w.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, 3, 3)).astype(dtype))
        conv_b.append(np.zeros(out_ch, dtype))
        in_ch = out_ch
    return ModelParams(
        conv_w=conv_w,
        conv_b=conv_b,
        embed_w=rng.normal(0.0, np.sqrt(2.0 / in_ch), (d_emb, in_ch)).astype(dtype),
        embed_b=np.zeros(d_emb, dtype),
        bn_gamma=np.ones(d_emb, dtype),
        bn_beta=np.zeros(d_emb, dtype),
        bn_running_mean=np.zeros(d_emb, dtype),
        bn_running_var=np.ones(d_emb, dtype),
        classifier_w=init_classifier(num_classes, d_emb, rng, dtype),
        bn_momentum=bn_momentum,
        bn_eps=bn_eps,
    )


def init_classifier(num_classes, d_emb, rng, dtype=np.float32):
    return rng.normal(0.0, 0.01, (num_classes, d_emb)).astype(dtype)


@dataclass
class Batch:
    """Images with labels; ``mix`` holds ``(partner_labels, lam)`` after mixup."""

    images: np.ndarray
    labels: np.ndarray
    mix: tuple = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise ShapeError("batch needs B >= 1 images with one label each")


@dataclass
class ForwardCache:
    conv_inputs: list = field(default_factory=list)  # channels-last layer inputs
    conv_cols: list = field(default_factory=list)
    conv_pre: list = field(default_factory=list)
    pooled: np.ndarray = None
    embedding: np.ndarray = None
    bn_xhat: np.ndarray = None
    bn_inv_std: np.ndarray = None
    bn_out: np.ndarray = None
    logits: np.ndarray = None
    mode: str = "train"


def _im2col(x):
    # x: (B, H, W, C) -> cols (B*Ho*Wo, C*9) ordered (C, kh, kw)
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]
    ho, wo = win.shape[1], win.shape[2]
    return win.reshape(b * ho * wo, c * 9), ho, wo


def _col2im(dcols, shape, ho, wo):
    b, h, w, c = shape
    d = dcols.reshape(b, ho, wo, c, 3, 3)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + 2 * ho - 1:2, j:j + 2 * wo - 1:2, :] += d[..., i, j]
    return dxp[:, 1:h + 1, 1:w + 1, :]


def _as_images(images):
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3:
        raise ShapeError(f"images must be (B, H, W), got shape {images.shape}")
    if min(images.shape[1:]) < 3:
        raise ShapeError("images must be at least 3 pixels in each dimension")
    return images


def forward(params, images, mode="train"):
    """Compute logits for a batch of ``B x H x W`` images.

    In train mode BN uses batch statistics and updates the running
    statistics of ``params`` in place. Returns ``(logits, cache)``.
    """
    if isinstance(images, Batch):
        images = images.images
    images = _as_images(images)
    if mode == "train":
        if len(images) < 2:
            raise ConfigError("train-mode forward needs at least 2 samples for batch statistics")
        dtype = params.dtype
    elif mode == "eval":
        dtype = np.float64
    else:
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")

    cache = ForwardCache(mode=mode)
    x = images.astype(dtype, copy=False)[..., None]
    for w, b in zip(params.conv_w, params.conv_b):
        cols, ho, wo = _im2col(x)
        pre = cols @ w.reshape(w.shape[0], -1).T.astype(dtype, copy=False) + b.astype(dtype, copy=False)
        cache.conv_inputs.append(x.shape)
        cache.conv_cols.append(cols)
        cache.conv_pre.append(pre.reshape(x.shape[0], ho, wo, w.shape[0]))
        x = np.maximum(pre, 0).reshape(x.shape[0], ho, wo, w.shape[0])

    pooled = x.mean(axis=(1, 2))
    emb = pooled @ params.embed_w.T.astype(dtype, copy=False) + params.embed_b.astype(dtype, copy=False)
    eps = params.bn_eps
    if mode == "train":
        mu = emb.mean(axis=0)
        var = emb.var(axis=0)
        m = params.bn_momentum
        n = emb.shape[0]
        params.bn_running_mean[...] = (1 - m) * params.bn_running_mean + m * mu
        params.bn_running_var[...] = (1 - m) * params.bn_running_var + m * var * n / (n - 1)
    else:
        mu = params.bn_running_mean.astype(dtype)
        var = params.bn_running_var.astype(dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (emb - mu) * inv_std
    bn_out = params.bn_gamma.astype(dtype, copy=False) * xhat + params.bn_beta.astype(dtype, copy=False)
    logits = bn_out @ params.classifier_w.T.astype(dtype, copy=False)

    cache.pooled = pooled
    cache.embedding = emb
    cache.bn_xhat = xhat
    cache.bn_inv_std = inv_std
    cache.bn_out = bn_out
    cache.logits = logits
    return logits, cache


def bn_features(params, images, batch_size=256):
    """Eval-mode BNNeck outputs (the classifier's input), float64."""
    images = _as_images(images)
    out = map_chunks(lambda a, b: forward(params, images[a:b], mode="eval")[1].bn_out,
                     len(images), batch_size)
    return np.concatenate(out) if out else np.zeros((0, params.d_emb))


def backward(params, cache, dlogits):
    """Exact gradients of the loss whose logit-gradient is ``dlogits``."""
    dlogits = np.asarray(dlogits)
    if cache.logits is None or dlogits.shape != cache.logits.shape:
        raise ShapeError(
            f"dlogits shape {dlogits.shape} does not match cached logits "
            f"{None if cache.logits is None else cache.logits.shape}"
        )
    dtype = cache.logits.dtype
    dlogits = dlogits.astype(dtype, copy=False)
    grads = {}
    wc = params.classifier_w.astype(dtype, copy=False)
    grads["classifier_w"] = dlogits.T @ cache.bn_out
    dbn = dlogits @ wc

    xhat = cache.bn_xhat
    grads["bn_gamma"] = (dbn * xhat).sum(axis=0)
    grads["bn_beta"] = dbn.sum(axis=0)
    dxhat = dbn * params.bn_gamma.astype(dtype, copy=False)
    if cache.mode == "train":
        n = dxhat.shape[0]
        demb = (cache.bn_inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
    else:
        demb = dxhat * cache.bn_inv_std

    grads["embed_w"] = demb.T @ cache.pooled
    grads["embed_b"] = demb.sum(axis=0)
    dpooled = demb @ params.embed_w.astype(dtype, copy=False)

    n_layers = len(params.conv_w)
    last = cache.conv_pre[-1]
    dx = np.broadcast_to(
        dpooled[:, None, None, :] / (last.shape[1] * last.shape[2]), last.shape
    )
    for i in reversed(range(n_layers)):
        pre = cache.conv_pre[i]
        dpre = np.where(pre > 0, dx, 0).reshape(-1, pre.shape[-1])
        w = params.conv_w[i]
        grads[f"conv{i}_w"] = (dpre.T @ cache.conv_cols[i]).reshape(w.shape)
        grads[f"conv{i}_b"] = dpre.sum(axis=0)
        if i > 0:
            dcols = dpre @ w.reshape(w.shape[0], -1).astype(dtype, copy=False)
            dx = _col2im(dcols, cache.conv_inputs[i], pre.shape[1], pre.shape[2])

    order = params.trainable().keys()
    return {k: grads[k] for k in order}


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy_ls(logits, labels, epsilon=0.0):
    """Mean cross-entropy against label-smoothed targets.

    Targets are ``(1 - epsilon) * onehot + epsilon / C``. Returns
    ``(loss, dlogits)`` with ``dlogits = (softmax - target) / B``.
    """
    if not 0 <= epsilon < 1:
        raise ConfigError("label smoothing epsilon must lie in [0, 1)")
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in cross-entropy")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    target = np.full((b, c), epsilon / c, dtype=np.float64)
    target[np.arange(b), labels] += 1.0 - epsilon
    logp = log_softmax(logits.astype(np.float64))
    loss = float(-(target * logp).sum() / b)
    dlogits = (np.exp(logp) - target) / b
    return loss, dlogits.astype(logits.dtype)


def batch_loss(logits, batch, epsilon=0.0):
    """Cross-entropy for a batch, honouring a mixup ``mix`` field."""
    if batch.mix is None:
        return softmax_cross_entropy_ls(logits, batch.labels, epsilon)
    partner, lam = batch.mix
    la, da = softmax_cross_entropy_ls(logits, batch.labels, epsilon)
    lb, db = softmax_cross_entropy_ls(logits, partner, epsilon)
    return lam * la + (1 - lam) * lb, (lam * da + (1 - lam) * db).astype(logits.dtype)


def mixup_batch(batch, alpha, rng, lam=None):
    """Mix images with a random permutation of the batch.

    ``lam`` is drawn from Beta(alpha, alpha) unless given explicitly.
    """
    if not alpha > 0:
        raise ConfigError("mixup alpha must be > 0")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(len(batch.labels))
    images = batch.images
    if lam != 1.0:
        images = (lam * images + (1 - lam) * images[perm]).astype(images.dtype)
    return Batch(images, batch.labels, (batch.labels[perm], lam))


def predict_logits(params, images, batch_size=256):
    images = _as_images(images)
    out = map_chunks(lambda a, b: forward(params, images[a:b], mode="eval")[0],
                     len(images), batch_size)
    return np.concatenate(out) if out else np.zeros((0, params.num_classes))


def predict_proba(params, images, batch_size=256):
    """Eval-mode class probabilities, float64 rows summing to one."""
    return softmax(predict_logits(params, images, batch_size))


def gradcheck(params, batch, h=1e-5, n_samples=200, seed=0, epsilon=0.0,
              return_skipped=False):
    """Largest relative error between analytic and central-difference gradients.

    Runs on a float64 copy of ``params``. At least ``n_samples`` scalar
    entries are checked, spread evenly over every trainable tensor. Entries
    where both gradients are below 1e-8 in magnitude are skipped, since
    finite differences cannot resolve them, as are entries whose +/-h probe
    flips the sign of some ReLU input (the loss is not differentiable along
    that segment). With ``return_skipped`` the number of kink-crossing
    entries is returned as well.
    """
    p = params.copy(dtype=np.float64)
    images = np.asarray(batch.images, dtype=np.float64)
    b64 = Batch(images, batch.labels, batch.mix)

    def probe(q):
        logits, cache = forward(q, images, mode="train")
        return batch_loss(logits, b64, epsilon)[0], [pre > 0 for pre in cache.conv_pre]

    logits, cache = forward(p, images, mode="train")
    grads = backward(p, cache, batch_loss(logits, b64, epsilon)[1])
    pattern = [pre > 0 for pre in cache.conv_pre]

    rng = np.random.default_rng(seed)
    tensors = p.trainable()
    per_tensor = -(-n_samples // len(tensors))
    worst = 0.0
    skipped = 0
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        k = min(per_tensor, flat.size)
        for idx in rng.choice(flat.size, size=k, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            lp, pat_p = probe(p)
            flat[idx] = orig - h
            lm, pat_m = probe(p)
            flat[idx] = orig
            if not all(np.array_equal(a, b) and np.array_equal(a, c)
                       for a, b, c in zip(pattern, pat_p, pat_m)):
                skipped += 1
                continue
            num = (lp - lm) / (2 * h)
            ana = grads[name].reshape(-1)[idx]
            denom = max(abs(ana), abs(num))
            if denom > 1e-8:
                worst = max(worst, abs(ana - num) / denom)
    if return_skipped:
        return worst, skipped
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_params(params, path, extra=None):
    """Write a checkpoint directory: manifest.json plus one .f32 per tensor."""
    os.makedirs(path, exist_ok=True)
    files = {}
    for name, arr in params.tensors().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        fname = f"{name}.f32"
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(data)
        files[name] = {
            "file": fname,
            "shape": list(arr.shape),
            "sha256": hashlib.sha256(data).hexdigest(),
        }
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "num_classes": int(params.num_classes),
        "d_emb": int(params.d_emb),
        "channels": [int(c) for c in params.channels],
        "kernel_size": 3,
        "stride": 2,
        "bn_momentum": params.bn_momentum,
        "bn_eps": params.bn_eps,
        "tensors": files,
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise MissingFileError(f"no manifest.json in {path}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    arrays = {}
    for name, info in manifest["tensors"].items():
        fpath = os.path.join(path, info["file"])
        if not os.path.exists(fpath):
            raise MissingFileError(f"missing tensor file {info['file']}")
        with open(fpath, "rb") as fh:
            data = fh.read()
        shape = tuple(info["shape"])
        if len(data) != 4 * int(np.prod(shape)):
            raise SizeMismatchError(f"{info['file']}: size does not match shape {shape}")
        if hashlib.sha256(data).hexdigest() != info["sha256"]:
            raise ChecksumError(f"{info['file']}: checksum mismatch")
        arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    n_conv = len(manifest["channels"])
    return ModelParams(
        conv_w=[arrays[f"conv{i}_w"] for i in range(n_conv)],
        conv_b=[arrays[f"conv{i}_b"] for i in range(n_conv)],
        embed_w=arrays["embed_w"],
        embed_b=arrays["embed_b"],
        bn_gamma=arrays["bn_gamma"],
        bn_beta=arrays["bn_beta"],
        bn_running_mean=arrays["bn_running_mean"],
        bn_running_var=arrays["bn_running_var"],
        classifier_w=arrays["classifier_w"],
        bn_momentum=manifest["bn_momentum"],
        bn_eps=manifest["bn_eps"],
    ).check()
