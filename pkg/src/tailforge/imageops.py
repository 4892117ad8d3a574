"""Deterministic image transforms, train-time augmentation and FixRes TTA.

Images are 2-D float arrays; most functions also accept a leading batch
axis and operate on the last two axes.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError
from .nnkernel import predict_logits, softmax


@dataclass
class AugmentConfig:
    """Train-time augmentation. All-zero/identity values switch a step off.

    ``zoom_range`` picks a random square sub-window covering a fraction of
    the side drawn from the range and resizes it back to full size.
    """

    pad_then_crop: int = 2
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    brightness_delta: float = 0.1
    contrast_range: tuple = (0.8, 1.2)
    dropout_holes: int = 1
    dropout_size: int = 4
    zoom_range: tuple = (1.0, 1.0)

    def validate(self):
        for name in ("hflip_prob", "vflip_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.pad_then_crop < 0 or self.dropout_holes < 0 or self.dropout_size < 0:
            raise ConfigError("padding and dropout sizes must be >= 0")
        if self.brightness_delta < 0:
            raise ConfigError("brightness_delta must be >= 0")
        lo, hi = self.contrast_range
        if not 0 <= lo <= hi:
            raise ConfigError("contrast_range must satisfy 0 <= lo <= hi")
        lo, hi = self.zoom_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError("zoom_range must satisfy 0 < lo <= hi <= 1")
        return self

    @classmethod
    def off(cls):
        return cls(0, 0.0, 0.0, 0.0, (1.0, 1.0), 0, 0, (1.0, 1.0))


@dataclass
class TtaConfig:
    """Test-time augmentation. ``crops`` is ``center_only`` or ``ten_crop``;
    ``average_space`` is ``probability`` or ``logit``."""

    train_res: int = 24
    enlarge_factor: float = 1.25
    crops: str = "ten_crop"
    average_space: str = "probability"

    @property
    def enlarged_res(self):
        return int(round(self.train_res * self.enlarge_factor))

    def validate(self):
        if self.enlarge_factor < 1:
            raise ConfigError("enlarge_factor must be >= 1")
        if self.crops not in ("center_only", "ten_crop"):
            raise ConfigError(f"unknown crops mode {self.crops!r}")
        if self.average_space not in ("probability", "logit"):
            raise ConfigError(f"unknown average_space {self.average_space!r}")
        return self


def _axis_weights(n_in, n_out):
    if n_out < 1:
        raise ConfigError("output size must be >= 1")
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, s - i0


def resize_bilinear(img, out_h, out_w):
    """Half-pixel-centre bilinear resize with edge clamping."""
    img = np.asarray(img)
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    dtype = img.dtype if img.dtype.kind == "f" else np.float64
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    fr = fr.astype(dtype)[:, None]
    fc = fc.astype(dtype)
    rows = img[..., r0, :] * (1 - fr) + img[..., r1, :] * fr
    return (rows[..., c0] * (1 - fc) + rows[..., c1] * fc).astype(dtype)


def crop(img, top, left, size):
    """Exact ``size x size`` sub-window whose top-left corner is ``(top, left)``."""
    h, w = img.shape[-2:]
    if top < 0 or left < 0 or size < 1 or top + size > h or left + size > w:
        raise ConfigError(
            f"crop window ({top}, {left}, {size}) outside {h}x{w} image"
        )
    return img[..., top:top + size, left:left + size].copy()


def hflip(img):
    return np.asarray(img)[..., ::-1].copy()


def vflip(img):
    return np.asarray(img)[..., ::-1, :].copy()


def augment_batch(images, cfg, rng):
    """Augment a ``B x H x W`` stack; every image gets independent draws.

    Steps, in order: random zoom, pad-and-random-crop, flips, brightness
    shift, contrast scale about the image mean, coarse dropout, clip to
    [0, 1]. Disabled steps are skipped entirely so an all-off config is an
    exact identity.
    """
    x = np.array(images, copy=True)
    b, h, w = x.shape

    lo, hi = cfg.zoom_range
    if lo < 1:
        frac = rng.uniform(lo, hi, size=b)
        offs = rng.random((b, 2))
        for i in range(b):
            sh = max(1, int(round(h * frac[i])))
            sw = max(1, int(round(w * frac[i])))
            top = int(offs[i, 0] * (h - sh + 1))
            left = int(offs[i, 1] * (w - sw + 1))
            x[i] = resize_bilinear(x[i, top:top + sh, left:left + sw], h, w)

    p = cfg.pad_then_crop
    if p > 0:
        padded = np.pad(x, ((0, 0), (p, p), (p, p)))
        oy = rng.integers(0, 2 * p + 1, size=b)
        ox = rng.integers(0, 2 * p + 1, size=b)
        rows = oy[:, None] + np.arange(h)
        cols = ox[:, None] + np.arange(w)
        x = padded[np.arange(b)[:, None, None], rows[:, :, None], cols[:, None, :]]

    if cfg.hflip_prob > 0:
        m = rng.random(b) < cfg.hflip_prob
        x[m] = x[m][..., ::-1]
    if cfg.vflip_prob > 0:
        m = rng.random(b) < cfg.vflip_prob
        x[m] = x[m][:, ::-1, :]

    if cfg.brightness_delta > 0:
        d = cfg.brightness_delta
        x = x + rng.uniform(-d, d, size=(b, 1, 1)).astype(x.dtype)
    clo, chi = cfg.contrast_range
    if (clo, chi) != (1.0, 1.0):
        c = rng.uniform(clo, chi, size=(b, 1, 1)).astype(x.dtype)
        mean = x.mean(axis=(1, 2), keepdims=True)
        x = (x - mean) * c + mean

    s = cfg.dropout_size
    if cfg.dropout_holes > 0 and 0 < s <= min(h, w):
        for _ in range(cfg.dropout_holes):
            ty = rng.integers(0, h - s + 1, size=b)
            tx = rng.integers(0, w - s + 1, size=b)
            ry = np.arange(h)[None, :] - ty[:, None]
            rx = np.arange(w)[None, :] - tx[:, None]
            hole = ((ry >= 0) & (ry < s))[:, :, None] & ((rx >= 0) & (rx < s))[:, None, :]
            x[hole] = 0

    return np.clip(x, 0, 1, out=x)


def augment(img, cfg, rng):
    """Augment a single image (see :func:`augment_batch`)."""
    return augment_batch(np.asarray(img)[None], cfg, rng)[0]


def _crop_origins(h, w, size):
    if size > h or size > w:
        raise ConfigError(f"crop size {size} exceeds image {h}x{w}")
    cy, cx = (h - size) // 2, (w - size) // 2
    return [(0, 0), (0, w - size), (h - size, 0), (h - size, w - size), (cy, cx)]


def ten_crop(img, size):
    """Four corners and the centre, then the horizontal flip of each.

    Works on a single image or a stack; returns a list of 10 crops.
    """
    h, w = img.shape[-2:]
    crops = [crop(img, t, l, size) for t, l in _crop_origins(h, w, size)]
    return crops + [hflip(c) for c in crops]


def _tta_views(images, cfg):
    cfg.validate()
    r = cfg.train_res
    x = resize_bilinear(images, r, r)
    e = cfg.enlarged_res
    x = resize_bilinear(x, e, e)
    if cfg.crops == "ten_crop":
        return ten_crop(x, r)
    top, left = _crop_origins(e, e, r)[4]
    return [crop(x, top, left, r)]


def tta_predict_proba(params, images, cfg, batch_size=256):
    """FixRes test-time prediction for a ``N x H x W`` stack.

    Each image is resized to ``train_res``, enlarged by ``enlarge_factor``,
    cropped back to ``train_res`` (centre or ten-crop) and the per-crop
    predictions are averaged in probability or logit space, always in the
    fixed crop order.
    """
    images = np.asarray(images)
    views = _tta_views(images, cfg)
    logits = [predict_logits(params, v, batch_size) for v in views]
    if cfg.average_space == "logit":
        avg = softmax(sum(logits) / len(logits))
    else:
        avg = sum(softmax(z) for z in logits) / len(logits)
    return avg / avg.sum(axis=1, keepdims=True)


def fixres_tta_predict(params, img, cfg):
    """TTA class probabilities for one image."""
    return tta_predict_proba(params, np.asarray(img)[None], cfg)[0]
