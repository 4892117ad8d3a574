"""Synthetic long-tailed glyph datasets with injected label noise.

Every class owns a fixed arrangement of oriented strokes. Samples are
rendered from that arrangement in continuous coordinates, so the same
sample rendered at a higher resolution carries finer detail. Each sample
draws its jitter and pixel noise from its own substream keyed by
``(seed, stream, index)``, which keeps generation reproducible regardless
of how the work is split up.
"""

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    ChecksumError,
    ConfigError,
    DatasetValidationError,
    MissingFileError,
    SizeMismatchError,
    VersionMismatchError,
)

FORMAT_VERSION = 1

_GLYPH_SALT = 0x7A11F0
_TRAIN_STREAM = 0
_NOISE_STREAM = 1
_VAL_STREAM = 2

PROFILES = ("exponential", "step")
NOISE_MODES = ("symmetric", "asymmetric")


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a synthetic long-tailed dataset.

    ``val_per_class`` sets the size of the balanced, noise-free validation
    split; ``pixel_noise`` and ``jitter`` control per-sample rendering noise.
    """

    num_classes: int = 50
    max_count: int = 200
    imbalance_ratio: float = 100.0
    profile: str = "exponential"
    base_resolution: int = 24
    noise_rate: float = 0.2
    noise_mode: str = "symmetric"
    seed: int = 0
    val_per_class: int = 20
    pixel_noise: float = 0.03
    jitter: float = 0.25

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.max_count < 1:
            raise ConfigError("max_count must be >= 1")
        if not self.imbalance_ratio >= 1:
            raise ConfigError("imbalance_ratio must be >= 1")
        if self.imbalance_ratio > self.max_count:
            raise ConfigError(
                f"imbalance_ratio {self.imbalance_ratio} exceeds max_count "
                f"{self.max_count}; the smallest class would be empty"
            )
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"unknown noise_mode {self.noise_mode!r}")
        if self.base_resolution < 8:
            raise ConfigError("base_resolution must be >= 8")
        if not 0 <= self.noise_rate < 1:
            raise ConfigError("noise_rate must lie in [0, 1)")
        if self.val_per_class < 1:
            raise ConfigError("val_per_class must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.pixel_noise < 0 or self.jitter < 0:
            raise ConfigError("pixel_noise and jitter must be non-negative")
        return self


@dataclass
class Dataset:
    """Images plus given labels, hidden true labels and the flip ledger."""

    images: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    flip_mask: np.ndarray
    spec: DatasetSpec = field(default_factory=DatasetSpec)
    split: str = "train"

    @property
    def num_classes(self):
        return self.spec.num_classes

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def true_class_counts(self):
        return np.bincount(self.true_labels, minlength=self.num_classes)

    def __len__(self):
        return len(self.labels)

    def check(self):
        """Raise :class:`DatasetValidationError` if an invariant is broken."""
        n = len(self.labels)
        if self.images.ndim != 3 or self.images.shape[0] != n:
            raise DatasetValidationError("images must have shape (N, H, W)")
        for name in ("true_labels", "flip_mask"):
            if len(getattr(self, name)) != n:
                raise DatasetValidationError(f"{name} length differs from labels")
        c = self.num_classes
        for name in ("labels", "true_labels"):
            arr = getattr(self, name)
            if n and (arr.min() < 0 or arr.max() >= c):
                raise DatasetValidationError(f"{name} contains values outside [0, {c})")
        if not np.array_equal(self.flip_mask, self.labels != self.true_labels):
            raise DatasetValidationError("flip_mask disagrees with labels/true_labels")
        return self


def gen_class_counts(num_classes, max_count, ratio, profile="exponential"):
    """Per-class sample counts for a long-tailed profile.

    The exponential profile decays as ``max_count * ratio ** (-c / (C - 1))``;
    the step profile gives the first ``C // 2`` classes ``max_count`` samples
    and the rest ``max_count / ratio``. Counts are rounded half-up and never
    fall below one.

    >>> gen_class_counts(4, 1000, 100)
    [1000, 215, 46, 10]
    """
    if num_classes < 2 or max_count < 1 or not ratio >= 1:
        raise ConfigError("need num_classes >= 2, max_count >= 1, ratio >= 1")
    if ratio > max_count:
        raise ConfigError(
            f"imbalance ratio {ratio} exceeds max_count {max_count}"
        )
    if profile == "exponential":
        raw = [max_count * ratio ** (-c / (num_classes - 1)) for c in range(num_classes)]
    elif profile == "step":
        head = num_classes // 2
        raw = [max_count if c < head else max_count / ratio for c in range(num_classes)]
    else:
        raise ConfigError(f"unknown profile {profile!r}")
    return [max(1, int(math.floor(x + 0.5))) for x in raw]


def _class_strokes(class_id):
    # Fixed per class, independent of any dataset seed.
    rng = np.random.default_rng([_GLYPH_SALT, int(class_id)])
    n = int(rng.integers(3, 6))
    p0 = rng.uniform(0.15, 0.85, size=(n, 2))
    p1 = rng.uniform(0.15, 0.85, size=(n, 2))
    half_width = rng.uniform(0.012, 0.05, size=n)
    intensity = rng.uniform(0.6, 1.0, size=n)
    return p0, p1, half_width, intensity


def _segment_distance(q, p0, p1):
    # q: (P, 2); p0, p1: (S, 2) -> (S, P)
    d = p1 - p0
    len2 = np.maximum((d * d).sum(axis=1), 1e-12)
    rel = q[None, :, :] - p0[:, None, :]
    t = np.clip((rel * d[:, None, :]).sum(axis=2) / len2[:, None], 0.0, 1.0)
    closest = p0[:, None, :] + t[..., None] * d[:, None, :]
    return np.sqrt(((q[None, :, :] - closest) ** 2).sum(axis=2))


def gen_glyph(class_id, resolution, rng, noise_std=0.03, jitter=0.25):
    """Render one sample of ``class_id`` as a ``resolution`` square image.

    Strokes are rasterized with an analytic coverage estimate at the target
    pixel size, so thin strokes only resolve at higher resolutions. ``rng``
    supplies the affine jitter (rotation, scale, shift; scaled by ``jitter``)
    and additive Gaussian pixel noise with standard deviation ``noise_std``.
    Draws from ``rng`` do not depend on ``resolution`` except for the pixel
    noise, which is drawn last.
    """
    if resolution < 8:
        raise ConfigError("resolution must be >= 8")
    p0, p1, half_width, intensity = _class_strokes(class_id)

    angle = rng.uniform(-0.25, 0.25) * jitter
    scale = 1.0 + rng.uniform(-0.1, 0.1) * jitter
    shift = rng.uniform(-0.06, 0.06, size=2) * jitter

    px = 1.0 / resolution
    centers = (np.arange(resolution) + 0.5) * px
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    q = np.stack([xx.ravel(), yy.ravel()], axis=1) - 0.5 - shift
    cos, sin = math.cos(-angle), math.sin(-angle)
    q = q @ np.array([[cos, sin], [-sin, cos]]) / scale + 0.5

    dist = _segment_distance(q, p0, p1)
    coverage = np.clip((half_width[:, None] - dist) / px + 0.5, 0.0, 1.0)
    img = (coverage * intensity[:, None]).max(axis=0).reshape(resolution, resolution)
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def inject_label_noise(true_labels, rate, mode, rng, num_classes=None):
    """Flip each label independently with probability ``rate``.

    Symmetric mode draws a uniformly random wrong class; asymmetric mode
    maps class ``c`` to ``(c + 1) % C``. Returns ``(labels, flip_mask)``.
    """
    true_labels = np.asarray(true_labels, dtype=np.uint32)
    if not 0 <= rate < 1:
        raise ConfigError("noise rate must lie in [0, 1)")
    if num_classes is None:
        num_classes = int(true_labels.max()) + 1
    n = len(true_labels)
    flip = rng.random(n) < rate
    labels = true_labels.copy()
    if mode == "symmetric":
        draw = rng.integers(0, num_classes - 1, size=n).astype(np.uint32)
        wrong = np.where(draw >= true_labels, draw + 1, draw).astype(np.uint32)
    elif mode == "asymmetric":
        wrong = ((true_labels.astype(np.int64) + 1) % num_classes).astype(np.uint32)
    else:
        raise ConfigError(f"unknown noise mode {mode!r}")
    labels[flip] = wrong[flip]
    return labels, flip


def _render_split(true_labels, resolution, seed, stream, noise_std, jitter):
    images = np.empty((len(true_labels), resolution, resolution), dtype=np.float32)
    for i, c in enumerate(true_labels):
        rng = np.random.default_rng([int(seed), stream, i])
        images[i] = gen_glyph(int(c), resolution, rng, noise_std, jitter)
    return images


def gen_dataset(spec):
    """Generate the long-tailed noisy training set and its validation split.

    Returns ``(train, val)``. The validation split is balanced
    (``spec.val_per_class`` samples per class), noise-free and drawn from
    streams keyed by ``spec.seed + 1`` so it never shares samples with the
    training set.
    """
    spec.validate()
    counts = gen_class_counts(
        spec.num_classes, spec.max_count, spec.imbalance_ratio, spec.profile
    )
    true_labels = np.repeat(np.arange(spec.num_classes, dtype=np.uint32), counts)
    labels, flip = inject_label_noise(
        true_labels,
        spec.noise_rate,
        spec.noise_mode,
        np.random.default_rng([spec.seed, _NOISE_STREAM]),
        spec.num_classes,
    )
    images = _render_split(
        true_labels, spec.base_resolution, spec.seed, _TRAIN_STREAM,
        spec.pixel_noise, spec.jitter,
    )
    train = Dataset(images, labels, true_labels, flip, spec)

    val_spec = dataclasses.replace(
        spec,
        max_count=spec.val_per_class,
        imbalance_ratio=1.0,
        noise_rate=0.0,
        seed=spec.seed + 1,
    )
    val_true = np.repeat(
        np.arange(spec.num_classes, dtype=np.uint32), spec.val_per_class
    )
    val_images = _render_split(
        val_true, spec.base_resolution, spec.seed + 1, _VAL_STREAM,
        spec.pixel_noise, spec.jitter,
    )
    val = Dataset(
        val_images, val_true.copy(), val_true, np.zeros(len(val_true), bool),
        val_spec, split="val",
    )
    return train, val


def rerender(dataset, resolution):
    """Render the same samples of a generated split at another resolution.

    Labels and the flip ledger are carried over unchanged; only images are
    regenerated, from the same per-sample substreams.
    """
    spec = dataset.spec
    stream = _VAL_STREAM if dataset.split == "val" else _TRAIN_STREAM
    images = _render_split(
        dataset.true_labels, resolution, spec.seed, stream,
        spec.pixel_noise, spec.jitter,
    )
    return Dataset(
        images,
        dataset.labels.copy(),
        dataset.true_labels.copy(),
        dataset.flip_mask.copy(),
        dataclasses.replace(spec, base_resolution=resolution),
        split=dataset.split,
    )


# ---------------------------------------------------------------------------
# directory format

_PAYLOADS = {
    "images": ("images.f32", "<f4"),
    "labels": ("labels.u32", "<u4"),
    "true_labels": ("true_labels.u32", "<u4"),
    "flip_mask": ("flip_mask.u8", "u1"),
}


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def write_dataset(dataset, path):
    """Write ``dataset`` as a directory of raw little-endian payloads."""
    dataset.check()
    os.makedirs(path, exist_ok=True)
    n, h, w = dataset.images.shape
    checksums = {}
    for attr, (fname, dtype) in _PAYLOADS.items():
        data = np.ascontiguousarray(getattr(dataset, attr), dtype=dtype).tobytes()
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(data)
        checksums[fname] = _sha256(data)
    manifest = dict(dataclasses.asdict(dataset.spec))
    manifest.update(
        N=n, C=dataset.num_classes, H=h, W=w, split=dataset.split,
        format_version=FORMAT_VERSION, checksums=checksums,
    )
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_dataset(path):
    """Read a directory written by :func:`write_dataset`.

    Raises
    ------
    MissingFileError
        The manifest or a payload file is absent.
    VersionMismatchError
        The manifest's ``format_version`` is not supported.
    SizeMismatchError
        A payload's byte length disagrees with the manifest header.
    ChecksumError
        A payload's contents changed after it was written.
    DatasetValidationError
        Labels are out of range or the flip ledger is inconsistent.
    """
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise MissingFileError(f"no manifest.json in {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"format_version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    n, h, w = manifest["N"], manifest["H"], manifest["W"]
    expected = {
        "images": (n * h * w, (n, h, w)),
        "labels": (n, (n,)),
        "true_labels": (n, (n,)),
        "flip_mask": (n, (n,)),
    }
    arrays = {}
    for attr, (fname, dtype) in _PAYLOADS.items():
        fpath = os.path.join(path, fname)
        if not os.path.exists(fpath):
            raise MissingFileError(f"missing payload {fname} in {path}")
        with open(fpath, "rb") as fh:
            data = fh.read()
        count, shape = expected[attr]
        itemsize = np.dtype(dtype).itemsize
        if len(data) != count * itemsize:
            raise SizeMismatchError(
                f"{fname}: {len(data)} bytes, header implies {count * itemsize}"
            )
        if manifest.get("checksums", {}).get(fname) != _sha256(data):
            raise ChecksumError(f"{fname}: checksum mismatch")
        arrays[attr] = np.frombuffer(data, dtype=dtype).reshape(shape)

    spec_fields = {f.name for f in dataclasses.fields(DatasetSpec)}
    spec = DatasetSpec(**{k: v for k, v in manifest.items() if k in spec_fields})
    if manifest["C"] != spec.num_classes:
        raise DatasetValidationError("manifest C disagrees with num_classes")
    dataset = Dataset(
        images=arrays["images"].astype(np.float32),
        labels=arrays["labels"].astype(np.uint32),
        true_labels=arrays["true_labels"].astype(np.uint32),
        flip_mask=arrays["flip_mask"].astype(bool),
        spec=spec,
        split=manifest.get("split", "train"),
    )
    if np.any((arrays["flip_mask"] != 0) & (arrays["flip_mask"] != 1)):
        raise DatasetValidationError("flip_mask must contain only 0/1")
    return dataset.check()


def dataset_io(dataset, path, direction):
    """Single entry point for the directory format: ``write`` or ``read``."""
    if direction == "write":
        write_dataset(dataset, path)
        return None
    if direction == "read":
        return read_dataset(path)
    raise ConfigError(f"direction must be 'write' or 'read', got {direction!r}")
