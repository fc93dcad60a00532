"""Dataset loading, trigger injection, and poisoned-set assembly.

Images live as [N,C,H,W] reals in [0,1] (8-bit sources are scaled at load).
All builders are pure functions of their inputs and seeds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels
DATASET_MAGIC = b"PDST"
DATASET_VERSION = 1

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N,C,H,W], got {self.images.ndim}-d")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.num_classes)


@dataclass(frozen=True)
class TriggerSpec:
    kind: str = "patch"
    size: int = 3
    position: str = "bottom-right"
    value: float = 1.0
    alpha: float = 0.2
    pattern_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("patch", "blend"):
            raise ValueError(f"trigger kind must be 'patch' or 'blend', got {self.kind!r}")
        if self.kind == "patch":
            if self.size < 1:
                raise ValueError(f"patch size must be >= 1, got {self.size}")
            if self.position not in CORNERS:
                raise ValueError(f"patch position must be one of {CORNERS}, got {self.position!r}")
        else:
            # alpha = 0 is tolerated as a boundary so identity behaviour is testable
            if not (0.0 <= self.alpha < 1.0):
                raise ValueError(f"blend alpha must lie in [0, 1), got {self.alpha}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "patch":
            d.update(size=self.size, position=self.position, value=self.value)
        else:
            d.update(alpha=self.alpha, pattern_seed=self.pattern_seed)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        return cls(
            kind=d.get("kind", "patch"),
            size=int(d.get("size", 3)),
            position=d.get("position", "bottom-right"),
            value=float(d.get("value", 1.0)),
            alpha=float(d.get("alpha", 0.2)),
            pattern_seed=int(d.get("pattern_seed", 0)),
        )


@dataclass(frozen=True)
class PoisonConfig:
    rate: float
    trigger: TriggerSpec
    target_label: int = 0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.rate <= 1.0):
            raise ValueError(f"poison rate must lie in (0, 1], got {self.rate}")
        if self.target_label < 0:
            raise ValueError(f"target_label must be >= 0, got {self.target_label}")


@dataclass
class PoisonedDataset:
    dataset: Dataset
    poison_mask: np.ndarray
    config: PoisonConfig

    def clean_subset(self) -> Dataset:
        return self.dataset.subset(np.flatnonzero(~self.poison_mask))


def blend_pattern(trigger: TriggerSpec, shape) -> np.ndarray:
    """The seeded uniform-noise pattern mixed in by a blend trigger."""
    return np.random.default_rng(trigger.pattern_seed).uniform(0.0, 1.0, size=shape)


def _patch_slices(trigger: TriggerSpec, h: int, w: int):
    s = trigger.size
    if s > h or s > w:
        raise ValueError(f"{s}x{s} patch does not fit a {h}x{w} image")
    rows = slice(0, s) if trigger.position.startswith("top") else slice(h - s, h)
    cols = slice(0, s) if trigger.position.endswith("left") else slice(w - s, w)
    return rows, cols


def inject_trigger(image: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Return a triggered copy of one [C,H,W] image."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError(f"image must be [C,H,W], got {img.ndim}-d")
    out = img.copy()
    if trigger.kind == "patch":
        rows, cols = _patch_slices(trigger, img.shape[1], img.shape[2])
        out[:, rows, cols] = trigger.value
    else:
        pattern = blend_pattern(trigger, img.shape).astype(img.dtype)
        out = (1.0 - trigger.alpha) * img + trigger.alpha * pattern
        out = out.astype(img.dtype, copy=False)
    return out


def apply_trigger_batch(images: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Vectorized inject_trigger over a [N,C,H,W] stack."""
    imgs = np.asarray(images)
    out = imgs.copy()
    if trigger.kind == "patch":
        rows, cols = _patch_slices(trigger, imgs.shape[2], imgs.shape[3])
        out[:, :, rows, cols] = trigger.value
    else:
        pattern = blend_pattern(trigger, imgs.shape[1:]).astype(imgs.dtype)
        out = ((1.0 - trigger.alpha) * imgs + trigger.alpha * pattern[None]).astype(imgs.dtype, copy=False)
    return out


def poison_dataset(dataset: Dataset, config: PoisonConfig) -> PoisonedDataset:
    """Trigger and relabel a seeded sample of round(rate * N) non-target records."""
    n = len(dataset)
    if config.target_label >= dataset.num_classes:
        raise ValueError(f"target_label {config.target_label} outside [0, {dataset.num_classes})")
    n_poison = int(round(config.rate * n))
    if n_poison < 1:
        raise ValueError(
            f"poison rate {config.rate} rounds to zero records on {n} samples; raise the rate")
    pool = np.flatnonzero(dataset.labels != config.target_label)
    if n_poison > len(pool):
        raise ValueError(
            f"poison rate {config.rate} asks for {n_poison} records but only "
            f"{len(pool)} non-target records exist")
    rng = np.random.default_rng(config.seed)
    chosen = rng.choice(pool, size=n_poison, replace=False)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    images[chosen] = apply_trigger_batch(images[chosen], config.trigger)
    labels[chosen] = config.target_label
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    return PoisonedDataset(Dataset(images, labels, dataset.num_classes), mask, config)


def build_defense_set(dataset: Dataset, seed: int) -> Dataset:
    """One seeded-random clean sample per class, in class order."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.num_classes):
        candidates = np.flatnonzero(dataset.labels == c)
        if len(candidates) == 0:
            raise ValueError(f"class {c} has no samples to draw a defense example from")
        picks.append(int(rng.choice(candidates)))
    return dataset.subset(picks)


def build_asr_eval_set(test_dataset: Dataset, trigger: TriggerSpec, target_label: int) -> Dataset:
    """Trigger every test record whose true label differs from the target.

    True labels are retained; success is judged against the target label by
    the evaluator.
    """
    keep = np.flatnonzero(test_dataset.labels != target_label)
    images = apply_trigger_batch(test_dataset.images[keep], trigger)
    return Dataset(images, test_dataset.labels[keep].copy(), test_dataset.num_classes)


def load_cifar_binary(paths, dtype=np.float32) -> Dataset:
    """Read CIFAR-10 binary batches: per record 1 label byte then R,G,B planes."""
    if isinstance(paths, (str, bytes)):
        paths = [paths]
    all_images, all_labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            buf = f.read()
        if len(buf) == 0 or len(buf) % CIFAR_RECORD_BYTES:
            raise ValueError(
                f"{path}: length {len(buf)} is not a positive multiple of {CIFAR_RECORD_BYTES}")
        records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max() > 9:
            raise ValueError(f"{path}: label byte {labels.max()} outside [0, 9]")
        images = records[:, 1:].reshape(-1, 3, 32, 32).astype(dtype) / dtype(255)
        all_images.append(images)
        all_labels.append(labels.astype(np.int64))
    return Dataset(np.concatenate(all_images), np.concatenate(all_labels), num_classes=10)


_MAX_TEMPLATE_CLASSES = 10


def class_template(class_index: int, size: int) -> np.ndarray:
    """Noise-free [H,W] pattern in [0,1] that defines one synthetic class."""
    if not 0 <= class_index < _MAX_TEMPLATE_CLASSES:
        raise ValueError(f"class_index must lie in [0, {_MAX_TEMPLATE_CLASSES})")
    band = max(size // 4, 1)
    y, x = np.mgrid[0:size, 0:size]
    cy = cx = (size - 1) / 2.0
    r = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
    if class_index == 0:        # horizontal bars
        t = (y // band) % 2
    elif class_index == 1:      # vertical bars
        t = (x // band) % 2
    elif class_index == 2:      # centered disc
        t = r <= size / 3.0
    elif class_index == 3:      # checkerboard
        t = ((y // band) + (x // band)) % 2
    elif class_index == 4:      # diagonal stripes
        t = ((y + x) // band) % 2
    elif class_index == 5:      # anti-diagonal stripes
        t = ((y - x + size) // band) % 2
    elif class_index == 6:      # ring
        t = (r >= size / 4.0) & (r <= size / 2.5)
    elif class_index == 7:      # centered cross
        half = band // 2 + 1
        t = (np.abs(y - cy) <= half) | (np.abs(x - cx) <= half)
    elif class_index == 8:      # opposing quadrants
        t = ((y < cy) & (x < cx)) | ((y >= cy) & (x >= cx))
    else:                       # dot grid
        t = ((y % (2 * band)) < band // 2 + 1) & ((x % (2 * band)) < band // 2 + 1)
    return t.astype(np.float64)


def generate_synthetic(classes: int, per_class: int, size: int, seed: int,
                       noise: float = 0.18, dtype=np.float32) -> Dataset:
    """Seeded parametric dataset: one distinct template per class plus noise."""
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    if not 2 <= classes <= _MAX_TEMPLATE_CLASSES:
        raise ValueError(f"classes must lie in [2, {_MAX_TEMPLATE_CLASSES}], got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.default_rng(seed)
    images = np.empty((classes * per_class, 3, size, size), dtype=dtype)
    labels = np.repeat(np.arange(classes), per_class)
    for c in range(classes):
        base = 0.15 + 0.7 * class_template(c, size)
        block = base[None, None] + rng.normal(0.0, noise, size=(per_class, 3, size, size))
        images[c * per_class:(c + 1) * per_class] = np.clip(block, 0.0, 1.0).astype(dtype)
    return Dataset(images, labels, num_classes=classes)


def save_dataset(dataset: Dataset, path) -> None:
    """Write the 8-bit container: magic, version, dims, labels, pixels."""
    if dataset.num_classes > 255 or (len(dataset) and dataset.labels.max() > 255):
        raise ValueError("the dataset container stores labels as single bytes")
    pixels = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8)
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<5I", DATASET_VERSION, n, c, h, w))
        f.write(dataset.labels.astype(np.uint8).tobytes())
        f.write(pixels.tobytes())


def load_dataset(path, num_classes: Optional[int] = None, dtype=np.float32) -> Dataset:
    """Read the 8-bit container back; pixels return scaled to [0,1]."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError(f"not a dataset file: bad magic {magic!r}")
        header = f.read(20)
        if len(header) != 20:
            raise ValueError("dataset file truncated in header")
        version, n, c, h, w = struct.unpack("<5I", header)
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        labels = np.frombuffer(f.read(n), dtype=np.uint8)
        pixels = np.frombuffer(f.read(n * c * h * w), dtype=np.uint8)
        if len(labels) != n or len(pixels) != n * c * h * w:
            raise ValueError("dataset file truncated in payload")
    images = pixels.reshape(n, c, h, w).astype(dtype) / dtype(255)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if n else 1
    return Dataset(images, labels.astype(np.int64), num_classes)
