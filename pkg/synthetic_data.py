"""
Synthetic Segmentation Data for Deco-Mamba

Desk-scale stand-in for licensed medical datasets: textured images with one
anti-aliased shape per foreground class, exact label masks, flip/rotation
augmentation, batching with background prefetch, and the on-disk PPM/PGM format.

Key Features:
- synth_generate(): pure function of (spec, seed); samples generated in parallel
- Every foreground class has a fixed shape kind (ellipse, rectangle or ring)
- augment_with_record() / inverse_augment(): exact, invertible geometry
- BatchIterator: seed-deterministic batch order with a bounded prefetch thread
- write_dataset() / load_dataset(): images/, masks/ and manifest.txt

On-disk format:
- images/<id>.ppm (P6) or images/<id>.pgm (P5), 8-bit, maxval 255
- masks/<id>.pgm (P5), pixel value = class index
- manifest.txt: key=value header lines, then one "<id> <split>" line per sample
"""

import os
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from config_manager import get_thread_count
from errors import ConfigurationError, DatasetError, PreconditionError
from run_logging import safe_update_log

MANIFEST_NAME = "manifest.txt"

# Foreground colors, cycled for classes beyond the table
PALETTE: Tuple[Tuple[float, float, float], ...] = (
    (0.90, 0.20, 0.20),
    (0.20, 0.85, 0.30),
    (0.25, 0.40, 0.95),
    (0.95, 0.85, 0.20),
    (0.80, 0.30, 0.90),
    (0.20, 0.90, 0.90),
    (0.95, 0.55, 0.15),
    (0.60, 0.60, 0.60),
)


class ShapeKind(Enum):
    ELLIPSE = "ellipse"
    RECTANGLE = "rectangle"
    RING = "ring"


# =============================================================================
# DATA STRUCTURES
# =============================================================================

@dataclass
class SynthSpec:
    """Generation parameters; sizes in pixels, radii as fractions of min(H, W)."""
    count: int = 200
    val_count: int = 50
    height: int = 96
    width: int = 96
    num_classes: int = 4
    channels: int = 3
    shape_mix: Tuple[ShapeKind, ...] = (ShapeKind.ELLIPSE, ShapeKind.RECTANGLE, ShapeKind.RING)
    noise: float = 0.05
    max_shapes: int = 3
    supersample: int = 4
    min_radius: float = 0.08
    max_radius: float = 0.22

    def __post_init__(self):
        self.shape_mix = tuple(ShapeKind(k) if not isinstance(k, ShapeKind) else k for k in self.shape_mix)

    def validate(self) -> "SynthSpec":
        if self.num_classes < 2:
            raise ConfigurationError("need background plus at least one class", key="num_classes")
        if self.num_classes > 256:
            raise ConfigurationError("class indices must fit in 8-bit masks", key="num_classes")
        if self.height <= 0 or self.width <= 0 or self.height % 32 or self.width % 32:
            raise ConfigurationError(f"{self.height}x{self.width} must be positive multiples of 32", key="height")
        if self.channels not in (1, 3):
            raise ConfigurationError("images are grayscale (1) or RGB (3)", key="channels")
        if self.count < 0 or self.val_count < 0:
            raise ConfigurationError("sample counts must be non-negative", key="count")
        if not self.shape_mix:
            raise ConfigurationError("at least one shape kind is required", key="shape_mix")
        if self.noise < 0:
            raise ConfigurationError("noise level must be non-negative", key="noise")
        if self.supersample < 1 or self.max_shapes < 1:
            raise ConfigurationError("supersample and max_shapes must be >= 1", key="supersample")
        if not 0 < self.min_radius <= self.max_radius < 0.5:
            raise ConfigurationError("need 0 < min_radius <= max_radius < 0.5", key="min_radius")
        return self

    def kind_for_class(self, class_index: int) -> ShapeKind:
        return self.shape_mix[(class_index - 1) % len(self.shape_mix)]


@dataclass
class ShapeSpec:
    kind: ShapeKind
    class_index: int
    center: Tuple[float, float]          # (row, col) in pixel units
    radii: Tuple[float, float]           # (row, col) half extents
    angle: float = 0.0                   # radians
    inner_ratio: float = 0.55            # rings only

    def contains(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """Boolean membership of continuous (row, col) coordinates."""
        dy, dx = ys - self.center[0], xs - self.center[1]
        cos_a, sin_a = np.cos(self.angle), np.sin(self.angle)
        v = (cos_a * dy - sin_a * dx) / self.radii[0]
        u = (sin_a * dy + cos_a * dx) / self.radii[1]
        if self.kind is ShapeKind.RECTANGLE:
            return (np.abs(v) <= 1.0) & (np.abs(u) <= 1.0)
        radius2 = v * v + u * u
        if self.kind is ShapeKind.RING:
            return (radius2 <= 1.0) & (radius2 >= self.inner_ratio ** 2)
        return radius2 <= 1.0


@dataclass
class SegSample:
    image: np.ndarray        # [C, H, W] float32 in [0, 1]
    mask: np.ndarray         # [H, W] uint8 class indices
    id: str
    split: str = "train"

    def validate(self, num_classes: int) -> "SegSample":
        if self.image.ndim != 3 or self.mask.shape != self.image.shape[1:]:
            raise DatasetError(f"sample {self.id}: image {self.image.shape} vs mask {self.mask.shape}")
        if not np.isfinite(self.image).all() or self.image.min() < 0 or self.image.max() > 1:
            raise DatasetError(f"sample {self.id}: image values outside [0, 1]")
        if self.mask.size and int(self.mask.max()) >= num_classes:
            raise DatasetError(f"sample {self.id}: mask value {int(self.mask.max())} >= {num_classes} classes")
        return self


@dataclass
class SegDataset:
    samples: List[SegSample]
    num_classes: int

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> SegSample:
        return self.samples[index]

    def __iter__(self) -> Iterator[SegSample]:
        return iter(self.samples)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        if not self.samples:
            raise DatasetError("dataset is empty")
        return tuple(self.samples[0].image.shape)

    def split(self, name: str) -> "SegDataset":
        return SegDataset([s for s in self.samples if s.split == name], self.num_classes)

    def splits(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for sample in self.samples:
            counts[sample.split] = counts.get(sample.split, 0) + 1
        return counts

    def class_histogram(self) -> np.ndarray:
        """Number of samples containing each class."""
        hist = np.zeros(self.num_classes, dtype=np.int64)
        for sample in self.samples:
            hist[np.unique(sample.mask)] += 1
        return hist


# =============================================================================
# RENDERING
# =============================================================================

def class_color(class_index: int, num_classes: int, channels: int) -> np.ndarray:
    if channels == 1:
        return np.array([0.4 + 0.55 * class_index / max(num_classes - 1, 1)])
    base = np.array(PALETTE[(class_index - 1) % len(PALETTE)])
    cycle = (class_index - 1) // len(PALETTE)
    return base * (0.7 ** cycle)


def _pixel_grid(height: int, width: int, factor: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(height * factor) + 0.5) / factor
    xs = (np.arange(width * factor) + 0.5) / factor
    return np.meshgrid(ys, xs, indexing="ij")


def rasterize(shape: ShapeSpec, height: int, width: int) -> np.ndarray:
    """Pixels whose centers lie inside the shape."""
    ys, xs = _pixel_grid(height, width)
    return shape.contains(ys, xs)


def coverage(shape: ShapeSpec, height: int, width: int, factor: int) -> np.ndarray:
    """Fraction of each pixel covered, estimated on a factor x factor subgrid."""
    ys, xs = _pixel_grid(height, width, factor)
    inside = shape.contains(ys, xs).astype(np.float64)
    return inside.reshape(height, factor, width, factor).mean(axis=(1, 3))


def textured_background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    ys, xs = _pixel_grid(spec.height, spec.width)
    base = rng.uniform(0.12, 0.30)
    texture = np.zeros((spec.height, spec.width))
    for _ in range(2):
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        texture += 0.04 * np.sin(2 * np.pi * (fy * ys / spec.height + fx * xs / spec.width) + phase)
    tint = rng.uniform(0.9, 1.1, size=(spec.channels, 1, 1))
    return np.clip((base + texture)[None, :, :] * tint, 0.0, 1.0)


def random_shapes(spec: SynthSpec, rng: np.random.Generator, guaranteed_class: int) -> List[ShapeSpec]:
    """Shapes in paint order; the guaranteed class is painted last so it stays visible."""
    foreground = list(range(1, spec.num_classes))
    extra = min(int(rng.integers(1, spec.max_shapes + 1)), len(foreground)) - 1
    others = [c for c in foreground if c != guaranteed_class]
    chosen = list(rng.choice(others, size=extra, replace=False)) if extra > 0 else []
    chosen.append(guaranteed_class)

    side = min(spec.height, spec.width)
    shapes = []
    for class_index in chosen:
        kind = spec.kind_for_class(int(class_index))
        radii = rng.uniform(spec.min_radius, spec.max_radius, size=2) * side
        if kind is ShapeKind.RING:
            radii[:] = radii.max()
        reach = float(np.hypot(*radii))
        cy = rng.uniform(min(reach, spec.height / 2), max(spec.height - reach, spec.height / 2))
        cx = rng.uniform(min(reach, spec.width / 2), max(spec.width - reach, spec.width / 2))
        angle = rng.uniform(0.0, np.pi) if kind is not ShapeKind.RING else 0.0
        shapes.append(ShapeSpec(kind, int(class_index), (cy, cx), (float(radii[0]), float(radii[1])), angle))
    return shapes


def render_sample(shapes: Sequence[ShapeSpec], spec: SynthSpec, rng: np.random.Generator,
                  sample_id: str = "sample", split: str = "train") -> SegSample:
    """Paint shapes in order over a textured background; later shapes overwrite earlier ones."""
    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
    image = textured_background(spec, rng)
    for shape in shapes:
        mask[rasterize(shape, spec.height, spec.width)] = shape.class_index
        alpha = coverage(shape, spec.height, spec.width, spec.supersample)[None, :, :]
        color = class_color(shape.class_index, spec.num_classes, spec.channels)[:, None, None]
        image = image * (1.0 - alpha) + alpha * color
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(image=image, mask=mask, id=sample_id, split=split)


def _generate_one(spec: SynthSpec, seed: int, index: int) -> SegSample:
    rng = np.random.default_rng([seed, index])
    split = "train" if index < spec.count else "val"
    guaranteed = index % (spec.num_classes - 1) + 1
    shapes = random_shapes(spec, rng, guaranteed)
    return render_sample(shapes, spec, rng, sample_id=f"{split}_{index:05d}", split=split)


def synth_generate(spec: SynthSpec, seed: int = 0) -> SegDataset:
    """Generate count train + val_count val samples; a pure function of (spec, seed)."""
    spec.validate()
    total = spec.count + spec.val_count
    workers = max(min(get_thread_count(), total), 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        samples = list(pool.map(lambda index: _generate_one(spec, seed, index), range(total)))
    safe_update_log(f"[SYNTH] generated {total} samples ({spec.count} train / {spec.val_count} val), "
                    f"{spec.num_classes} classes at {spec.height}x{spec.width}")
    return SegDataset(samples, spec.num_classes)


# =============================================================================
# AUGMENTATION
# =============================================================================

@dataclass
class AugmentRecord:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0           # counter-clockwise quarter turns
    angle: float = 0.0       # free rotation in degrees; not invertible

    @property
    def invertible(self) -> bool:
        return self.angle == 0.0


def draw_augment(rng: np.random.Generator, square: bool = True, free_rotation: bool = False) -> AugmentRecord:
    """Independent 50% flips plus a uniform quarter-turn (half-turns only for non-square images)."""
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    if free_rotation:
        return AugmentRecord(hflip, vflip, 0, float(rng.uniform(-180.0, 180.0)))
    turns = int(rng.integers(4)) if square else 2 * int(rng.integers(2))
    return AugmentRecord(hflip, vflip, turns)


def apply_augment(sample: SegSample, record: AugmentRecord) -> SegSample:
    image, mask = sample.image, sample.mask
    if record.hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if record.vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    if record.rot90:
        image, mask = np.rot90(image, record.rot90, axes=(1, 2)), np.rot90(mask, record.rot90, axes=(0, 1))
    if record.angle:
        image = ndimage.rotate(image, record.angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
        image = np.clip(image, 0.0, 1.0)
        mask = ndimage.rotate(mask, record.angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
    return SegSample(np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(mask),
                     sample.id, sample.split)


def augment_with_record(sample: SegSample, rng: np.random.Generator,
                        free_rotation: bool = False) -> Tuple[SegSample, AugmentRecord]:
    square = sample.mask.shape[0] == sample.mask.shape[1]
    record = draw_augment(rng, square, free_rotation)
    return apply_augment(sample, record), record


def augment(sample: SegSample, rng: np.random.Generator, free_rotation: bool = False) -> SegSample:
    return augment_with_record(sample, rng, free_rotation)[0]


def inverse_augment(sample: SegSample, record: AugmentRecord) -> SegSample:
    """Undo apply_augment exactly: rotation first, then the flips."""
    if not record.invertible:
        raise PreconditionError("inverse_augment", "free-angle rotation cannot be undone exactly")
    image, mask = sample.image, sample.mask
    if record.rot90:
        image, mask = np.rot90(image, -record.rot90, axes=(1, 2)), np.rot90(mask, -record.rot90, axes=(0, 1))
    if record.vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    if record.hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    return SegSample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.id, sample.split)


# =============================================================================
# BATCHING
# =============================================================================

@dataclass
class SegBatch:
    images: np.ndarray       # [B, C, H, W] float32
    masks: np.ndarray        # [B, H, W] int64
    ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def collate(cls, samples: Sequence[SegSample]) -> "SegBatch":
        if not samples:
            raise DatasetError("cannot collate an empty batch")
        shapes = {s.image.shape for s in samples}
        if len(shapes) != 1:
            raise DatasetError(f"mixed image shapes in one batch: {sorted(shapes)}")
        images = np.stack([s.image for s in samples]).astype(np.float32)
        masks = np.stack([s.mask for s in samples]).astype(np.int64)
        return cls(images, masks, [s.id for s in samples])


_END = object()


class BatchIterator:
    """
    Batches of one epoch in an order fixed by (seed, epoch).

    Augmentation of sample i in epoch e draws from default_rng([seed, e, i]),
    so batch contents do not depend on prefetch timing.
    """

    def __init__(self, dataset: SegDataset, batch_size: int, seed: int = 0, epoch: int = 0,
                 shuffle: bool = True, augment: bool = True, free_rotation: bool = False,
                 drop_last: bool = False, prefetch: int = 2):
        if batch_size < 1:
            raise ConfigurationError("batch size must be at least 1", key="batch_size")
        if len(dataset) == 0:
            raise DatasetError("dataset is empty")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.shuffle = shuffle
        self.augment = augment
        self.free_rotation = free_rotation
        self.drop_last = drop_last
        self.prefetch = prefetch

    def __len__(self) -> int:
        full, rest = divmod(len(self.dataset), self.batch_size)
        return full if self.drop_last or not rest else full + 1

    def order(self) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.dataset))
        return np.random.default_rng([self.seed, self.epoch]).permutation(len(self.dataset))

    def _chunks(self) -> List[np.ndarray]:
        order = self.order()
        return [order[i:i + self.batch_size] for i in range(0, len(self) * self.batch_size, self.batch_size)]

    def _build(self, indices: np.ndarray) -> SegBatch:
        samples = []
        for index in indices:
            sample = self.dataset[int(index)]
            if self.augment:
                rng = np.random.default_rng([self.seed, self.epoch, int(index)])
                sample = augment(sample, rng, self.free_rotation)
            samples.append(sample)
        return SegBatch.collate(samples)

    def __iter__(self) -> Iterator[SegBatch]:
        chunks = self._chunks()
        if self.prefetch <= 0:
            for chunk in chunks:
                yield self._build(chunk)
            return

        pending: "queue.Queue" = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()

        def offer(item) -> bool:
            while not stop.is_set():
                try:
                    pending.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def producer():
            try:
                for chunk in chunks:
                    if not offer(self._build(chunk)):
                        return
                offer(_END)
            except Exception as e:  # surfaced in the consumer thread
                offer(e)

        worker = threading.Thread(target=producer, name="batch-prefetch", daemon=True)
        worker.start()
        try:
            while True:
                item = pending.get()
                if item is _END:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            worker.join(timeout=1.0)


# =============================================================================
# DISK FORMAT
# =============================================================================

def write_image(path: str, image: np.ndarray):
    """[C, H, W] floats in [0, 1] -> 8-bit PPM (C=3) or PGM (C=1)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DatasetError(f"expected [1|3, H, W] image, got {image.shape}", path=path)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    pixels = pixels[0] if pixels.shape[0] == 1 else pixels.transpose(1, 2, 0)
    try:
        Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")
    except OSError as e:
        raise DatasetError(f"cannot write image: {e}", path=path)


def read_image(path: str) -> np.ndarray:
    """8-bit PPM/PGM -> [C, H, W] float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            pixels = np.asarray(im)
    except OSError as e:
        raise DatasetError(f"cannot read image: {e}", path=path)
    if mode == "L":
        pixels = pixels[None, :, :]
    elif mode == "RGB":
        pixels = pixels.transpose(2, 0, 1)
    else:
        raise DatasetError(f"unsupported image mode {mode} (expected 8-bit PGM or PPM)", path=path)
    return (pixels.astype(np.float32) / 255.0)


def write_mask(path: str, mask: np.ndarray):
    mask = np.asarray(mask)
    if mask.ndim != 2 or (mask.size and (mask.min() < 0 or mask.max() > 255)):
        raise DatasetError("masks are 2-D with class indices in [0, 255]", path=path)
    try:
        Image.fromarray(np.ascontiguousarray(mask.astype(np.uint8))).save(path, format="PPM")
    except OSError as e:
        raise DatasetError(f"cannot write mask: {e}", path=path)


def read_mask(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            mask = np.array(im)
    except OSError as e:
        raise DatasetError(f"cannot read mask: {e}", path=path)
    if mode != "L":
        raise DatasetError(f"masks must be 8-bit PGM, got mode {mode}", path=path)
    return mask.astype(np.uint8)


def _image_name(sample_id: str, channels: int) -> str:
    return f"{sample_id}.ppm" if channels == 3 else f"{sample_id}.pgm"


def write_dataset(dataset: SegDataset, out_dir: str) -> str:
    """Write images/, masks/ and the manifest; returns the manifest path."""
    if len(dataset) == 0:
        raise DatasetError("refusing to write an empty dataset", path=out_dir)
    channels, height, width = dataset.image_shape
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    lines = [f"num_classes={dataset.num_classes}", f"channels={channels}",
             f"height={height}", f"width={width}", f"count={len(dataset)}"]
    for sample in dataset:
        if any(ch.isspace() or ch == "=" for ch in sample.id):
            raise DatasetError(f"sample id {sample.id!r} contains whitespace or '='", path=out_dir)
        write_image(os.path.join(out_dir, "images", _image_name(sample.id, channels)), sample.image)
        write_mask(os.path.join(out_dir, "masks", f"{sample.id}.pgm"), sample.mask)
        lines.append(f"{sample.id} {sample.split}")
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    safe_update_log(f"[SYNTH] ✅ wrote {len(dataset)} samples to {out_dir}")
    return manifest


def read_manifest(data_dir: str) -> Tuple[Dict[str, str], List[Tuple[str, str]]]:
    path = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise DatasetError("manifest not found", path=path)
    header: Dict[str, str] = {}
    entries: List[Tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if "=" in line:
                key, value = line.split("=", 1)
                header[key] = value
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DatasetError(f"manifest line {number}: expected '<id> <split>'", path=path)
            entries.append((parts[0], parts[1]))
    for key in ("num_classes", "channels"):
        if key not in header:
            raise DatasetError(f"manifest is missing '{key}'", path=path)
    return header, entries


def load_dataset(data_dir: str, split: Optional[str] = None) -> SegDataset:
    """Load a dataset directory, optionally one split only."""
    header, entries = read_manifest(data_dir)
    try:
        num_classes, channels = int(header["num_classes"]), int(header["channels"])
    except ValueError:
        raise DatasetError("manifest header values must be integers", path=data_dir)
    samples = []
    for sample_id, sample_split in entries:
        if split is not None and sample_split != split:
            continue
        image = read_image(os.path.join(data_dir, "images", _image_name(sample_id, channels)))
        mask = read_mask(os.path.join(data_dir, "masks", f"{sample_id}.pgm"))
        if image.shape[0] != channels:
            raise DatasetError(f"sample {sample_id}: {image.shape[0]} channels, manifest says {channels}",
                               path=data_dir)
        samples.append(SegSample(image, mask, sample_id, sample_split).validate(num_classes))
    if not samples:
        raise DatasetError(f"no samples for split '{split}'" if split else "dataset is empty", path=data_dir)
    return SegDataset(samples, num_classes)
