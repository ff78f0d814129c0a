"""Synthetic shape-segmentation dataset, fold splits, and episodic sampling.

20 classes (5 shape families x 4 texture/hue variants) rendered as 3x64x64
images with binary masks. Each image carries one foreground shape of the
sample's class plus one distractor shape of another family, so segmentation
genuinely requires the support guidance. Several families are horizontally
asymmetric and shapes are drawn with a random left/right orientation, which
makes the reflected view informative.

Files: images as binary PPM (P6), masks as binary PGM (P5, foreground 255),
plus a CSV manifest `sample_id,class_id,image_path,mask_path`.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

IMAGE_SIZE = 64
N_CLASSES = 20
N_FOLDS = 4
MIN_FOREGROUND = 64  # pixels at image resolution

FAMILIES = ("disk", "ring", "triangle", "cross", "bar")


class DegenerateEpisodeError(RuntimeError):
    """Episode sampling kept producing empty feature-resolution masks."""


@dataclass(frozen=True)
class ShapeClass:
    class_id: int
    family: str
    texture_freq: int
    hue: float

    @staticmethod
    def from_id(class_id: int) -> "ShapeClass":
        if not 0 <= class_id < N_CLASSES:
            raise ValueError(f"class id {class_id} out of range")
        variant = class_id // len(FAMILIES)
        return ShapeClass(
            class_id=class_id,
            family=FAMILIES[class_id % len(FAMILIES)],
            texture_freq=3 + 2 * variant,
            # hues are interleaved over the wheel (7 is coprime with 20) so
            # that holding out any 5 consecutive ids as a fold's novel
            # classes never removes a contiguous quarter of the color wheel
            # from training
            hue=(class_id * 7 % N_CLASSES) / N_CLASSES,
        )


@dataclass
class Sample:
    image: np.ndarray  # 3 x 64 x 64 float64 in [0, 1]
    mask: np.ndarray   # 64 x 64 uint8 in {0, 1}
    class_id: int
    sample_id: str


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    novel_classes: tuple
    base_classes: tuple


@dataclass
class Episode:
    supports: list
    query: Sample
    class_id: int
    seed: int


def split_folds(fold: int) -> FoldSplit:
    """Fold i holds out the contiguous 5-class block {5i .. 5i+4} as novel."""
    if fold not in range(N_FOLDS):
        raise ValueError(f"fold must be in 0..3, got {fold}")
    novel = tuple(range(5 * fold, 5 * fold + 5))
    base = tuple(c for c in range(N_CLASSES) if c not in novel)
    return FoldSplit(fold=fold, novel_classes=novel, base_classes=base)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _hue_to_rgb(h: float) -> np.ndarray:
    # simple saturated hue wheel, enough to keep the 20 classes apart
    r = np.clip(np.abs(h * 6.0 - 3.0) - 1.0, 0.0, 1.0)
    g = np.clip(2.0 - np.abs(h * 6.0 - 2.0), 0.0, 1.0)
    b = np.clip(2.0 - np.abs(h * 6.0 - 4.0), 0.0, 1.0)
    return np.array([r, g, b])


def _shape_mask(family: str, cx: float, cy: float, r: float, orient: int) -> np.ndarray:
    """Rasterize one shape on the 64x64 grid. orient flips left/right."""
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    dx = (x - cx) * orient
    dy = y - cy
    d2 = dx * dx + dy * dy
    if family == "disk":
        return d2 <= r * r
    if family == "ring":
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if family == "triangle":
        # wedge pointing in the orient direction
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.6 * (r - dx))
    if family == "cross":
        # vertical bar offset from the horizontal bar's center
        vert = (np.abs(dx - 0.45 * r) <= 0.3 * r) & (np.abs(dy) <= r)
        horiz = (np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r)
        return vert | horiz
    if family == "bar":
        # diagonal bar
        return (np.abs(dy - 0.8 * dx) <= 0.35 * r) & (np.abs(dx) <= r)
    raise ValueError(f"unknown family {family!r}")


def _draw_shape(rng: np.random.Generator, cls: ShapeClass) -> np.ndarray:
    for _ in range(64):
        cx = rng.uniform(24.0, IMAGE_SIZE - 24.0)
        cy = rng.uniform(24.0, IMAGE_SIZE - 24.0)
        r = rng.uniform(15.0, 23.0)
        orient = 1 if rng.random() < 0.5 else -1
        mask = _shape_mask(cls.family, cx, cy, r, orient)
        if mask.sum() >= MIN_FOREGROUND:
            return mask
    raise RuntimeError("shape rasterization kept producing tiny masks")


def render_sample(class_id: int, rng: np.random.Generator) -> tuple:
    """Render one (image, mask) pair; deterministic in the rng state."""
    cls = ShapeClass.from_id(class_id)
    y, x = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)

    # textured background with a mild random tint
    bg_freq = rng.uniform(1.0, 2.5)
    phase = rng.uniform(0.0, 2 * np.pi, size=2)
    tint = rng.uniform(0.15, 0.35, size=3)
    texture = 0.08 * np.sin(2 * np.pi * bg_freq * x / IMAGE_SIZE + phase[0]) * \
        np.sin(2 * np.pi * bg_freq * y / IMAGE_SIZE + phase[1])
    image = tint[:, None, None] + texture[None]

    def paint(mask, shape_cls):
        color = 0.35 + 0.55 * _hue_to_rgb(shape_cls.hue)
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * shape_cls.texture_freq * x / IMAGE_SIZE)
        fg = color[:, None, None] * (0.55 + 0.45 * stripes[None])
        return np.where(mask[None], fg, image)

    # distractor from a different family, then the true foreground on top
    other_ids = [c for c in range(N_CLASSES)
                 if ShapeClass.from_id(c).family != cls.family]
    distractor = ShapeClass.from_id(int(rng.choice(other_ids)))
    d_mask = _draw_shape(rng, distractor)
    image = paint(d_mask, distractor)
    f_mask = _draw_shape(rng, cls)
    image = paint(f_mask, cls)

    image = image + rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image, f_mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# PPM / PGM I/O
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray):
    """Write a 3xHxW float image in [0, 1] as binary PPM (P6, maxval 255)."""
    _, h, w = image.shape
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.transpose(1, 2, 0).tobytes())


def write_pgm(path, mask: np.ndarray):
    """Write a binary HxW mask as PGM (P5); foreground 255, background 0."""
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((mask.astype(np.uint8) * 255).tobytes())


def _read_pnm_header(f):
    fields = []
    while len(fields) < 4:
        line = f.readline()
        if not line:
            raise ValueError("truncated PNM header")
        body = line.split(b"#", 1)[0]
        fields.extend(body.split())
    return fields[:4]


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic != b"P6" or int(maxval) != 255:
            raise ValueError(f"{path}: expected binary P6 maxval 255")
        w, h = int(w), int(h)
        raw = np.frombuffer(f.read(3 * w * h), dtype=np.uint8)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic != b"P5" or int(maxval) != 255:
            raise ValueError(f"{path}: expected binary P5 maxval 255")
        w, h = int(w), int(h)
        raw = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return (raw.reshape(h, w) >= 128).astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.csv"


def generate_dataset(n_per_class: int, seed: int, out_dir) -> str:
    """Write n_per_class samples per class plus a manifest; returns its path.

    Fully deterministic in `seed`: each sample draws from an independent rng
    stream keyed by (seed, class id, sample index).
    """
    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    rows = []
    for class_id in range(N_CLASSES):
        for idx in range(n_per_class):
            rng = np.random.default_rng([seed, class_id, idx])
            image, mask = render_sample(class_id, rng)
            sample_id = f"c{class_id:02d}_s{idx:04d}"
            image_rel = os.path.join("images", sample_id + ".ppm")
            mask_rel = os.path.join("masks", sample_id + ".pgm")
            write_ppm(os.path.join(out_dir, image_rel), image)
            write_pgm(os.path.join(out_dir, mask_rel), mask)
            rows.append((sample_id, class_id, image_rel, mask_rel))
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "class_id", "image_path", "mask_path"])
        writer.writerows(rows)
    return manifest_path


@dataclass
class Manifest:
    root: str
    rows: list  # (sample_id, class_id, image_rel, mask_rel)
    by_class: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.by_class:
            for i, (_, class_id, _, _) in enumerate(self.rows):
                self.by_class.setdefault(class_id, []).append(i)

    def load(self, index: int) -> Sample:
        sample_id, class_id, image_rel, mask_rel = self.rows[index]
        return Sample(
            image=read_ppm(os.path.join(self.root, image_rel)),
            mask=read_pgm(os.path.join(self.root, mask_rel)),
            class_id=class_id,
            sample_id=sample_id,
        )


def load_manifest(dataset_dir) -> Manifest:
    rows = []
    with open(os.path.join(dataset_dir, MANIFEST_NAME), newline="") as f:
        for rec in csv.DictReader(f):
            rows.append((rec["sample_id"], int(rec["class_id"]),
                         rec["image_path"], rec["mask_path"]))
    return Manifest(root=str(dataset_dir), rows=rows)


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Area-average over stride x stride blocks, then threshold at 0.5."""
    h, w = mask.shape
    if h % stride or w % stride:
        raise ValueError(f"mask {mask.shape} not divisible by stride {stride}")
    blocks = mask.astype(np.float64).reshape(h // stride, stride, w // stride, stride)
    return (blocks.mean(axis=(1, 3)) >= 0.5).astype(np.uint8)


def sample_episode(manifest: Manifest, split: FoldSplit, phase: str, k: int,
                   rng: np.random.Generator, feature_stride: int = 4) -> Episode:
    """Draw one K-shot episode; train draws base classes, test novel classes.

    Retries (up to 10) when any support or query mask empties at feature
    resolution, then raises DegenerateEpisodeError.
    """
    if phase not in ("train", "test"):
        raise ValueError(f"phase must be train or test, got {phase!r}")
    classes = split.base_classes if phase == "train" else split.novel_classes
    for _ in range(10):
        class_id = int(rng.choice(classes))
        pool = manifest.by_class[class_id]
        if len(pool) < k + 1:
            raise ValueError(f"class {class_id} has fewer than {k + 1} samples")
        picks = rng.choice(len(pool), size=k + 1, replace=False)
        samples = [manifest.load(pool[int(p)]) for p in picks]
        masks_ok = all(
            downsample_mask(s.mask, feature_stride).sum() >= 1 for s in samples
        )
        if masks_ok:
            return Episode(supports=samples[:k], query=samples[k],
                           class_id=class_id, seed=0)
    raise DegenerateEpisodeError("10 draws in a row emptied at feature resolution")
