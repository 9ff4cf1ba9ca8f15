"""Corpus ingestion, preprocessing, augmentation, splitting, and the
synthetic crack generator used for desk-scale experiments.

Directory layout: <root>/cracked/*.png|jpg and <root>/non-cracked/*.png|jpg.
Images load as float32 (H, W, 3) in [0, 1], resized to the 64x64 working
resolution with the engine's corner-aligned bilinear kernel.

Augmentation applies, in fixed order: rotation, shift, zoom (the three
compose into one affine inverse-map warp with bilinear sampling and
nearest-edge fill), then intensity scaling with clamping, then the two
flips. Exactly seven random draws happen per call in a fixed order, so the
stream position never depends on the config.
"""

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .kernels import resize_bilinear
from .rng import TAG_SYNTH, derive_rng

WORKING_SIZE = 64
CLASS_LABELS = {"cracked": 1, "non-cracked": 0}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}

# synthetic generator constants, tuned once against the desk-scale runs
SYNTH_LUMINANCE = 0.62
SYNTH_COARSE_AMP = 0.06
SYNTH_SPECKLE_AMP = 0.03
SYNTH_CRACK_WIDTH = (1.5, 4.0)  # px, absolute at any image size
SYNTH_CRACK_DEPTH = (0.25, 0.45)
SYNTH_CRACK_FEATHER = 1.0
SYNTH_BRANCH_PROB = 0.4


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int  # cracked = 1, non-cracked = 0
    source_id: str


@dataclass
class AugmentConfig:
    rot_max_deg: float = 25.0
    shift_frac: float = 0.10
    zoom_frac: float = 0.20
    intensity_frac: float = 0.20
    h_flip: bool = True
    v_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("shift_frac", "zoom_frac", "intensity_frac"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if not 0 <= self.rot_max_deg < 360:
            raise ValueError(f"rot_max_deg must be in [0, 360), got {self.rot_max_deg}")


@dataclass
class DatasetIndex:
    root: str
    files: dict  # class name -> list of file names
    counts: dict  # class name -> loaded count
    skipped: int = 0


def tile_mother_image(image, tile=256):
    """Non-overlapping tile x tile grid from the top left, row-major;
    partial edge remainders are dropped."""
    H, W = image.shape[:2]
    if H < tile or W < tile:
        raise ValueError(f"image {H}x{W} is smaller than one {tile}x{tile} tile")
    tiles = []
    for r in range(H // tile):
        for c in range(W // tile):
            tiles.append(image[r * tile : (r + 1) * tile, c * tile : (c + 1) * tile].copy())
    return tiles


def load_image(path):
    """Decode to float32 RGB in [0, 1]; grayscale replicates, alpha drops."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)


def save_png(path, image):
    """Write a [0, 1] float image (2D grayscale or HxWx3) as 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_dataset(root, size=WORKING_SIZE):
    """Read the two class directories into (DatasetIndex, list of Samples).

    Files load in lexicographic order per class, cracked class first.
    Unreadable files are skipped with a warning and counted; an empty class
    is fatal.
    """
    rootp = Path(root)
    files = {}
    counts = {}
    skipped = 0
    samples = []
    for cls in sorted(CLASS_LABELS):  # "cracked" before "non-cracked"
        d = rootp / cls
        if not d.is_dir():
            raise ValueError(f"missing class directory {d}")
        names = sorted(p.name for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        loaded = []
        for name in names:
            try:
                img = load_image(d / name)
            except Exception as e:  # decode failure: skip, warn, count
                warnings.warn(f"skipping unreadable image {d / name}: {e}")
                skipped += 1
                continue
            if img.shape[:2] != (size, size):
                img = resize_bilinear(img, size, size)
            loaded.append(name)
            samples.append(Sample(img, CLASS_LABELS[cls], f"{cls}/{name}"))
        if not loaded:
            raise ValueError(f"class directory {d} has no readable images")
        files[cls] = loaded
        counts[cls] = len(loaded)
    return DatasetIndex(str(root), files, counts, skipped), samples


def _affine_warp(img, theta, ty, tx, zoom):
    """Inverse-map warp: rotate by theta about the center, then shift by
    (ty, tx), then zoom about the center. Bilinear sampling, out-of-frame
    coordinates clamp to the nearest edge."""
    if theta == 0.0 and ty == 0.0 and tx == 0.0 and zoom == 1.0:
        return img.copy()
    H, W = img.shape[:2]
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float32), np.arange(W, dtype=np.float32), indexing="ij")
    x = (xx - cx) / zoom - tx
    y = (yy - cy) / zoom - ty
    cos, sin = math.cos(theta), math.sin(theta)
    sx = cos * x + sin * y + cx
    sy = -sin * x + cos * y + cy
    np.clip(sx, 0, W - 1, out=sx)
    np.clip(sy, 0, H - 1, out=sy)
    x0 = sx.astype(np.int64)
    y0 = sy.astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (sx - x0)[:, :, None]
    fy = (sy - y0)[:, :, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def augment(sample: Sample, cfg: AugmentConfig, rng) -> Sample:
    """One randomized copy of a sample. Label and shape are preserved."""
    img = sample.image
    H, W = img.shape[:2]
    theta = math.radians(rng.uniform(-cfg.rot_max_deg, cfg.rot_max_deg))
    ty = rng.uniform(-cfg.shift_frac, cfg.shift_frac) * H
    tx = rng.uniform(-cfg.shift_frac, cfg.shift_frac) * W
    zoom = rng.uniform(1.0 - cfg.zoom_frac, 1.0 + cfg.zoom_frac)
    inten = rng.uniform(1.0 - cfg.intensity_frac, 1.0 + cfg.intensity_frac)
    uh = rng.random()
    uv = rng.random()
    out = _affine_warp(img, theta, ty, tx, zoom)
    if inten != 1.0:
        out = out * np.float32(inten)
    np.clip(out, 0.0, 1.0, out=out)
    if cfg.h_flip and uh < 0.5:
        out = out[:, ::-1]
    if cfg.v_flip and uv < 0.5:
        out = out[::-1]
    return Sample(np.ascontiguousarray(out, dtype=np.float32), sample.label, sample.source_id)


def split_train_val(samples, val_frac=0.1, seed=0):
    """Seeded stratified split; each class contributes about val_frac to
    validation (rounded, at least 1). Classes need >= 2 samples."""
    rng = np.random.default_rng(seed)
    by_label = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s)
    train, val = [], []
    for label in sorted(by_label):
        group = by_label[label]
        if len(group) < 2:
            raise ValueError(f"class {label} has {len(group)} sample(s), too small to stratify")
        n_val = max(1, int(len(group) * val_frac + 0.5))
        if n_val >= len(group):
            raise ValueError(f"class {label} too small for val_frac {val_frac}")
        order = rng.permutation(len(group))
        val.extend(group[i] for i in order[:n_val])
        train.extend(group[i] for i in order[n_val:])
    return train, val


# -- synthetic corpus -------------------------------------------------------


def _base_texture(rng, size):
    """Concrete-like plate: low-frequency blotches plus fine speckle."""
    lum = SYNTH_LUMINANCE + rng.uniform(-0.05, 0.05)
    coarse = (rng.standard_normal((9, 9)) * SYNTH_COARSE_AMP).astype(np.float32)
    coarse3 = np.repeat(coarse[:, :, None], 3, axis=2)
    blot = resize_bilinear(coarse3, size, size)
    speck = (rng.standard_normal((size, size, 1)) * SYNTH_SPECKLE_AMP).astype(np.float32)
    tint = rng.uniform(-0.012, 0.012, size=3).astype(np.float32)
    img = np.float32(lum) + blot + speck + tint
    return np.clip(img, 0.02, 0.98).astype(np.float32)


def _walk(rng, size, start, heading, max_steps):
    """Jittered straight-ish walk; returns visited (y, x) points."""
    pts = []
    y, x = start
    h = heading
    for _ in range(max_steps):
        if not (0 <= y < size and 0 <= x < size):
            break
        pts.append((y, x))
        h += rng.normal(0.0, 0.25)
        y += 2.0 * math.sin(h)
        x += 2.0 * math.cos(h)
    return pts


def _stamp_path(alpha, pts, width, depth):
    """Darkening alpha along a polyline: full depth inside the core width,
    feathered linearly to zero over SYNTH_CRACK_FEATHER px."""
    size = alpha.shape[0]
    r_out = width / 2.0 + SYNTH_CRACK_FEATHER
    R = int(math.ceil(r_out))
    for y, x in pts:
        yi, xi = int(round(y)), int(round(x))
        y0, y1 = max(0, yi - R), min(size, yi + R + 1)
        x0, x1 = max(0, xi - R), min(size, xi + R + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
        d = np.sqrt((yy - y) ** 2 + (xx - x) ** 2)
        fall = np.clip((r_out - d) / SYNTH_CRACK_FEATHER, 0.0, 1.0)
        patch = alpha[y0:y1, x0:x1]
        np.maximum(patch, depth * fall, out=patch)


def _overlay_crack(rng, img):
    """Multiplicative dark crack: random-walk polyline, random width and
    depth, optional branch. Mutates and returns img."""
    size = img.shape[0]
    width = rng.uniform(*SYNTH_CRACK_WIDTH)
    depth = rng.uniform(*SYNTH_CRACK_DEPTH)
    edge = rng.integers(4)
    pos = rng.uniform(0.1, 0.9) * size
    jit = rng.uniform(-0.4, 0.4)
    if edge == 0:  # top, heading down
        start, heading = (0.0, pos), math.pi / 2 + jit
    elif edge == 1:  # bottom, heading up
        start, heading = (size - 1.0, pos), -math.pi / 2 + jit
    elif edge == 2:  # left, heading right
        start, heading = (pos, 0.0), 0.0 + jit
    else:  # right, heading left
        start, heading = (pos, size - 1.0), math.pi + jit
    pts = _walk(rng, size, start, heading, max_steps=size)
    alpha = np.zeros((size, size), dtype=np.float32)
    _stamp_path(alpha, pts, width, depth)
    if rng.random() < SYNTH_BRANCH_PROB and len(pts) > 4:
        i = rng.integers(1, len(pts) - 1)
        side = 1.0 if rng.random() < 0.5 else -1.0
        bh = heading + side * rng.uniform(math.pi / 6, math.pi * 5 / 12)
        bpts = _walk(rng, size, pts[i], bh, max_steps=size // 2)
        _stamp_path(alpha, bpts, width * 0.8, depth)
    img *= 1.0 - alpha[:, :, None]
    return img


def synth_crack_corpus(n_per_class, seed, size=256):
    """Seed-deterministic synthetic corpus, cracked samples first.

    Each sample has its own derived stream, so the corpus content at index
    i never depends on n_per_class.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    samples = []
    for label, cls in ((1, "cracked"), (0, "non-cracked")):
        for i in range(n_per_class):
            r = derive_rng(seed, TAG_SYNTH, label, i)
            img = _base_texture(r, size)
            if label == 1:
                _overlay_crack(r, img)
            samples.append(Sample(img, label, f"synth/{cls}/{i:05d}"))
    return samples


def save_corpus(samples, root):
    """Write samples into the class-directory layout as PNG files."""
    rootp = Path(root)
    for cls in CLASS_LABELS:
        (rootp / cls).mkdir(parents=True, exist_ok=True)
    counters = {}
    for s in samples:
        cls = "cracked" if s.label == 1 else "non-cracked"
        i = counters.get(cls, 0)
        counters[cls] = i + 1
        save_png(rootp / cls / f"{cls}_{i:05d}.png", s.image)
    return counters
