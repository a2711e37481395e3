"""Dataset handling: on-disk corpus layout, train/val/test splits, PNG
decoding, augmentation, batching, and a synthetic two-class corpus.

A corpus is a directory whose immediate subdirectories are the classes;
class indices follow the sorted subdirectory names. Splits are drawn
per class with a seeded shuffle and cumulative cut points, so each class
lands within one image of the requested 7:2:1 proportions.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    BadConfig,
    DecodeError,
    EmptyClass,
    EmptySplit,
    NoClasses,
    ShapeMismatch,
    UnsupportedBitDepth,
)
from .tensor import Tensor, np_dtype

SPLITS = ("train", "val", "test")

_16BIT_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N"}


@dataclass
class DatasetManifest:
    """Split assignment for one corpus: class names plus, per split, a list
    of (class_index, relative_path) pairs."""

    root: str
    classes: list
    splits: dict = field(default_factory=dict)

    def counts(self):
        """{split: [count per class index]}"""
        out = {}
        for split in SPLITS:
            row = [0] * len(self.classes)
            for ci, _ in self.splits[split]:
                row[ci] += 1
            out[split] = row
        return out

    def to_tsv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for split in SPLITS:
                for ci, rel in self.splits[split]:
                    fh.write(f"{split}\t{ci}\t{rel}\n")


def build_manifest(root, seed=0, fractions=(0.7, 0.2, 0.1)):
    """Scan root's class subdirectories and assign every PNG to a split.

    Per class the sorted file list is shuffled with a generator seeded from
    ``seed``, then cut at floor(f_train * n) and floor((f_train + f_val) * n).
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) \
            or abs(sum(fractions) - 1.0) > 1e-9:
        raise BadConfig(f"fractions must be three non-negatives summing to 1, "
                        f"got {fractions}")
    if not os.path.isdir(root):
        raise NoClasses(f"{root} is not a directory")
    classes = sorted(e.name for e in os.scandir(root) if e.is_dir())
    if not classes:
        raise NoClasses(f"{root} has no class subdirectories")
    splits = {s: [] for s in SPLITS}
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for ci, cname in enumerate(classes):
        files = sorted(f for f in os.listdir(os.path.join(root, cname))
                       if f.lower().endswith(".png"))
        if not files:
            raise EmptyClass(f"class directory {cname!r} has no .png files")
        order = rng.permutation(len(files))
        shuffled = [files[i] for i in order]
        n = len(files)
        i1 = math.floor(fractions[0] * n)
        i2 = math.floor((fractions[0] + fractions[1]) * n)
        for rel in shuffled[:i1]:
            splits["train"].append((ci, os.path.join(cname, rel)))
        for rel in shuffled[i1:i2]:
            splits["val"].append((ci, os.path.join(cname, rel)))
        for rel in shuffled[i2:]:
            splits["test"].append((ci, os.path.join(cname, rel)))
    for split in SPLITS:
        if not splits[split]:
            raise EmptySplit(f"split {split!r} received no images; corpus "
                             f"is too small for fractions {fractions}")
    return DatasetManifest(root=root, classes=classes, splits=splits)


def decode_png(path):
    """Decode a PNG to a float32 [3, H, W] array scaled to [0, 1].

    Grayscale and palette images are expanded to RGB; an alpha channel is
    dropped. 16-bit images are refused rather than silently rescaled.
    """
    try:
        with Image.open(path) as img:
            if img.mode in _16BIT_MODES:
                raise UnsupportedBitDepth(
                    f"{path}: mode {img.mode} (16-bit) is not supported")
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: not a decodable image: {exc}")
    except OSError as exc:
        raise DecodeError(f"{path}: {exc}")
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


@dataclass
class AugmentPolicy:
    """Training-time augmentation switches; eval uses only resize+normalize."""

    target_hw: int = 224
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    def validate(self):
        if self.target_hw < 1:
            raise BadConfig(f"target_hw must be >= 1, got {self.target_hw}")
        if not 0.0 <= self.hflip_prob <= 1.0 or not 0.0 <= self.vflip_prob <= 1.0:
            raise BadConfig("flip probabilities must lie in [0, 1]")
        if self.max_rotation_deg < 0:
            raise BadConfig("max_rotation_deg must be >= 0")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise BadConfig("mean/std must have three channel entries")
        if any(s <= 0 for s in self.std):
            raise BadConfig("std entries must be positive")
        return self


def resize_bilinear(img, target):
    """Corner-aligned bilinear resize of a [C, H, W] array to target x target.

    Destination pixel t samples source coordinate t * (S - 1) / (T - 1);
    a single-pixel target samples the source center.
    """
    if img.ndim != 3:
        raise ShapeMismatch(f"resize expects [C, H, W], got {img.shape}")
    c, h, w = img.shape
    if img.shape[1:] == (target, target):
        return img.copy()

    def coords(s, t):
        if t == 1:
            return np.full(1, (s - 1) / 2.0)
        return np.arange(t) * ((s - 1) / (t - 1))

    ys = coords(h, target)
    xs = coords(w, target)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(img.dtype)[None, :, None]
    fx = (xs - x0).astype(img.dtype)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def rotate_bilinear(img, angle_deg):
    """Rotate a [C, H, W] array about its center by angle_deg degrees,
    sampling with the inverse map and bilinear weights; points that fall
    outside the source are filled with zero."""
    if img.ndim != 3:
        raise ShapeMismatch(f"rotate expects [C, H, W], got {img.shape}")
    c, h, w = img.shape
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = ii - cy, jj - cx
    sy = cos_t * dy + sin_t * dx + cy
    sx = -sin_t * dy + cos_t * dx + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0).astype(img.dtype)
    fx = (sx - x0).astype(img.dtype)

    def sample(iy, ix):
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        vals = img[:, np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]
        return vals * valid[None, :, :].astype(img.dtype)

    out = (sample(y0, x0) * (1 - fy) * (1 - fx)
           + sample(y0, x0 + 1) * (1 - fy) * fx
           + sample(y0 + 1, x0) * fy * (1 - fx)
           + sample(y0 + 1, x0 + 1) * fy * fx)
    return np.ascontiguousarray(out)


def normalize(img, mean, std):
    mean = np.asarray(mean, dtype=img.dtype)[:, None, None]
    std = np.asarray(std, dtype=img.dtype)[:, None, None]
    return (img - mean) / std


def augment(img, policy, rng=None, train=True):
    """Apply the pipeline to one [C, H, W] image in [0, 1].

    Train order: resize, horizontal flip, vertical flip, rotation, then
    normalize. One uniform is drawn per flip; the rotation angle is drawn
    only when max_rotation_deg > 0. Eval applies resize and normalize only.
    """
    out = resize_bilinear(img, policy.target_hw)
    if train:
        if rng is None:
            raise BadConfig("training-time augment requires an rng")
        if rng.random() < policy.hflip_prob:
            out = out[:, :, ::-1]
        if rng.random() < policy.vflip_prob:
            out = out[:, ::-1, :]
        if policy.max_rotation_deg > 0:
            angle = rng.uniform(-policy.max_rotation_deg,
                                policy.max_rotation_deg)
            out = rotate_bilinear(np.ascontiguousarray(out), angle)
    return normalize(np.ascontiguousarray(out), policy.mean, policy.std)


def iter_batches(manifest, split, batch_size, policy, rng=None, train=False,
                 dtype="single"):
    """Yield (images Tensor [B, 3, T, T], labels int64 [B]) over one epoch.

    Train mode shuffles the split with ``rng`` and runs the full
    augmentation pipeline; otherwise entries come in manifest order
    through resize+normalize. The final short batch is kept.
    """
    if batch_size < 1:
        raise BadConfig(f"batch_size must be >= 1, got {batch_size}")
    if split not in SPLITS:
        raise BadConfig(f"unknown split {split!r}")
    entries = manifest.splits[split]
    if not entries:
        raise EmptySplit(f"split {split!r} is empty")
    if train:
        if rng is None:
            raise BadConfig("train-mode batches require an rng")
        entries = [entries[i] for i in rng.permutation(len(entries))]
    nd = np_dtype(dtype)
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        imgs = np.empty((len(chunk), 3, policy.target_hw, policy.target_hw),
                        dtype=nd)
        labels = np.empty(len(chunk), dtype=np.int64)
        for i, (ci, rel) in enumerate(chunk):
            raw = decode_png(os.path.join(manifest.root, rel))
            imgs[i] = augment(raw, policy, rng=rng, train=train)
            labels[i] = ci
        yield Tensor.wrap(np.ascontiguousarray(imgs)), labels


def dataset_stats(manifest):
    """Per-split class counts plus per-channel mean/std over the raw train
    images (before augmentation), accumulated in float64 in manifest order."""
    counts = manifest.counts()
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    n_px = 0
    for _, rel in manifest.splits["train"]:
        img = decode_png(os.path.join(manifest.root, rel)).astype(np.float64)
        total += img.sum(axis=(1, 2))
        total_sq += (img * img).sum(axis=(1, 2))
        n_px += img.shape[1] * img.shape[2]
    mean = total / n_px
    var = total_sq / n_px - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))
    return {
        "classes": list(manifest.classes),
        "counts": counts,
        "train_mean": [float(v) for v in mean],
        "train_std": [float(v) for v in std],
    }


def make_synth_corpus(root, per_class=40, hw=50, seed=0):
    """Write a two-class synthetic corpus of hw x hw RGB PNGs.

    Class "blobs" holds smooth low-frequency fields (a 4x4 random grid
    upsampled bilinearly); class "stripes" holds high-frequency sinusoidal
    gratings at random orientation, frequency, and phase. Both get a touch
    of pixel noise. Output is deterministic in the seed.
    """
    if per_class < 1:
        raise BadConfig(f"per_class must be >= 1, got {per_class}")
    if hw < 8:
        raise BadConfig(f"hw must be >= 8, got {hw}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    grid = np.arange(hw, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    written = []
    for cname in ("blobs", "stripes"):
        os.makedirs(os.path.join(root, cname), exist_ok=True)
    for i in range(per_class):
        coarse = rng.uniform(0.0, 1.0, size=(3, 4, 4))
        img = resize_bilinear(coarse, hw)
        img = 0.15 + 0.7 * img
        img += rng.normal(0.0, 0.02, size=img.shape)
        written.append(_write_png(root, "blobs", f"blob_{i:03d}.png", img))
    for i in range(per_class):
        alpha = rng.uniform(0.0, math.pi)
        cycles = rng.uniform(8.0, 14.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        gain = rng.uniform(0.75, 1.0, size=3)
        wave = np.sin(2.0 * math.pi * cycles / hw
                      * (xx * math.cos(alpha) + yy * math.sin(alpha)) + phase)
        img = 0.5 + 0.35 * gain[:, None, None] * wave[None, :, :]
        img += rng.normal(0.0, 0.02, size=img.shape)
        written.append(_write_png(root, "stripes", f"stripe_{i:03d}.png", img))
    return written


def _write_png(root, cname, fname, img):
    arr = np.clip(img, 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    path = os.path.join(root, cname, fname)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)
    return os.path.join(cname, fname)
