"""Dataset ingestion, the class-balanced split protocol, preprocessing,
light augmentation, and a procedural synthetic corpus for desk-scale runs.

Corpora live on disk as ``root/<class_name>/<image>.ppm|pgm`` (binary or
ASCII netpbm, 8-bit). Pixels are float32 in [0, 1], channel-first;
grayscale images are replicated to 3 channels.

Every randomized operation is a pure function of its inputs and a seed:
per-class and per-image generator streams are derived from (seed, index),
so parallel and serial runs agree bit-exactly.
"""

from __future__ import annotations

import math
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (EmptyCorpus, EmptySplit, InsufficientClassSamples,
                     InvalidGeometry, UnreadableImage)

# synthetic ring geometry (fractions of min(h, w)) and per-image jitter
RING_INNER_FRAC = 0.075
RING_OUTER_FRAC = 0.234
CENTER_JITTER = 3
# coarse signatures survive jitter: half-integer radial cycles modulate the
# ring's mean brightness through the phase, angular cycles its orientation
_RADIAL_CYCLES = (0.5, 1.0, 1.5)
_ANGULAR_CYCLES = (0, 1, 2, 3, 4, 5, 6)
_GOLDEN_ANGLE = 2.399963229728653
_RING_BASE, _RING_AMP, _BACKGROUND = 0.55, 0.45, 0.05
_NOISE_SIGMA = 0.05

AUGMENT_OPS = ("horizontal_flip", "random_crop", "brightness")
CROP_PAD = 8
BRIGHTNESS_DELTA = 0.1


def derived_rng(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Independent generator stream for (seed, purpose, indices)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode())]
    entropy += [int(i) & 0xFFFFFFFFFFFFFFFF for i in indices]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def subseed(seed: int, purpose: str) -> int:
    """Scalar seed for APIs that take a plain integer (model build etc.)."""
    return int(derived_rng(seed, purpose).integers(0, 2 ** 63 - 1))


@dataclass
class LabeledImage:
    pixels: np.ndarray  # float32 [3,h,w] in [0,1]
    class_id: int
    source_path: str


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    class_count: int
    seed: int


# --- netpbm io ----------------------------------------------------------------

def _pnm_tokens(buf: bytes):
    """Yield header tokens, skipping '#' comments."""
    i = 0
    while i < len(buf):
        ch = buf[i:i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            while i < len(buf) and buf[i:i + 1] != b"\n":
                i += 1
        else:
            start = i
            while i < len(buf) and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
                i += 1
            yield start, buf[start:i]


def read_pnm(path) -> np.ndarray:
    """Decode a PGM/PPM file to float32 [c,h,w] in [0,1] (c is 1 or 3)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableImage(f"cannot read {path}: {exc}") from exc
    toks = _pnm_tokens(buf)
    try:
        _, magic = next(toks)
        if magic not in (b"P2", b"P3", b"P5", b"P6"):
            raise UnreadableImage(f"{path}: unsupported format {magic!r}")
        header = [next(toks) for _ in range(3)]
        w, h, maxval = (int(t) for _, t in header)
    except (StopIteration, ValueError):
        raise UnreadableImage(f"{path}: malformed netpbm header") from None
    if w < 1 or h < 1 or not (0 < maxval <= 255):
        raise UnreadableImage(f"{path}: bad dimensions or maxval ({w}x{h}, max {maxval})")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * channels
    if magic in (b"P5", b"P6"):
        data_start = header[-1][0] + len(header[-1][1]) + 1  # one whitespace byte
        raw = buf[data_start:data_start + count]
        if len(raw) < count:
            raise UnreadableImage(f"{path}: truncated pixel data")
        flat = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
    else:
        try:
            values = [int(t) for _, t in toks]
        except ValueError:
            raise UnreadableImage(f"{path}: non-integer ASCII pixel") from None
        if len(values) < count:
            raise UnreadableImage(f"{path}: truncated pixel data")
        flat = np.asarray(values[:count], dtype=np.float32)
    img = flat.reshape(h, w, channels).transpose(2, 0, 1)
    return (img / maxval).astype(np.float32)


def write_pgm(path, plane: np.ndarray) -> None:
    """Write a [h,w] array (float in [0,1] or uint8) as binary PGM."""
    if plane.dtype != np.uint8:
        plane = np.clip(np.rint(plane * 255.0), 0, 255).astype(np.uint8)
    h, w = plane.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + plane.tobytes())


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write a [3,h,w] array (float in [0,1] or uint8) as binary PPM."""
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    _, h, w = pixels.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.transpose(1, 2, 0).tobytes())


# --- corpus loading -----------------------------------------------------------

def load_corpus(root, skip_unreadable: bool = False):
    """Load a directory-per-class corpus.

    Class ids follow sorted directory names; images sort by filename within
    each class. Returns (images, class_names). Unreadable files raise
    unless ``skip_unreadable``, in which case they are reported to stderr
    and dropped.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyCorpus(f"data root {root} is not a directory")
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not class_dirs:
        raise EmptyCorpus(f"no class directories under {root}")
    images, class_names = [], []
    for class_id, cdir in enumerate(class_dirs):
        class_names.append(cdir.name)
        files = sorted(p for p in cdir.iterdir()
                       if p.is_file() and p.suffix.lower() in (".ppm", ".pgm"))
        loaded = 0
        for p in files:
            try:
                img = read_pnm(p)
            except UnreadableImage as exc:
                if not skip_unreadable:
                    raise
                print(f"skipping unreadable image: {exc}", file=sys.stderr)
                continue
            if img.shape[0] == 1:
                img = np.repeat(img, 3, axis=0)
            images.append(LabeledImage(img, class_id, str(p)))
            loaded += 1
        if loaded == 0:
            raise EmptyCorpus(f"class directory {cdir} has no readable images")
    return images, class_names


# --- split protocol -----------------------------------------------------------

def make_split(images, k_test: int = 4, val_fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """Per class: k_test images sampled to test, then ceil(val_fraction *
    remainder) to val (at least 1 when possible, never the whole
    remainder), the rest to train. Deterministic per seed."""
    by_class = {}
    for im in images:
        by_class.setdefault(im.class_id, []).append(im)
    class_ids = sorted(by_class)
    if not class_ids or class_ids != list(range(len(class_ids))):
        raise EmptyCorpus(f"class ids must be dense 0..C-1, got {class_ids[:8]}...")
    train, val, test = [], [], []
    for cid in class_ids:
        members = sorted(by_class[cid], key=lambda im: im.source_path)
        if len(members) <= k_test:
            raise InsufficientClassSamples(
                f"class {cid} has {len(members)} images, needs more than k_test={k_test}")
        rng = derived_rng(seed, "split", cid)
        perm = rng.permutation(len(members))
        test += [members[i] for i in perm[:k_test]]
        rest = [members[i] for i in perm[k_test:]]
        n_val = min(max(1, math.ceil(val_fraction * len(rest))), len(rest) - 1)
        val += rest[:n_val]
        train += rest[n_val:]
    return DatasetSplit(train, val, test, len(class_ids), seed)


def export_manifest(split: DatasetSplit, path) -> None:
    """Write ``source_path,class_id,partition`` rows for exact split reuse."""
    lines = ["source_path,class_id,partition"]
    for part, items in (("train", split.train), ("val", split.val), ("test", split.test)):
        lines += [f"{im.source_path},{im.class_id},{part}" for im in items]
    Path(path).write_text("\n".join(lines) + "\n")


def split_from_manifest(images, path, seed: int = 0) -> DatasetSplit:
    """Rebuild a split from a manifest over an already-loaded corpus."""
    assignment = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines()):
        if lineno == 0 and line.strip() == "source_path,class_id,partition":
            continue
        if not line.strip():
            continue
        src, cid, part = line.rsplit(",", 2)
        assignment[src] = (int(cid), part)
    parts = {"train": [], "val": [], "test": []}
    class_ids = set()
    for im in images:
        entry = assignment.get(im.source_path)
        if entry is None:
            continue
        cid, part = entry
        if cid != im.class_id:
            raise EmptySplit(f"manifest class {cid} != corpus class {im.class_id} for {im.source_path}")
        if part not in parts:
            raise EmptySplit(f"manifest has unknown partition {part!r}")
        parts[part].append(im)
        class_ids.add(cid)
    if not parts["train"] or not parts["test"]:
        raise EmptySplit(f"manifest {path} matched no usable train/test images")
    return DatasetSplit(parts["train"], parts["val"], parts["test"], max(class_ids) + 1, seed)


def channel_stats(images):
    """Per-channel mean/std over a list of images (for input standardization)."""
    if not images:
        raise EmptySplit("channel_stats needs a non-empty set")
    stacked = np.stack([im.pixels for im in images]).astype(np.float64)
    mean = stacked.mean(axis=(0, 2, 3))
    std = np.maximum(stacked.std(axis=(0, 2, 3)), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


# --- preprocessing ------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-center alignment.

    Interpolates in float64 with nested lerps, so constant images stay
    bit-exactly constant and outputs never leave the input range.
    """
    if img.ndim != 3:
        raise InvalidGeometry(f"expected [c,h,w], got shape {img.shape}")
    c, h, w = img.shape
    if h < 2 or w < 2 or out_h < 1 or out_w < 1:
        raise InvalidGeometry(f"cannot resize {h}x{w} -> {out_h}x{out_w}")
    src = img.astype(np.float64)

    def axis_coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    v00 = src[:, y0[:, None], x0[None, :]]
    v01 = src[:, y0[:, None], x1[None, :]]
    v10 = src[:, y1[:, None], x0[None, :]]
    v11 = src[:, y1[:, None], x1[None, :]]
    top = v00 + fx[None, None, :] * (v01 - v00)
    bot = v10 + fx[None, None, :] * (v11 - v10)
    out = top + fy[None, :, None] * (bot - top)
    return out.astype(img.dtype)


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, :, ::-1].copy()


def augment(img: LabeledImage, policy, rng: np.random.Generator) -> LabeledImage:
    """Label-preserving augmentation; pixels are clamped to [0,1].

    ``policy`` is a subset of AUGMENT_OPS, applied in that canonical order.
    Deterministic given the generator state.
    """
    unknown = set(policy) - set(AUGMENT_OPS)
    if unknown:
        raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")
    px = img.pixels
    if "horizontal_flip" in policy and rng.random() < 0.5:
        px = hflip(px)
    if "random_crop" in policy:
        _, h, w = px.shape
        padded = np.pad(px, ((0, 0), (CROP_PAD, CROP_PAD), (CROP_PAD, CROP_PAD)))
        top = int(rng.integers(0, 2 * CROP_PAD + 1))
        left = int(rng.integers(0, 2 * CROP_PAD + 1))
        px = padded[:, top:top + h, left:left + w]
    if "brightness" in policy:
        delta = np.float32(rng.uniform(-BRIGHTNESS_DELTA, BRIGHTNESS_DELTA))
        px = px + delta
    px = np.clip(px, 0.0, 1.0).astype(np.float32)
    return LabeledImage(px, img.class_id, img.source_path)


# --- synthetic corpus -----------------------------------------------------------

def ring_radii(h: int, w: int):
    m = min(h, w)
    return RING_INNER_FRAC * m, RING_OUTER_FRAC * m


def ring_mask(h: int, w: int, dilate: float = 0.0) -> np.ndarray:
    """Boolean mask of the nominal annulus, optionally dilated (e.g. by the
    jitter amplitude) to cover every possible placement."""
    r_in, r_out = ring_radii(h, w)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - cy, xx - cx)
    return (r >= max(r_in - dilate, 0.0)) & (r <= r_out + dilate)


def _class_signature(class_id: int, global_phase: float):
    combo = class_id % (len(_RADIAL_CYCLES) * len(_ANGULAR_CYCLES))
    f_r = _RADIAL_CYCLES[combo % len(_RADIAL_CYCLES)]
    k_a = _ANGULAR_CYCLES[combo // len(_RADIAL_CYCLES)]
    phase = (global_phase + class_id * _GOLDEN_ANGLE) % (2 * math.pi)
    return f_r, k_a, phase


def synth_corpus(classes: int, per_class: int, h: int, w: int, seed: int):
    """Procedural iris-like corpus: each class is a textured annulus with a
    fixed (radial frequency, angular frequency, phase) signature; images add
    gaussian noise (sigma 0.05, confined to the ring) and integer center
    jitter (+-3 px). Texture is 2x2 supersampled to tame pixel aliasing.
    Deterministic per seed; classes are pairwise distinguishable."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class < 6:
        raise ValueError(f"need per_class >= 6 (test hold-out plus train/val), got {per_class}")
    r_in, r_out = ring_radii(h, w)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    global_phase = float(derived_rng(seed, "synth.phase").uniform(0.0, 2 * math.pi))
    images = []
    for cid in range(classes):
        f_r, k_a, phase = _class_signature(cid, global_phase)
        for idx in range(per_class):
            rng = derived_rng(seed, "synth.image", cid, idx)
            dy, dx = (int(v) for v in rng.integers(-CENTER_JITTER, CENTER_JITTER + 1, size=2))
            field = np.zeros((h, w))
            cover = np.zeros((h, w))
            for oy in (-0.25, 0.25):
                for ox in (-0.25, 0.25):
                    r = np.hypot(yy + oy - (cy + dy), xx + ox - (cx + dx))
                    theta = np.arctan2(yy + oy - (cy + dy), xx + ox - (cx + dx))
                    radial = 2 * math.pi * f_r * (r - r_in) / (r_out - r_in)
                    tex = _RING_BASE + _RING_AMP * np.sin(radial + k_a * theta + phase)
                    ring = (r >= r_in) & (r <= r_out)
                    field += np.where(ring, tex, _BACKGROUND)
                    cover += ring
            plane = field / 4.0 + (cover / 4.0) * rng.normal(0.0, _NOISE_SIGMA, size=(h, w))
            plane = np.clip(plane, 0.0, 1.0).astype(np.float32)
            images.append(LabeledImage(
                np.repeat(plane[None], 3, axis=0),
                cid,
                f"synth/{seed}/c{cid:03d}/i{idx:03d}",
            ))
    return images
