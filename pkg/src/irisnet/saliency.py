"""Occlusion-sweep saliency: slide a zeroed square window over the image,
re-run prediction per placement, and record which placements flip the
label and how much the true-class confidence drops.

The window never extends past the image; the sweep grid has
floor((dim - N) / S) + 1 cells per axis. Occlusion fills raw pixels (the
[0,1] space) before any preprocessing, since the model normalizes inputs
internally. Binary flip flags and the continuous confidence-drop grid are
both kept: flips are the headline signal but degenerate when the model is
robust.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import InvalidGeometry, IoFailure, WindowOutOfBounds
from .model import Model
from .nn import softmax
from .data import write_pgm


@dataclass
class OcclusionConfig:
    window: int = 32
    stride: int = 16
    fill_value: float = 0.0  # raw pixel space, applied before normalization


@dataclass
class SaliencyMap:
    grid_h: int
    grid_w: int
    flip: np.ndarray              # bool [grid_h, grid_w]
    confidence_drop: np.ndarray   # float32 [grid_h, grid_w], in [-1, 1]
    base_prediction: int
    base_confidence: float
    cfg: "OcclusionConfig" = None  # the sweep geometry that produced the map


def grid_shape(h: int, w: int, cfg: OcclusionConfig):
    if cfg.window < 1 or cfg.stride < 1:
        raise InvalidGeometry(f"window and stride must be >= 1, got {cfg.window}, {cfg.stride}")
    if cfg.window > min(h, w):
        raise InvalidGeometry(f"window {cfg.window} exceeds image {h}x{w}")
    return (h - cfg.window) // cfg.stride + 1, (w - cfg.window) // cfg.stride + 1


def occlude(img: np.ndarray, top: int, left: int, cfg: OcclusionConfig) -> np.ndarray:
    """Copy of the image with an NxN square filled on all channels."""
    _, h, w = img.shape
    n = cfg.window
    if top < 0 or left < 0 or top + n > h or left + n > w:
        raise WindowOutOfBounds(f"window {n} at ({top},{left}) leaves the {h}x{w} image")
    out = img.copy()
    out[:, top:top + n, left:left + n] = np.float32(cfg.fill_value)
    return out


def _probs(model: Model, batch: np.ndarray) -> np.ndarray:
    with no_grad():
        return softmax(model.forward(Tensor(batch), training=False)).data


def sweep(model: Model, img: np.ndarray, true_class: int, cfg: OcclusionConfig,
          preprocess=None, batch_size: int = 64) -> SaliencyMap:
    """Occlude every grid placement and compare against the unoccluded
    prediction. The input image is never mutated; placements are
    independent, so they are evaluated in batches."""
    _, h, w = img.shape
    gh, gw = grid_shape(h, w, cfg)
    prep = preprocess if preprocess is not None else lambda p: p

    base = _probs(model, prep(img)[None])[0]
    base_pred = int(np.argmax(base))
    base_conf = float(base[true_class])

    offsets = [(r * cfg.stride, c * cfg.stride) for r in range(gh) for c in range(gw)]
    flip = np.zeros((gh, gw), dtype=bool)
    drop = np.zeros((gh, gw), dtype=np.float32)
    for lo in range(0, len(offsets), batch_size):
        chunk = offsets[lo:lo + batch_size]
        batch = np.stack([prep(occlude(img, t, l, cfg)) for t, l in chunk])
        probs = _probs(model, batch)
        for (t, l), p in zip(chunk, probs):
            r, c = t // cfg.stride, l // cfg.stride
            flip[r, c] = int(np.argmax(p)) != true_class
            drop[r, c] = np.float32(base_conf) - p[true_class]
    return SaliencyMap(gh, gw, flip, drop, base_pred, base_conf, cfg)


def _csv_grid(values, fmt) -> str:
    return "\r\n".join(",".join(fmt(v) for v in row) for row in values) + "\r\n"


def overlay_image(smap: SaliencyMap, img_h: int, img_w: int) -> np.ndarray:
    """Upsample the drop grid to image size: a pixel covered by k windows
    gets the mean of their drops, mapped so drop +1 is black (0) and
    drop -1 is white (255); uncovered pixels sit at the neutral 128."""
    cfg = smap.cfg
    acc = np.zeros((img_h, img_w), dtype=np.float64)
    cnt = np.zeros((img_h, img_w), dtype=np.int64)
    n = cfg.window
    for r in range(smap.grid_h):
        for c in range(smap.grid_w):
            t, l = r * cfg.stride, c * cfg.stride
            acc[t:t + n, l:l + n] += smap.confidence_drop[r, c]
            cnt[t:t + n, l:l + n] += 1
    mean = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    return np.clip(np.floor(127.5 * (1.0 - mean) + 0.5), 0, 255).astype(np.uint8)


def export_map(smap: SaliencyMap, img: np.ndarray, out_dir) -> list:
    """Write confidence_drop.csv, flips.csv and overlay.pgm into out_dir
    (CSV: no header, 6 significant digits). Returns the written paths."""
    out_dir = Path(out_dir)
    _, h, w = img.shape
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        drop_path = out_dir / "confidence_drop.csv"
        drop_path.write_text(_csv_grid(smap.confidence_drop, lambda v: f"{float(v):.6g}"))
        flip_path = out_dir / "flips.csv"
        flip_path.write_text(_csv_grid(smap.flip, lambda v: str(int(v))))
        overlay_path = out_dir / "overlay.pgm"
        write_pgm(overlay_path, overlay_image(smap, h, w))
    except OSError as exc:
        raise IoFailure(f"cannot write saliency outputs under {out_dir}: {exc}") from exc
    return [drop_path, flip_path, overlay_path]
