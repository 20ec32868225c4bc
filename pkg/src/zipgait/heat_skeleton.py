"""Render COCO-17 keypoints as two-channel (joint, limb) Gaussian heatmaps.

A frame is an ``(17, 3)`` array of ``(x, y, confidence)`` rows, with ``x``
the column and ``y`` the row in pixel units.  Joints with confidence 0 are
treated as missing.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DegenerateSkeleton, InvalidParameter, ShapeError

NUM_JOINTS = 17
CANVAS = (64, 44)
DEFAULT_SIGMA = 2.0
HEIGHT_FILL = 0.9

LEFT_HIP, RIGHT_HIP = 11, 12
# COCO left/right joint pairs, used to build mirrored skeletons.
FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))


def check_frame(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (NUM_JOINTS, 3):
        raise ShapeError(f"expected a ({NUM_JOINTS}, 3) keypoint frame, got {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise InvalidParameter("keypoint coordinates must be finite")
    conf = frame[:, 2]
    if np.any(conf < 0) or np.any(conf > 1):
        raise InvalidParameter("confidences must lie in [0, 1]")
    return frame


def check_limbs(edges) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if np.any(edges < 0) or np.any(edges >= NUM_JOINTS):
        raise InvalidParameter("limb endpoints must be joint indices in [0, 17)")
    if np.any(edges[:, 0] == edges[:, 1]):
        raise InvalidParameter("limb table contains a self-loop")
    keys = {tuple(sorted(e)) for e in edges.tolist()}
    if len(keys) != len(edges):
        raise InvalidParameter("limb table contains duplicate edges")
    return edges


def load_limbs(path: str | Path | None = None) -> np.ndarray:
    """Load a limb table; with no path, the bundled 19-edge COCO skeleton."""
    if path is None:
        text = resources.files("zipgait.configs").joinpath("coco_limbs.json").read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    edges = doc["edges"] if isinstance(doc, dict) else doc
    return check_limbs(edges)


def _check_sigma(sigma: float) -> None:
    if not sigma > 0:
        raise InvalidParameter(f"sigma must be positive, got {sigma}")


def normalization_transform(frame, canvas=CANVAS) -> tuple[float, float, float]:
    """Return ``(scale, x_center, y_mid)`` of the canvas alignment for ``frame``.

    Exposed separately so silhouettes can be rasterized in the same frame of
    reference as the heatmaps (see :func:`apply_normalization`).
    """
    frame = check_frame(frame)
    h, _ = canvas
    vis = frame[:, 2] > 0
    if vis.sum() < 2:
        raise DegenerateSkeleton(f"need at least 2 visible joints, got {int(vis.sum())}")
    ys = frame[vis, 1]
    extent = ys.max() - ys.min()
    if extent <= 1e-9:
        raise DegenerateSkeleton("visible joints have zero vertical extent")
    scale = HEIGHT_FILL * h / extent
    hips = [j for j in (LEFT_HIP, RIGHT_HIP) if frame[j, 2] > 0]
    x_center = frame[hips, 0].mean() if hips else frame[vis, 0].mean()
    return float(scale), float(x_center), float(0.5 * (ys.max() + ys.min()))


def apply_normalization(points, transform, canvas=CANVAS) -> np.ndarray:
    """Map ``(..., 2)`` raw ``(x, y)`` points into canvas pixels (no clipping)."""
    h, w = canvas
    scale, x_center, y_mid = transform
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = (pts[..., 0] - x_center) * scale + (w - 1) / 2.0
    out[..., 1] = (pts[..., 1] - y_mid) * scale + (h - 1) / 2.0
    return out


def normalize_frame(frame, canvas=CANVAS) -> np.ndarray:
    """Center on the hip midpoint and scale the visible vertical extent to 90% of the canvas height."""
    frame = check_frame(frame)
    h, w = canvas
    out = frame.copy()
    out[:, :2] = apply_normalization(frame[:, :2], normalization_transform(frame, canvas), canvas)
    out[:, 0] = np.clip(out[:, 0], 0.0, w - 1.0)
    out[:, 1] = np.clip(out[:, 1], 0.0, h - 1.0)
    return out


def _pixel_grid(canvas):
    h, w = canvas
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return cols, rows


def render_joint_map(frame, sigma: float = DEFAULT_SIGMA, canvas=CANVAS) -> np.ndarray:
    _check_sigma(sigma)
    frame = check_frame(frame)
    xs, ys = _pixel_grid(canvas)
    out = np.zeros(canvas, dtype=np.float64)
    for x, y, c in frame:
        if c <= 0:
            continue
        g = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma**2)) * c
        np.maximum(out, g, out=out)
    return out


def segment_distance(px, py, ax, ay, bx, by):
    """Euclidean distance from points ``(px, py)`` to the segment ``[a, b]``."""
    dx, dy = bx - ax, by - ay
    length2 = dx * dx + dy * dy
    if length2 <= 0.0:
        return np.hypot(px - ax, py - ay)
    u = np.clip(((px - ax) * dx + (py - ay) * dy) / length2, 0.0, 1.0)
    return np.hypot(px - (ax + u * dx), py - (ay + u * dy))


def render_limb_map(frame, limbs, sigma: float = DEFAULT_SIGMA, canvas=CANVAS) -> np.ndarray:
    _check_sigma(sigma)
    frame = check_frame(frame)
    limbs = check_limbs(limbs)
    xs, ys = _pixel_grid(canvas)
    out = np.zeros(canvas, dtype=np.float64)
    for a, b in limbs:
        ca, cb = frame[a, 2], frame[b, 2]
        if ca <= 0 or cb <= 0:
            continue
        d = segment_distance(xs, ys, frame[a, 0], frame[a, 1], frame[b, 0], frame[b, 1])
        np.maximum(out, np.exp(-(d**2) / (2.0 * sigma**2)) * min(ca, cb), out=out)
    return out


def make_heat_skeleton(frame, limbs=None, sigma: float = DEFAULT_SIGMA, canvas=CANVAS) -> np.ndarray:
    """Normalize a raw frame and stack its joint and limb maps into a ``(2, h, w)`` float32 array."""
    limbs = load_limbs() if limbs is None else limbs
    norm = normalize_frame(frame, canvas)
    heat = np.stack([render_joint_map(norm, sigma, canvas), render_limb_map(norm, limbs, sigma, canvas)])
    return heat.astype(np.float32)


def make_heat_sequence(frames, limbs=None, sigma: float = DEFAULT_SIGMA, canvas=CANVAS) -> np.ndarray:
    limbs = load_limbs() if limbs is None else limbs
    return np.stack([make_heat_skeleton(f, limbs, sigma, canvas) for f in frames])


def mirror_frame(frame, swap_sides: bool = False) -> np.ndarray:
    """Reflect x coordinates about the origin; optionally relabel left/right joints."""
    out = check_frame(frame).copy()
    out[:, 0] = -out[:, 0]
    if swap_sides:
        for i, j in FLIP_PAIRS:
            out[[i, j]] = out[[j, i]]
    return out
