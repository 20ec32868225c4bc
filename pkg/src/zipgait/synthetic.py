"""Procedural 2-D walkers: paired COCO-17 skeletons and binary silhouettes.

Each identity is a :class:`FigureSpec` drawn from a seed.  Skeletons are
produced in a raw 256-pixel-tall image space; silhouettes are rasterized
directly on the 64x44 canvas using the same alignment the heatmaps use, so
the two modalities are pixel-aligned.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .heat_skeleton import CANVAS, NUM_JOINTS, apply_normalization, normalization_transform, segment_distance

# Order of the bone-length vector.
BONES = ("head", "torso", "upper_arm", "forearm", "thigh", "shin", "shoulder_offset", "hip_offset")
BASE_LENGTHS = np.array([22.0, 62.0, 34.0, 30.0, 50.0, 48.0, 6.0, 4.0])
PERIOD_RANGE = (16, 30)

# (joint a, joint b, radius multiplier) for the silhouette capsules.
_CAPSULES = (
    (5, 7, 0.8), (7, 9, 0.7), (6, 8, 0.8), (8, 10, 0.7),
    (11, 13, 1.0), (13, 15, 0.85), (12, 14, 1.0), (14, 16, 0.85),
    (5, 11, 1.0), (6, 12, 1.0),
)


@dataclass(frozen=True, eq=False)
class FigureSpec:
    limb_lengths: np.ndarray = field(repr=False)
    gait_frequency: float
    stride_amplitude: float
    limb_thickness: float
    torso_width: float
    arm_swing: float
    knee_flex: float
    seed: int

    def __post_init__(self):
        if np.any(self.limb_lengths <= 0):
            raise ValueError("limb lengths must be positive")
        if not 0 < self.gait_frequency < 0.5:
            raise ValueError("gait frequency must lie in (0, 0.5)")

    def __eq__(self, other):
        if not isinstance(other, FigureSpec):
            return NotImplemented
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    __hash__ = object.__hash__

    @property
    def period(self) -> int:
        return int(round(1.0 / self.gait_frequency))


def _fits_canvas(spec: FigureSpec, canvas=CANVAS, margin: float = 1.0) -> bool:
    """True if every joint stays ``margin`` pixels inside the canvas over a full cycle."""
    _, w = canvas
    for k in range(spec.period):
        frame = pose_at(spec, 2 * np.pi * k / spec.period)
        x = apply_normalization(frame[:, :2], normalization_transform(frame, canvas), canvas)[:, 0]
        if x.min() < margin or x.max() > w - 1 - margin:
            return False
    return True


def generate_identity(seed: int) -> FigureSpec:
    rng = np.random.default_rng([seed, 0x6A17])
    lengths = BASE_LENGTHS * rng.uniform(0.8, 1.2, size=len(BASE_LENGTHS))
    period = int(rng.integers(PERIOD_RANGE[0], PERIOD_RANGE[1] + 1))
    spec = FigureSpec(
        limb_lengths=lengths,
        gait_frequency=1.0 / period,
        stride_amplitude=float(rng.uniform(0.25, 0.55)),
        limb_thickness=float(rng.uniform(1.3, 2.4)),
        torso_width=float(rng.uniform(1.6, 2.6)),
        arm_swing=float(rng.uniform(0.3, 0.9)),
        knee_flex=float(rng.uniform(0.3, 0.9)),
        seed=int(seed),
    )
    # long strides on long legs can swing a foot off the narrow canvas
    while not _fits_canvas(spec):
        spec = replace(spec, stride_amplitude=spec.stride_amplitude * 0.95)
    return spec


def pose_at(spec: FigureSpec, phase: float) -> np.ndarray:
    """Raw ``(17, 3)`` keypoints for one gait phase, facing +x with y pointing down."""
    head, torso, upper, fore, thigh, shin, sho_off, hip_off = spec.limb_lengths
    amp = spec.stride_amplitude
    j = np.zeros((NUM_JOINTS, 3))
    j[:, 2] = 1.0

    hip = np.array([88.0, 150.0 - 0.04 * thigh * np.cos(2 * phase)])
    neck = hip + np.array([0.06 * torso, -torso])

    def limb(start, angle, length):
        return start + length * np.array([np.sin(angle), np.cos(angle)])

    for side, (h_i, k_i, a_i, s_i, e_i, w_i) in enumerate(((11, 13, 15, 5, 7, 9), (12, 14, 16, 6, 8, 10))):
        ph = phase + np.pi * side
        sign = 1.0 if side == 0 else -1.0
        hip_j = hip + np.array([sign * hip_off, 0.0])
        thigh_ang = amp * np.sin(ph)
        flex = spec.knee_flex * 0.5 * (1.0 + np.sin(ph + np.pi / 2))
        knee = limb(hip_j, thigh_ang, thigh)
        ankle = limb(knee, thigh_ang - flex, shin)
        sho = neck + np.array([sign * sho_off, 0.0])
        arm_ang = -spec.arm_swing * amp * np.sin(ph)
        elbow = limb(sho, arm_ang, upper)
        wrist = limb(elbow, arm_ang + 0.25 + 0.2 * np.sin(ph) ** 2, fore)
        for idx, p in ((h_i, hip_j), (k_i, knee), (a_i, ankle), (s_i, sho), (e_i, elbow), (w_i, wrist)):
            j[idx, :2] = p

    nose = neck + np.array([0.35 * head, -0.8 * head])
    j[0, :2] = nose
    j[1, :2] = nose + np.array([-0.12 * head, -0.18 * head])
    j[2, :2] = nose + np.array([-0.18 * head, -0.16 * head])
    j[3, :2] = nose + np.array([-0.55 * head, -0.05 * head])
    j[4, :2] = nose + np.array([-0.62 * head, -0.02 * head])
    return j


def rasterize(frame, spec: FigureSpec, canvas=CANVAS) -> np.ndarray:
    """Binary silhouette of capsules along the limbs plus a head disc, on the aligned canvas."""
    h, w = canvas
    pts = apply_normalization(frame[:, :2], normalization_transform(frame, canvas), canvas)
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    r = spec.limb_thickness
    mask = np.zeros(canvas, dtype=bool)
    for a, b, mult in _CAPSULES:
        d = segment_distance(cols, rows, pts[a, 0], pts[a, 1], pts[b, 0], pts[b, 1])
        mask |= d <= max(r * mult, 1.0)
    sho_mid, hip_mid = pts[[5, 6]].mean(axis=0), pts[[11, 12]].mean(axis=0)
    mask |= segment_distance(cols, rows, *sho_mid, *hip_mid) <= r * spec.torso_width
    neck = sho_mid
    mask |= segment_distance(cols, rows, *neck, *pts[0]) <= 0.8 * r
    head_pts = pts[:5]
    center = head_pts.mean(axis=0)
    radius = np.max(np.hypot(*(head_pts - center).T)) + 1.0
    mask |= np.hypot(cols - center[0], rows - center[1]) <= radius
    return mask


def render_sequence(spec: FigureSpec, n_frames: int, phase: float = 0.0, jitter: float = 0.0,
                    conf_noise: float = 0.0, mask_prob: float = 0.0, seed: int = 0,
                    canvas=CANVAS) -> tuple[np.ndarray, np.ndarray]:
    """Return raw skeletons ``(n, 17, 3)`` and float32 silhouettes ``(n, 1, h, w)`` in {0, 1}.

    ``jitter`` (raw pixels), ``conf_noise`` and ``mask_prob`` are optional
    augmentations drawn from ``seed``; all default to off.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    rng = np.random.default_rng([spec.seed, seed, 0x5E9])
    skel = np.empty((n_frames, NUM_JOINTS, 3))
    sil = np.zeros((n_frames, 1) + tuple(canvas), dtype=np.float32)
    for i in range(n_frames):
        frame = pose_at(spec, 2 * np.pi * spec.gait_frequency * i + phase)
        if jitter > 0:
            frame[:, :2] += rng.normal(0.0, jitter, size=(NUM_JOINTS, 2))
        mask = rasterize(frame, spec, canvas)
        if mask_prob > 0 and rng.random() < mask_prob:
            h, w = canvas
            y0, x0 = rng.integers(0, h - 8), rng.integers(0, w - 8)
            mask[y0:y0 + int(rng.integers(4, 12)), x0:x0 + int(rng.integers(4, 12))] = False
        if conf_noise > 0:
            frame[:, 2] = np.clip(1.0 - np.abs(rng.normal(0.0, conf_noise, NUM_JOINTS)), 0.05, 1.0)
        skel[i] = frame
        sil[i, 0] = mask
    return skel, sil
