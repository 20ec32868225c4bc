"""Independent reference implementations used as test oracles.

These are deliberately naive (explicit loops, dense sampling, sort-based
ranking) and share no code paths with the package beyond input types.
"""

import itertools
import math

import numpy as np

from zipgait.heat_skeleton import normalize_frame
from zipgait.synthetic import generate_identity, pose_at


def joint_map_bruteforce(frame, sigma, canvas):
    h, w = canvas
    out = np.zeros((h, w))
    for row in range(h):
        for col in range(w):
            best = 0.0
            for x, y, c in frame:
                if c <= 0:
                    continue
                v = math.exp(-((col - x) ** 2 + (row - y) ** 2) / (2 * sigma * sigma)) * c
                best = max(best, v)
            out[row, col] = best
    return out


def limb_map_dense(frame, limbs, sigma, canvas, samples=1000):
    """Distance to each limb approximated by the nearest of ``samples`` evenly spaced points."""
    h, w = canvas
    rows, cols = np.mgrid[0:h, 0:w]
    pix = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)
    pix_sq = (pix**2).sum(1)
    out = np.zeros(h * w)
    u = np.linspace(0.0, 1.0, samples)
    for a, b in limbs:
        ca, cb = frame[a, 2], frame[b, 2]
        if ca <= 0 or cb <= 0:
            continue
        pts = frame[a, :2][None] * (1 - u[:, None]) + frame[b, :2][None] * u[:, None]
        # |p - q|^2 = |p|^2 - 2 p.q + |q|^2; |p|^2 is constant per pixel so it joins after the min
        cross = (-2.0 * pix) @ pts.T
        cross += (pts**2).sum(1)[None]
        d2 = np.maximum(cross.min(axis=1) + pix_sq, 0.0)
        out = np.maximum(out, np.exp(-d2 / (2 * sigma * sigma)) * min(ca, cb))
    return out.reshape(h, w)


def random_normalized_skeletons(n, seed, canvas=(64, 44)):
    """Human-like random frames: random identities and phases, jittered joints,
    random confidences with some joints dropped, then canvas-normalized."""
    rng = np.random.default_rng(seed)
    frames = []
    while len(frames) < n:
        spec = generate_identity(int(rng.integers(0, 10_000)))
        frame = pose_at(spec, rng.uniform(0, 2 * np.pi))
        frame[:, :2] += rng.normal(0, 3.0, size=(17, 2))
        frame[:, 2] = rng.uniform(0.05, 1.0, size=17)
        frame[rng.random(17) < 0.1, 2] = 0.0
        if (frame[:, 2] > 0).sum() < 2:
            continue
        frames.append(normalize_frame(frame, canvas))
    return frames


def cosine_alpha_bar_terminal(T, s=0.008, beta_max=0.999):
    """alpha_bar at t = T-1 from the closed form: the last beta is clipped to ``beta_max``."""
    def f(u):
        return math.cos((u + s) / (1 + s) * math.pi / 2) ** 2

    return f((T - 1) / T) / f(0.0) * (1.0 - beta_max)


def retrieval_bruteforce(dist, probe_labels, probe_seqs, gallery_labels, gallery_seqs):
    """Rank-1/5, mAP, mINP via explicit sorting of (distance, index) tuples."""
    r1, r5, aps, inps, excluded = [], [], [], [], 0
    for i in range(len(probe_labels)):
        ranked = sorted(
            (dist[i][j], j) for j in range(len(gallery_labels))
            if not (gallery_labels[j] == probe_labels[i] and gallery_seqs[j] == probe_seqs[i])
        )
        flags = [gallery_labels[j] == probe_labels[i] for _, j in ranked]
        total = sum(flags)
        if total == 0:
            excluded += 1
            continue
        r1.append(1.0 if any(flags[:1]) else 0.0)
        r5.append(1.0 if any(flags[:5]) else 0.0)
        precisions, found, last = [], 0, 0
        for rank, flag in enumerate(flags, start=1):
            if flag:
                found += 1
                precisions.append(found / rank)
                last = rank
        aps.append(math.fsum(precisions) / total)
        inps.append(total / last)
    mean = lambda xs: math.fsum(xs) / len(xs)  # noqa: E731
    return mean(r1), mean(r5), mean(aps), mean(inps), excluded


def hardest_by_enumeration(dist, labels):
    """Hardest (positive, negative) per anchor: the pair maximizing d(a,p) - d(a,n) over all triplets."""
    n = len(labels)
    out = []
    for a in range(n):
        best, pick = -math.inf, (-1, -1)
        for p, q in itertools.product(range(n), range(n)):
            if p == a or labels[p] != labels[a] or labels[q] == labels[a]:
                continue
            gap = dist[a][p] - dist[a][q]
            if gap > best:
                best, pick = gap, (p, q)
        out.append(pick)
    return out


def central_difference(f, tensor, index, h):
    """Central finite difference of scalar ``f()`` with respect to ``tensor[index]`` (in place)."""
    orig = tensor[index].item()
    tensor[index] = orig + h
    up = f()
    tensor[index] = orig - h
    down = f()
    tensor[index] = orig
    return (up - down) / (2 * h)
