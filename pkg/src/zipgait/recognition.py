"""Gait recognizer over fused per-frame features, its losses and retrieval metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .engine import check_parameters
from .errors import InvalidParameter, ShapeError, TrainingDiverged
from .net import ResBlock
from .pgi import GaitFusion


@dataclass(frozen=True)
class RecognizerConfig:
    num_classes: int
    fusion_channels: int = 32
    width: int = 32
    parts: int = 16
    dim: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


class Backbone(nn.Module):
    """Compact residual network: (C_f, 64, 44) -> (4 * width, 16, 11)."""

    def __init__(self, cin: int, width: int):
        super().__init__()
        self.stem = nn.Conv2d(cin, width, 3, stride=2, padding=1)
        self.stages = nn.Sequential(
            ResBlock(width, width),
            ResBlock(width, 2 * width, "down"),
            ResBlock(2 * width, 2 * width),
            ResBlock(2 * width, 4 * width),
        )
        self.out_channels = 4 * width

    def forward(self, x):
        return F.silu(self.stages(self.stem(x)))


class HorizontalMapping(nn.Module):
    """Split a feature map into horizontal strips, max+mean pool each, project each separately."""

    def __init__(self, channels: int, parts: int, dim: int):
        super().__init__()
        self.parts = parts
        self.proj = nn.Parameter(torch.empty(parts, channels, dim))
        nn.init.xavier_uniform_(self.proj)

    def forward(self, x):
        n, c, h, _ = x.shape
        if h % self.parts:
            raise ShapeError(f"feature height {h} is not divisible into {self.parts} parts")
        strips = x.reshape(n, c, self.parts, -1)
        pooled = strips.amax(-1) + strips.mean(-1)
        return torch.einsum("ncp,pcd->npd", pooled, self.proj)


class ZipGait(nn.Module):
    """Fusion + backbone + temporal max + horizontal mapping + per-part classifiers."""

    def __init__(self, cfg: RecognizerConfig):
        super().__init__()
        self.cfg = cfg
        self.fusion = GaitFusion(cfg.fusion_channels)
        self.backbone = Backbone(cfg.fusion_channels, cfg.width)
        self.mapping = HorizontalMapping(self.backbone.out_channels, cfg.parts, cfg.dim)
        self.classifier = nn.Parameter(torch.empty(cfg.parts, cfg.dim, cfg.num_classes))
        nn.init.normal_(self.classifier, std=0.01)

    def embed_features(self, feats: torch.Tensor) -> torch.Tensor:
        """``(B, F, C_f, H, W)`` fused frame features -> ``(B, P, D)`` part embeddings."""
        b, f = feats.shape[:2]
        maps = self.backbone(feats.flatten(0, 1))
        pooled = maps.reshape((b, f) + maps.shape[1:]).amax(dim=1)
        return self.mapping(pooled)

    def fuse(self, sil: torch.Tensor, heat: torch.Tensor) -> torch.Tensor:
        b, f = sil.shape[:2]
        fused = self.fusion(sil.flatten(0, 1), heat.flatten(0, 1))
        return fused.reshape((b, f) + fused.shape[1:])

    def logits(self, emb: torch.Tensor) -> torch.Tensor:
        return torch.einsum("bpd,pdk->bpk", emb, self.classifier)

    def forward(self, sil: torch.Tensor, heat: torch.Tensor):
        emb = self.embed_features(self.fuse(sil, heat))
        return emb, self.logits(emb)


@dataclass
class EmbeddingSet:
    parts: np.ndarray
    label: str
    seq: str = ""
    view: str = ""


def embed_sequence(frames, model: ZipGait) -> EmbeddingSet:
    """Embed one sequence given its list of fused per-frame features ``(C_f, H, W)``."""
    if len(frames) == 0:
        raise InvalidParameter("cannot embed an empty sequence")
    feats = torch.stack([torch.as_tensor(f) for f in frames])[None]
    with torch.no_grad():
        emb = model.embed_features(feats)[0]
    return EmbeddingSet(parts=emb.numpy(), label="")


# -- losses -----------------------------------------------------------------

def _as_tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x))


def part_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Euclidean distance per part between ``(..., P, D)`` embeddings."""
    return torch.sqrt(torch.clamp(((a - b) ** 2).sum(-1), min=1e-12))


def triplet_loss(anchor, pos, neg, margin: float = 0.2) -> torch.Tensor:
    """Hinge ``max(d(a, p) - d(a, n) + m, 0)`` averaged over parts."""
    anchor, pos, neg = (_as_tensor(x) for x in (anchor, pos, neg))
    if not anchor.shape == pos.shape == neg.shape:
        raise ShapeError("anchor, positive and negative embeddings must share a shape")
    return F.relu(part_distance(anchor, pos) - part_distance(anchor, neg) + margin).mean()


def pairwise_part_distance(emb: torch.Tensor) -> torch.Tensor:
    """``(B, P, D)`` -> ``(P, B, B)`` distance matrices."""
    x = emb.transpose(0, 1)
    return torch.sqrt(torch.clamp(((x[:, :, None] - x[:, None]) ** 2).sum(-1), min=1e-12))


def mine_batch_hard(dist: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Hardest positive (farthest, excluding self) and negative (closest) per anchor.

    ``dist`` is ``(B, B)``; anchors without a positive or a negative get index -1.
    """
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_mask, neg_mask = same & ~eye, ~same
    d_pos = dist.masked_fill(~pos_mask, -math.inf)
    d_neg = dist.masked_fill(~neg_mask, math.inf)
    pos_idx, neg_idx = d_pos.argmax(1), d_neg.argmin(1)
    pos_idx[~pos_mask.any(1)] = -1
    neg_idx[~neg_mask.any(1)] = -1
    return pos_idx, neg_idx


def batch_hard_triplet_loss(emb: torch.Tensor, labels: torch.Tensor, margin: float = 0.2) -> torch.Tensor:
    dist = pairwise_part_distance(emb)
    losses = []
    for d in dist:
        pos_idx, neg_idx = mine_batch_hard(d.detach(), labels)
        valid = (pos_idx >= 0) & (neg_idx >= 0)
        if not valid.any():
            continue
        rows = torch.nonzero(valid).flatten()
        losses.append(F.relu(d[rows, pos_idx[rows]] - d[rows, neg_idx[rows]] + margin))
    if not losses:
        return emb.sum() * 0.0
    return torch.cat(losses).mean()


def ce_loss(logits, label: int) -> torch.Tensor:
    """Softmax cross-entropy of one ``(n,)`` logit vector, or ``(P, n)`` per-part logits averaged."""
    logits = _as_tensor(logits)
    if logits.shape[-1] < 2:
        raise InvalidParameter("need at least two classes")
    logits = logits.reshape(-1, logits.shape[-1])
    return (torch.logsumexp(logits, dim=-1) - logits[:, label]).mean()


def part_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """``(B, P, K)`` per-part logits against ``(B,)`` labels, averaged over batch and parts."""
    b, p, k = logits.shape
    return F.cross_entropy(logits.reshape(b * p, k), labels.repeat_interleave(p))


def zipgait_losses(model: ZipGait, sil, heat, labels, margin: float = 0.2) -> dict[str, torch.Tensor]:
    emb, logits = model(sil, heat)
    tri = batch_hard_triplet_loss(emb, labels, margin)
    ce = part_ce_loss(logits, labels)
    return {"triplet": tri, "ce": ce, "total": tri + ce}


def train_step_zipgait(model: ZipGait, batch, optimizer: torch.optim.Optimizer, margin: float = 0.2) -> dict:
    """One SGD update on ``batch = (sil, heat, labels)`` with ``sil`` ``(B, F, 1, H, W)``."""
    sil, heat, labels = batch
    model.train()
    losses = zipgait_losses(model, sil, heat, labels, margin)
    values = {k: v.item() for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDiverged(f"non-finite ZipGait loss: {values}")
    optimizer.zero_grad(set_to_none=True)
    losses["total"].backward()
    optimizer.step()
    check_parameters(model)
    return values


# -- retrieval --------------------------------------------------------------

@dataclass
class RetrievalResult:
    rank1: float
    rank5: float
    mAP: float
    mINP: float
    excluded_probes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def retrieval_distances(gallery: list[EmbeddingSet], probe: list[EmbeddingSet]) -> np.ndarray:
    """Sum over parts of per-part Euclidean distance, ``(n_probe, n_gallery)``."""
    g = np.stack([e.parts for e in gallery]).astype(np.float64)
    p = np.stack([e.parts for e in probe]).astype(np.float64)
    return np.sqrt(((p[:, None] - g[None]) ** 2).sum(-1)).sum(-1)


def evaluate_retrieval(gallery: list[EmbeddingSet], probe: list[EmbeddingSet],
                       dist: np.ndarray | None = None) -> RetrievalResult:
    """CMC rank-1/5, mAP and mINP averaged over probes.

    A gallery entry with the probe's own ``(label, seq)`` is ignored.  Ties in
    distance are broken by gallery index.  Probes with no true match left in
    the gallery are excluded and counted.
    """
    if not gallery:
        raise InvalidParameter("gallery is empty")
    if dist is None:
        dist = retrieval_distances(gallery, probe)
    g_labels = [e.label for e in gallery]
    g_keys = [(e.label, e.seq) for e in gallery]
    r1, r5, aps, inps, excluded = [], [], [], [], 0
    for i, pr in enumerate(probe):
        keep = np.array([k != (pr.label, pr.seq) for k in g_keys])
        idx = np.flatnonzero(keep)
        order = idx[np.lexsort((idx, dist[i, idx]))]
        matches = np.array([g_labels[j] == pr.label for j in order])
        n_pos = int(matches.sum())
        if n_pos == 0:
            excluded += 1
            continue
        hits = np.flatnonzero(matches)
        r1.append(1.0 if matches[:1].any() else 0.0)
        r5.append(1.0 if matches[:5].any() else 0.0)
        aps.append(math.fsum((k + 1) / (pos + 1) for k, pos in enumerate(hits)) / n_pos)
        inps.append(n_pos / (hits[-1] + 1))
    if not r1:
        return RetrievalResult(0.0, 0.0, 0.0, 0.0, excluded)

    def mean(xs):
        return math.fsum(xs) / len(xs)

    return RetrievalResult(mean(r1), mean(r5), mean(aps), mean(inps), excluded)
