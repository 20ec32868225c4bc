"""Perceptual gait integration: weighted multi-level silhouettes, then gated modality fusion."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import InvalidParameter, ShapeError

DEFAULT_WEIGHTS = (0.0, 0.0, 0.2, 0.3, 0.5)


def check_weights(w) -> torch.Tensor:
    w = torch.as_tensor(w, dtype=torch.float64).flatten()
    if torch.any(w < 0):
        raise InvalidParameter("fusion weights must be non-negative")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise InvalidParameter(f"fusion weights must sum to 1, got {float(w.sum())}")
    return w


def stage_one_combine(preds: torch.Tensor, weights=DEFAULT_WEIGHTS) -> torch.Tensor:
    """Collapse ``(..., M, 1, H, W)`` multi-level silhouettes into one composite per frame."""
    w = check_weights(weights)
    if preds.dim() < 4 or preds.shape[-4] != len(w):
        raise ShapeError(f"{len(w)} weights for predictions of shape {tuple(preds.shape)}")
    w = w.to(preds.dtype).reshape((-1, 1, 1, 1))
    return (preds * w).sum(dim=-4)


class GaitFusion(nn.Module):
    """Stage two: per-branch conv init, then a sigmoid gate mixing the two feature maps.

    ``H = g * F_sil + (1 - g) * F_ske`` with ``g = sigmoid(conv(relu(conv([F_sil, F_ske]))))``.
    """

    def __init__(self, channels: int = 32, heat_channels: int = 2):
        super().__init__()
        self.channels = channels
        self.sil_init = nn.Conv2d(1, channels, 3, padding=1)
        self.ske_init = nn.Conv2d(heat_channels, channels, 3, padding=1)
        self.gate_hidden = nn.Conv2d(2 * channels, channels, 1)
        self.gate_out = nn.Conv2d(channels, channels, 1)

    def branches(self, sil: torch.Tensor, heat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if sil.dim() != 4 or sil.shape[1] != 1:
            raise ShapeError(f"silhouettes must be (B, 1, H, W), got {tuple(sil.shape)}")
        if heat.dim() != 4 or heat.shape[0] != sil.shape[0] or heat.shape[2:] != sil.shape[2:]:
            raise ShapeError(f"heat {tuple(heat.shape)} is not aligned with silhouettes {tuple(sil.shape)}")
        return self.sil_init(sil), self.ske_init(heat)

    def gate(self, f_sil: torch.Tensor, f_ske: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate_out(torch.relu(self.gate_hidden(torch.cat([f_sil, f_ske], dim=1)))))

    def forward(self, sil: torch.Tensor, heat: torch.Tensor) -> torch.Tensor:
        f_sil, f_ske = self.branches(sil, heat)
        g = self.gate(f_sil, f_ske)
        return g * f_sil + (1.0 - g) * f_ske


def stage_two_fuse(sil: torch.Tensor, heat: torch.Tensor, fusion: GaitFusion) -> torch.Tensor:
    return fusion(sil, heat)
