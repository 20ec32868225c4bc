"""DiffGait: condition encoder, gait mapping, timestep embedding, HGV fusion and decoder.

The decoder predicts the clean silhouette (x0-prediction) in [-1, 1].
Every width is derived from the single channel knob ``C``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

INPUT_SHAPE = (64, 44)


@dataclass(frozen=True)
class NetConfig:
    C: int = 64
    heat_channels: int = 2
    embed_mult: int = 4

    @property
    def widths(self) -> tuple[int, int, int]:
        """Channel widths at full, half and quarter resolution."""
        return max(self.C // 2, 2), self.C, 5 * self.C // 2

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


class ResBlock(nn.Module):
    """Pre-activation residual block; ``resample`` is ``"down"``, ``"up"`` or ``None``."""

    def __init__(self, cin: int, cout: int, resample: str | None = None):
        super().__init__()
        self.resample = resample
        stride = 2 if resample == "down" else 1
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = None
        if cin != cout or resample is not None:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        if self.resample == "up":
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class ConditionEncoder(nn.Module):
    """Five residual stages, two of them stride-2: (2, 64, 44) -> (C, 16, 11)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w1, w2, w3 = cfg.widths
        self.stem = nn.Conv2d(cfg.heat_channels, w1, 3, padding=1)
        self.stages = nn.Sequential(
            ResBlock(w1, w1),
            ResBlock(w1, w2, "down"),
            ResBlock(w2, w3, "down"),
            ResBlock(w3, w3),
            ResBlock(w3, cfg.C),
        )

    def forward(self, heat):
        return self.stages(self.stem(heat))


class GaitMapping(nn.Module):
    """Two stride-2 convolutions: (1, 64, 44) -> (C, 16, 11)."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.conv1 = nn.Conv2d(1, cfg.widths[0], 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(cfg.widths[0], cfg.C, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv2(F.silu(self.conv1(x)))


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.dim = cfg.C
        hidden = cfg.embed_mult * cfg.C
        self.fc1 = nn.Linear(cfg.C, hidden)
        self.fc2 = nn.Linear(hidden, cfg.C)

    def forward(self, t: torch.Tensor):
        emb = sinusoidal_embedding(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(emb)))


class Decoder(nn.Module):
    """Mirror of the encoder with two 2x upsampling stages and a tanh head."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w1, w2, w3 = cfg.widths
        self.stages = nn.Sequential(
            ResBlock(cfg.C, w3),
            ResBlock(w3, w3),
            ResBlock(w3, w2, "up"),
            ResBlock(w2, w1, "up"),
            ResBlock(w1, w1),
        )
        self.norm = nn.GroupNorm(_groups(w1), w1)
        self.head = nn.Conv2d(w1, 1, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, hgv):
        return torch.tanh(self.head(F.silu(self.norm(self.stages(hgv)))))


def _check(x: torch.Tensor, shape: tuple, name: str) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != shape:
        raise ShapeError(f"{name}: expected (B, {', '.join(map(str, shape))}), got {tuple(x.shape)}")


class DiffGait(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConditionEncoder(cfg)
        self.gait_mapping = GaitMapping(cfg)
        self.time_embed = TimestepEmbedding(cfg)
        self.decoder = Decoder(cfg)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return self.cfg.C, INPUT_SHAPE[0] // 4, INPUT_SHAPE[1] // 4

    def encode_condition(self, heat: torch.Tensor) -> torch.Tensor:
        _check(heat, (self.cfg.heat_channels,) + INPUT_SHAPE, "heat")
        return self.encoder(heat)

    def map_sample(self, dg_t: torch.Tensor) -> torch.Tensor:
        _check(dg_t, (1,) + INPUT_SHAPE, "dg_t")
        return self.gait_mapping(dg_t)

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_embed(t)

    def build_hgv(self, g_ske: torch.Tensor, dg_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        _check(g_ske, self.feature_shape, "g_ske")
        return hybrid_gait_volume(g_ske, self.map_sample(dg_t), self.embed_time(t))

    def decode(self, hgv: torch.Tensor) -> torch.Tensor:
        _check(hgv, self.feature_shape, "hgv")
        return self.decoder(hgv)

    def forward(self, heat, dg_t, t, g_ske=None):
        """Predict the clean silhouette; pass ``g_ske`` to reuse an encoded condition."""
        if g_ske is None:
            g_ske = self.encode_condition(heat)
        return self.decode(self.build_hgv(g_ske, dg_t, t))


def hybrid_gait_volume(g_ske: torch.Tensor, mapped: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
    """``g * (GM + TE) + g`` with the timestep embedding broadcast over space."""
    if mapped.shape != g_ske.shape:
        raise ShapeError(f"gait mapping {tuple(mapped.shape)} does not match condition {tuple(g_ske.shape)}")
    return g_ske * (mapped + t_emb[:, :, None, None]) + g_ske


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
