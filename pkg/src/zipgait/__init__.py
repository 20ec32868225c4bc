"""Skeleton-to-silhouette diffusion and fused gait recognition at desk scale."""

__version__ = "0.1.0"
