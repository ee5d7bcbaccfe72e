"""Supervision terms for the two optimization stages.

All image losses are means over supervised elements so the configured weights
are resolution independent. The mask loss supervises only pixels whose label
is certain (deep foreground / deep background); the uncertain boundary band,
like hair or clothing in real captures, is excluded from both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class LossWeights:
    mask: float = 0.05
    landmark: float = 0.05
    env: float = 0.01
    env_smooth: float = 1.0
    perceptual: float = 0.005
    photo: float = 1.0


def landmark_loss(projected: torch.Tensor, target: torch.Tensor,
                  image_width: float,
                  present: torch.Tensor | None = None) -> torch.Tensor:
    """Mean L1 distance over present landmarks, normalized by image width."""
    diff = (projected - target).abs().sum(dim=1) / image_width
    if present is not None:
        if not bool(present.any()):
            return torch.zeros((), dtype=projected.dtype)
        return diff[present].mean()
    return diff.mean()


def mask_loss(silhouette: torch.Tensor, fg_region: torch.Tensor,
              bg_region: torch.Tensor) -> torch.Tensor:
    """Mean (I_sil - 1)^2 over foreground plus mean I_sil^2 over background."""
    zero = torch.zeros((), dtype=silhouette.dtype)
    fg = ((silhouette[fg_region] - 1.0) ** 2).mean() if bool(fg_region.any()) else zero
    bg = (silhouette[bg_region] ** 2).mean() if bool(bg_region.any()) else zero
    return fg + bg


def photo_loss(rendered: torch.Tensor, silhouette: torch.Tensor,
               target: torch.Tensor, matte: torch.Tensor) -> torch.Tensor:
    """Mean squared difference of the matted images over pixels and channels."""
    diff = rendered * silhouette.unsqueeze(-1) - target * matte.unsqueeze(-1)
    return (diff * diff).mean()


def _grad_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    gx = (a[:, 1:] - a[:, :-1]) - (b[:, 1:] - b[:, :-1])
    gy = (a[1:, :] - a[:-1, :]) - (b[1:, :] - b[:-1, :])
    return gx.abs().mean() + gy.abs().mean()


def _halve(img: torch.Tensor) -> torch.Tensor:
    h = (img.shape[0] // 2) * 2
    w = (img.shape[1] // 2) * 2
    c = img[:h, :w]
    return 0.25 * (c[0::2, 0::2] + c[1::2, 0::2] + c[0::2, 1::2] + c[1::2, 1::2])


def perceptual_surrogate(rendered: torch.Tensor, target: torch.Tensor,
                         levels: int = 3) -> torch.Tensor:
    """Multi-scale image-gradient L1; a structure-preserving stand-in for a
    pretrained perceptual network (insensitive to constant offsets)."""
    a, b = rendered, target
    total = torch.zeros((), dtype=rendered.dtype)
    for lvl in range(levels):
        total = total + _grad_l1(a, b)
        if lvl + 1 < levels:
            a = _halve(a)
            b = _halve(b)
    return total


def env_regularizers(envmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(L2 magnitude, L2 smoothness) of the environment map.

    Smoothness pairs: horizontal neighbours with longitude wraparound plus
    vertical neighbours; the mean runs over all pairs and channels.
    """
    l_mag = (envmap * envmap).mean()
    dh = envmap - torch.roll(envmap, shifts=1, dims=1)
    dv = envmap[1:] - envmap[:-1]
    n_pairs = dh.numel() + dv.numel()
    l_smooth = ((dh * dh).sum() + (dv * dv).sum()) / n_pairs
    return l_mag, l_smooth


@dataclass
class LossTerms:
    mask: torch.Tensor
    landmark: torch.Tensor
    photo: torch.Tensor
    perceptual: torch.Tensor
    env: torch.Tensor
    env_smooth: torch.Tensor

    def total(self, w: LossWeights) -> torch.Tensor:
        return (
            w.mask * self.mask
            + w.landmark * self.landmark
            + w.photo * self.photo
            + w.perceptual * self.perceptual
            + w.env * self.env
            + w.env_smooth * self.env_smooth
        )

    def detached(self) -> dict[str, float]:
        return {
            "mask": float(self.mask), "lmk": float(self.landmark),
            "photo": float(self.photo), "perc": float(self.perceptual),
            "env": float(self.env), "env_smooth": float(self.env_smooth),
        }


def total_loss(terms: LossTerms, weights: LossWeights) -> torch.Tensor:
    return terms.total(weights)
