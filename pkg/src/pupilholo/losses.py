"""Focal-stack reconstruction and the supervision losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import DimensionError
from .optics import FocalSchedule, OpticalConfig
from .wave_optics import ComplexField, asm_propagate, intensity


class ConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    alpha_rec: float = 1.0
    alpha_perp: float = 0.025
    perp_subset_size: int = 5
    perp_kind: str = "multiscale_gradient"

    def __post_init__(self):
        if self.alpha_rec < 0 or self.alpha_perp < 0 or self.alpha_rec + self.alpha_perp <= 0:
            raise ConfigError("loss weights must be non-negative with a positive sum")
        if self.perp_kind not in ("multiscale_gradient", "none"):
            raise ConfigError(f"unknown perceptual surrogate {self.perp_kind!r}")


def reconstruct_planes(holo: ComplexField, schedule: FocalSchedule, cfg: OpticalConfig) -> torch.Tensor:
    """Intensities [M, H, W] of the hologram propagated to every scheduled distance u_k."""
    if schedule.M == 0:
        raise ValueError("empty focal schedule")
    return intensity(asm_propagate(holo, schedule.u, cfg))


def _grads(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    # forward differences; the last column/row has no forward neighbour and contributes zero
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return dx, dy


def gradient_l1(p: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Per-pixel |dP/dx - dR/dx| + |dP/dy - dR/dy|."""
    pdx, pdy = _grads(p)
    rdx, rdy = _grads(r)
    return (pdx - rdx).abs() + (pdy - rdy).abs()


def loss_rec(P: torch.Tensor, R: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """mean_k mean_xy [ W_k |P_k - R_k| + |grad P_k - grad R_k| ]; the weight touches the intensity term only."""
    if len(P) != len(R) or len(P) != len(W):
        raise DimensionError(f"plane counts differ: {len(P)}, {len(R)}, {len(W)}")
    if P.shape != R.shape or R.shape != W.shape:
        raise DimensionError(f"shapes differ: {tuple(P.shape)}, {tuple(R.shape)}, {tuple(W.shape)}")
    per_pixel = W * (P - R).abs() + gradient_l1(P, R)
    return per_pixel.mean()


def multiscale_l1(p: torch.Tensor, r: torch.Tensor, levels: int = 3) -> torch.Tensor:
    """Intensity + gradient L1 averaged over a dyadic average-pooling pyramid."""
    total = 0.0
    for level in range(levels):
        if level:
            p = F.avg_pool2d(p.unsqueeze(-3), 2).squeeze(-3)
            r = F.avg_pool2d(r.unsqueeze(-3), 2).squeeze(-3)
        total = total + (p - r).abs().mean() + gradient_l1(p, r).mean()
    return total / levels


def loss_perp(P: torch.Tensor, R: torch.Tensor, subset, kind: str = "multiscale_gradient") -> torch.Tensor:
    """Perceptual surrogate averaged over the plane subset."""
    subset = list(subset)
    if len(subset) > len(P):
        raise ConfigError(f"perceptual subset of {len(subset)} exceeds {len(P)} planes")
    if kind == "none" or not subset:
        return P.new_zeros(())
    if kind != "multiscale_gradient":
        raise ConfigError(f"unknown perceptual surrogate {kind!r}")
    return torch.stack([multiscale_l1(P[k], R[k]) for k in subset]).mean()


def draw_subset(rng: np.random.Generator, M: int, size: int) -> list[int]:
    return sorted(rng.choice(M, size=min(size, M), replace=False).tolist())


def total_loss(P, R, W, loss_cfg: LossConfig, subset) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    rec = loss_rec(P, R, W)
    perp = loss_perp(P, R, subset, loss_cfg.perp_kind) if loss_cfg.alpha_perp > 0 else P.new_zeros(())
    return loss_cfg.alpha_rec * rec + loss_cfg.alpha_perp * perp, rec, perp
