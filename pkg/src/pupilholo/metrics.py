"""Image-quality metrics and the offset / depth-of-field analyses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt
from scipy.signal import convolve2d

from .optics import C_MIN_PX, OpticalConfig, coc_map, coc_weight_map

PSNR_CAP = 99.0


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return 10 * math.log10(peak**2 / mse)


def weighted_psnr(pred, target, weights, peak: float = 1.0) -> float:
    """PSNR of a CoC-weighted MSE: per plane sum(W (P-R)^2)/sum(W), averaged over planes."""
    p, r, w = _np(pred), _np(target), _np(weights)
    if p.ndim == 2:
        p, r, w = p[None], r[None], w[None]
    wmse = np.sum(w * (p - r) ** 2, axis=(-2, -1)) / np.sum(w, axis=(-2, -1))
    mse = float(np.mean(wmse))
    if mse == 0:
        return PSNR_CAP
    return 10 * math.log10(peak**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained windows (no padding).

    Colour inputs [3, H, W] are averaged over channels first.
    """
    a, b = _np(a), _np(b)
    if a.ndim == 3:
        a, b = a.mean(0), b.mean(0)
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)

    def filt(x):
        return convolve2d(x, win[::-1, ::-1], mode="valid")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def gradient_magnitude(img) -> np.ndarray:
    """|dx| + |dy| forward differences, circular boundary."""
    x = _np(img)
    return np.abs(np.roll(x, -1, -1) - x) + np.abs(np.roll(x, -1, -2) - x)


# --------------------------------------------------------------------------
# offset statistics


@dataclass
class OffsetStats:
    diameter_mm: float
    bin_edges_m: np.ndarray  # 6 edges, near to far
    means: np.ndarray  # 5 raw mean |offset| (pixels)
    normalized: np.ndarray  # means / max(means) (per-pupil normalisation)
    counts: np.ndarray  # pixels per bin, summed over layers


def _nearest_resample(depth: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = depth.shape
    rows = (np.arange(shape[0]) * h) // shape[0]
    cols = (np.arange(shape[1]) * w) // shape[1]
    return depth[np.ix_(rows, cols)]


def depth_bins(depth: np.ndarray, cfg: OpticalConfig, n_bins: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Bin index (0 = nearest) for every pixel; bins are equal-width in diopters over the depth range."""
    lo, hi = cfg.diopter_range
    edges_dpt = np.linspace(hi, lo, n_bins + 1)
    dpt = 1.0 / depth
    idx = np.floor((hi - dpt) / (hi - lo) * n_bins).astype(int) if hi > lo else np.zeros(depth.shape, int)
    return np.clip(idx, 0, n_bins - 1), 1.0 / edges_dpt


def offset_depth_statistics(offsets, depth, s, cfg: OpticalConfig, n_bins: int = 5) -> OffsetStats:
    """Mean offset magnitude per depth interval over every ADC layer's offset field.

    ``offsets`` is a list of [H_l, W_l, 18] fields (interleaved dx, dy per tap);
    the depth map is resampled to each layer's grid by nearest neighbour.
    """
    depth = _np(depth)
    sums = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=np.int64)
    edges = None
    for off in offsets:
        off = _np(off)
        mag = np.sqrt(off[..., 0::2] ** 2 + off[..., 1::2] ** 2).mean(-1)
        d = _nearest_resample(depth, mag.shape)
        idx, edges = depth_bins(d, cfg, n_bins)
        sums += np.bincount(idx.ravel(), weights=mag.ravel(), minlength=n_bins)
        counts += np.bincount(idx.ravel(), minlength=n_bins)
    means = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    top = means.max()
    normalized = means / top if top > 0 else np.zeros(n_bins)
    diameter = s.diameter_mm if hasattr(s, "diameter_mm") else float(s)
    return OffsetStats(diameter, edges, means, normalized, counts)


# --------------------------------------------------------------------------
# depth-of-field trend


@dataclass
class DofRow:
    diameter_mm: float
    focus: str  # "near" | "far"
    out_of_focus_sharpness: float
    in_focus_sharpness: float


def reach_mask(mask: np.ndarray, radius_px: float) -> np.ndarray:
    """Pixels within ``radius_px`` of ``mask`` on the periodic image grid.

    Defocused content spreads up to one blur radius past its own pixels; the
    out-of-focus region is measured over this reach so that spread energy is
    not lost across the mask boundary.
    """
    h, w = mask.shape
    dist = distance_transform_edt(~np.tile(mask, (3, 3)))[h : 2 * h, w : 2 * w]
    return dist <= radius_px


def _sharpness(img: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return float("nan")
    return float(gradient_magnitude(img)[mask].mean())


def dof_trend(scene, s_list, cfg: OpticalConfig, net=None, threshold_px: float = 2.0, channel: int = 1) -> list[DofRow]:
    """Sharpness of out-of-focus and in-focus regions at near and far focus, per pupil size.

    Without ``net`` the incoherent renderer is measured instead, which serves as
    the oracle for the trend. The out-of-focus region is CoC > threshold at the
    smallest pupil, widened by half the largest CoC at the largest pupil; the
    in-focus region is CoC < 1 px at the largest pupil. Every pupil size is
    compared over the same pixels.
    """
    from .optics import FocalSchedule, PupilSpec
    from .scene_synth import render_focal_stack

    s_list = [float(s) for s in s_list]
    sched = FocalSchedule.from_distances([cfg.depth_far, cfg.depth_near], cfg)
    rows = []
    for k, focus in enumerate(("far", "near")):
        e = float(sched.e_d[k])
        oof = coc_map(scene.depth, e, min(s_list), cfg) > threshold_px
        oof = reach_mask(oof, float(coc_map(scene.depth, e, max(s_list), cfg).max()) / 2)
        inf = coc_map(scene.depth, e, max(s_list), cfg) < 1.0
        for s in s_list:
            if net is None:
                img = render_focal_stack(scene, PupilSpec(s), sched.subset([k]), cfg).images[0, channel]
            else:
                from .losses import reconstruct_planes

                holo = net.predict(scene, PupilSpec(s))
                with torch.no_grad():
                    img = reconstruct_planes(holo, sched.subset([k]), cfg)[0].numpy()
            rows.append(DofRow(s, focus, _sharpness(img, oof), _sharpness(img, inf)))
    return rows


def is_monotone_nonincreasing(values, tol: float = 0.0) -> bool:
    v = list(values)
    return all(b <= a + tol for a, b in zip(v, v[1:]))


def coc_weights_for(depth, schedule, s_mm: float, cfg: OpticalConfig) -> np.ndarray:
    """Stacked in-focus weights [M, H, W] for a depth map and schedule."""
    return np.stack([coc_weight_map(coc_map(_np(depth), float(e), s_mm, cfg), C_MIN_PX) for e in schedule.e_d])
