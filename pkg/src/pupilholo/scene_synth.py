"""Procedural layered RGB-D scenes and their incoherent focal stacks.

Scenes are stacks of fronto-parallel layers (colour, alpha, depth) composited
back to front. Defocus is rendered per layer with a pillbox kernel whose
diameter is the circle of confusion; alpha masks are blurred with the same
kernel so occluding edges spread over what lies behind them.
All convolutions are circular, matching the periodic FFT propagation model.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .optics import FocalSchedule, OpticalConfig, PupilSpec, coc_map, coc_pixels


class KernelClampWarning(UserWarning):
    pass


@dataclass
class Layer:
    color: np.ndarray  # [3, H, W]
    alpha: np.ndarray  # [H, W]
    depth: float  # m


@dataclass
class SceneRGBD:
    rgb: np.ndarray  # [3, H, W] all-in-focus composite
    depth: np.ndarray  # [H, W] metres
    layers: list[Layer]  # back to front
    seed: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class FocalStack:
    images: np.ndarray  # [M, 3, H, W]
    schedule: FocalSchedule
    pupil: PupilSpec
    coc_maps: np.ndarray = field(repr=False)  # [M, H, W] pixels

    @property
    def M(self) -> int:
        return self.images.shape[0]

    def channel(self, c: int = 1) -> np.ndarray:
        """Single-wavelength targets [M, H, W]; green by default."""
        return self.images[:, c]


# --------------------------------------------------------------------------
# defocus kernel


def disc_kernel(diameter_px: float, supersample: int = 16) -> np.ndarray:
    """Pillbox of the given diameter, pixel values equal to area coverage, unit sum."""
    if diameter_px < 1.0:
        return np.ones((1, 1))
    r = diameter_px / 2
    half = int(math.ceil(r - 0.5))
    n = 2 * half + 1
    sub = (np.arange(n * supersample) + 0.5) / supersample - half - 0.5
    yy, xx = np.meshgrid(sub, sub, indexing="ij")
    inside = (yy**2 + xx**2 <= r * r).astype(np.float64)
    k = inside.reshape(n, supersample, n, supersample).sum(axis=(1, 3))
    return k / k.sum()


def _kernel_spectrum(kernel: np.ndarray, shape: tuple[int, int], shift=(0.0, 0.0)) -> np.ndarray:
    h, w = shape
    pad = np.zeros((h, w))
    kh, kw = kernel.shape
    rows = (np.arange(kh) - kh // 2) % h
    cols = (np.arange(kw) - kw // 2) % w
    np.add.at(pad, (rows[:, None], cols[None, :]), kernel)
    spec = np.fft.rfft2(pad)
    if shift != (0.0, 0.0):
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.rfftfreq(w)[None, :]
        spec = spec * np.exp(-2j * np.pi * (fy * shift[0] + fx * shift[1]))
    return spec


def _clamp_diameter(diameter_px: float, shape) -> float:
    limit = float(min(shape))
    if diameter_px > limit:
        warnings.warn(f"blur diameter {diameter_px:.1f}px clamped to {limit:.0f}px", KernelClampWarning)
        return limit
    return diameter_px


def disc_blur(image: np.ndarray, diameter_px: float) -> np.ndarray:
    """Circular convolution of ``image`` (..., H, W) with a normalised pillbox."""
    if diameter_px < 0:
        raise ValueError("diameter must be non-negative")
    image = np.asarray(image, dtype=np.float64)
    shape = image.shape[-2:]
    diameter_px = _clamp_diameter(diameter_px, shape)
    if diameter_px < 1.0:
        return image.copy()
    spec = _kernel_spectrum(disc_kernel(diameter_px), shape)
    return np.fft.irfft2(np.fft.rfft2(image) * spec, s=shape)


# --------------------------------------------------------------------------
# scene generation


def _random_polygon(rng: np.random.Generator, h: int, w: int, rmin: float, rmax: float) -> list[tuple[float, float]]:
    n = int(rng.integers(3, 9))
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(rmin, rmax, n) * min(h, w)
    return [(cx + r * np.cos(a), cy + r * np.sin(a)) for r, a in zip(radii, angles)]


def _fill(shape, polys) -> np.ndarray:
    h, w = shape
    img = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(img)
    for poly in polys:
        draw.polygon(poly, fill=255)
    return np.asarray(img, dtype=np.float64) / 255.0


def _texture(rng: np.random.Generator, shape, kind: str) -> np.ndarray:
    h, w = shape
    base = rng.uniform(0.1, 0.9, 3)
    if kind == "noise":
        noise = gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, 3, 3), mode="wrap")
        noise /= np.abs(noise).max() + 1e-12
        tex = base[:, None, None] + 0.3 * noise
    elif kind == "polygons":
        tex = np.broadcast_to(base[:, None, None], (3, h, w)).copy()
        for _ in range(int(rng.integers(3, 7))):
            m = _fill(shape, [_random_polygon(rng, h, w, 0.05, 0.25)])
            col = rng.uniform(0, 1, 3)
            tex = tex * (1 - m) + col[:, None, None] * m
    else:
        raise ValueError(f"unknown texture {kind!r}")
    # high-contrast decals keep defocus visible on flat regions
    for _ in range(int(rng.integers(2, 5))):
        m = _fill(shape, [_random_polygon(rng, h, w, 0.03, 0.12)])
        col = rng.choice([0.05, 0.95], 3)
        tex = tex * (1 - m) + col[:, None, None] * m
    return np.clip(tex, 0.0, 1.0)


def composite(layers: list[Layer]) -> np.ndarray:
    out = np.zeros_like(layers[0].color)
    for layer in layers:
        out = layer.color * layer.alpha + (1 - layer.alpha) * out
    return out


def generate_scene(seed: int, n_layers: int = 4, texture: str = "polygons", cfg: OpticalConfig | None = None) -> SceneRGBD:
    """Deterministic random layered scene; layer 0 is an opaque backdrop."""
    if not 2 <= n_layers <= 6:
        raise ValueError("n_layers must be in 2..6")
    cfg = cfg or OpticalConfig()
    rng = np.random.default_rng(seed)
    h, w = cfg.resolution
    lo, hi = cfg.diopter_range
    span = hi - lo
    while True:
        diopters = np.sort(rng.uniform(lo, hi, n_layers))
        if span == 0 or np.min(np.diff(diopters)) > 0.03 * span:
            break
    layers = []
    depth = np.empty((h, w))
    for i, dpt in enumerate(diopters):
        color = _texture(rng, (h, w), texture)
        if i == 0:
            alpha = np.ones((h, w))
        else:
            polys = [_random_polygon(rng, h, w, 0.12, 0.35) for _ in range(int(rng.integers(1, 3)))]
            alpha = _fill((h, w), polys)
            if alpha.sum() == 0:
                alpha[h // 2 - 4 : h // 2 + 4, w // 2 - 4 : w // 2 + 4] = 1.0
        d = float(1.0 / dpt)
        layers.append(Layer(color, alpha, d))
        if i == 0:
            depth[:] = d
        else:
            depth[alpha > 0.5] = d
    rgb = composite(layers)
    return SceneRGBD(rgb=rgb, depth=depth, layers=layers, seed=seed)


# --------------------------------------------------------------------------
# rendering


def parallax_shift_px(pupil: PupilSpec, layer_depth: float, focus_e_d: float, cfg: OpticalConfig) -> tuple[float, float]:
    """Image shift (rows, cols) of a layer seen from an off-centre pupil.

    A pupil offset x sees a layer at depth d displaced by
    x * l * (1/e_d - 1/d) on the sensor, the same geometry as the CoC.
    """
    k = cfg.eye_distance * (1.0 / focus_e_d - 1.0 / layer_depth) / cfg.coc_pitch
    cx, cy = pupil.center_mm
    return cy * 1e-3 * k, cx * 1e-3 * k


def render_view(scene: SceneRGBD, pupil: PupilSpec, focus_e_d: float, cfg: OpticalConfig) -> np.ndarray:
    """One retinal image [3, H, W] for a pupil of given size and position, focused at e_d."""
    shape = scene.shape
    out = np.zeros((3, *shape))
    for layer in scene.layers:
        c = _clamp_diameter(float(coc_pixels(layer.depth, focus_e_d, pupil.diameter_mm, cfg)), shape)
        shift = parallax_shift_px(pupil, layer.depth, focus_e_d, cfg)
        if c < 1.0 and shift == (0.0, 0.0):
            premult, alpha = layer.color * layer.alpha, layer.alpha
        else:
            spec = _kernel_spectrum(disc_kernel(c), shape, shift)
            premult = np.fft.irfft2(np.fft.rfft2(layer.color * layer.alpha) * spec, s=shape)
            alpha = np.fft.irfft2(np.fft.rfft2(layer.alpha) * spec, s=shape)
        out = premult + (1 - alpha) * out
    return np.clip(out, 0.0, 1.0)


def render_focal_stack(scene: SceneRGBD, pupil: PupilSpec, schedule: FocalSchedule, cfg: OpticalConfig) -> FocalStack:
    """Incoherent focal stack: one occlusion-aware defocused composite per focal plane."""
    centred = PupilSpec(pupil.diameter_mm)
    images = np.stack([render_view(scene, centred, float(e), cfg) for e in schedule.e_d])
    cocs = np.stack([coc_map(scene.depth, float(e), pupil.diameter_mm, cfg) for e in schedule.e_d])
    return FocalStack(images=images, schedule=schedule, pupil=pupil, coc_maps=cocs)
