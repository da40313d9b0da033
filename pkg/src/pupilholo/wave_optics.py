"""Scalar wave propagation, phase-only encoding and finite-pupil viewing."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .autodiff import complex_dtype, fft2c, real_dtype
from .optics import DomainError, OpticalConfig, PupilOutsideEyeboxWarning, PupilSpec


@dataclass
class ComplexField:
    """Complex wavefield on the SLM grid. Stored as a complex tensor; amplitude/phase are views."""

    field: torch.Tensor

    @classmethod
    def from_polar(cls, amplitude: torch.Tensor, phase: torch.Tensor) -> "ComplexField":
        return cls(torch.polar(amplitude, phase))

    @classmethod
    def phase_only(cls, phase: torch.Tensor) -> "ComplexField":
        return cls.from_polar(torch.ones_like(phase), phase)

    @property
    def amplitude(self) -> torch.Tensor:
        return self.field.abs()

    @property
    def phase(self) -> torch.Tensor:
        return torch.angle(self.field)

    @property
    def shape(self):
        return self.field.shape

    def detach(self) -> "ComplexField":
        return ComplexField(self.field.detach())


# A predicted complex hologram carries the same data as any other field.
HologramPrediction = ComplexField


def frequency_grid(shape, pitch: float, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Spatial frequencies (cycles/m) in FFT bin order (DC at [0, 0])."""
    h, w = shape[-2], shape[-1]
    fy = torch.fft.fftfreq(h, d=pitch, dtype=dtype)
    fx = torch.fft.fftfreq(w, d=pitch, dtype=dtype)
    return torch.meshgrid(fy, fx, indexing="ij")


def transfer_function(shape, d, cfg: OpticalConfig) -> torch.Tensor:
    """Band-limited ASM transfer function; ``d`` may be a scalar or a 1-D batch of distances.

    The phase is built in binary64 and reduced mod 2*pi before casting, so the
    large on-axis term does not eat single-precision mantissa.
    """
    fy, fx = frequency_grid(shape, cfg.pitch)
    arg = 1.0 / cfg.wavelength**2 - fx**2 - fy**2
    band = arg > 0
    kz = torch.sqrt(torch.clamp(arg, min=0.0))
    d = torch.as_tensor(np.asarray(d, dtype=np.float64), dtype=torch.float64)
    if d.dim() == 1:
        kz = kz.unsqueeze(0)
        band = band.unsqueeze(0)
        d = d[:, None, None]
    phase = torch.remainder(2 * math.pi * d * kz, 2 * math.pi)
    tf = torch.polar(band.to(torch.float64), phase)
    return tf.to(complex_dtype())


def asm_propagate(field: ComplexField, d, cfg: OpticalConfig) -> ComplexField:
    """Free-space propagation by distance d (negative d propagates backwards).

    A 1-D array of distances returns a stack of fields along a new leading axis.
    """
    u = field.field
    spec = fft2c(u)
    tf = transfer_function(u.shape, d, cfg)
    return ComplexField(fft2c(spec * tf, inverse=True))


def intensity(field: ComplexField) -> torch.Tensor:
    u = field.field
    return u.real**2 + u.imag**2


# --------------------------------------------------------------------------
# double-phase encoding


def _binomial_lowpass(z: torch.Tensor) -> torch.Tensor:
    """Separable [1, 2, 1]/4 filter (circular boundary); zero response at Nyquist."""
    z = 0.25 * (torch.roll(z, 1, -1) + 2 * z + torch.roll(z, -1, -1))
    return 0.25 * (torch.roll(z, 1, -2) + 2 * z + torch.roll(z, -1, -2))


def checkerboard(shape, dtype=torch.bool) -> torch.Tensor:
    h, w = shape[-2], shape[-1]
    yy, xx = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    return ((yy + xx) % 2 == 0).to(dtype)


def double_phase_encode(field: ComplexField, prefilter: bool = True) -> torch.Tensor:
    """Phase-only hologram from a complex field with max amplitude <= 1.

    Even checkerboard sites carry phi + acos(A), odd sites phi - acos(A).
    """
    z = field.field
    if float(z.abs().max()) > 1.0 + 1e-6:
        raise DomainError("amplitude exceeds 1; normalise before encoding")
    if prefilter:
        z = _binomial_lowpass(z)
    amp = z.abs().clamp(max=1.0)
    phi = torch.angle(z)
    offset = torch.acos(amp)
    mask = checkerboard(z.shape).to(z.device)
    return torch.where(mask, phi + offset, phi - offset)


def normalize_amplitude(field: ComplexField) -> tuple[ComplexField, float]:
    scale = float(field.field.abs().max())
    scale = scale if scale > 0 else 1.0
    return ComplexField(field.field / scale), scale


def halfband_mask(shape) -> torch.Tensor:
    h, w = shape[-2], shape[-1]
    fy = torch.fft.fftfreq(h)
    fx = torch.fft.fftfreq(w)
    my = fy.abs() < 0.25
    mx = fx.abs() < 0.25
    return (my[:, None] & mx[None, :]).to(real_dtype())


def decode_double_phase(phase: torch.Tensor) -> ComplexField:
    """Unit-amplitude phase pattern through a half-band Fourier-plane low-pass."""
    z = torch.polar(torch.ones_like(phase), phase)
    spec = fft2c(z) * halfband_mask(phase.shape)
    return ComplexField(fft2c(spec, inverse=True))


# --------------------------------------------------------------------------
# viewing through a finite pupil


def pupil_mask(shape, pupil: PupilSpec, cfg: OpticalConfig) -> torch.Tensor:
    """Binary disc in FFT bin order; eyebox coordinate of a bin is frequency * lambda * f.

    The bin nearest the pupil centre is always open when that centre lies in the
    eyebox, so a vanishing pupil degenerates to a single plane wave.
    """
    fy, fx = frequency_grid(shape, cfg.pitch)
    scale = cfg.wavelength * cfg.focal_length * 1e3  # mm per cycle/m
    y = fy * scale
    x = fx * scale
    cx, cy = pupil.center_mm
    r2 = (x - cx) ** 2 + (y - cy) ** 2
    mask = r2 <= (pupil.diameter_mm / 2) ** 2
    if pupil.inside(cfg.eyebox * 1e3):
        flat = int(torch.argmin(r2))
        mask.view(-1)[flat] = True
    return mask.to(real_dtype())


def simulate_pupil_view(hologram: ComplexField, pupil: PupilSpec, focus_u, cfg: OpticalConfig) -> torch.Tensor:
    """Retinal intensity for an eye pupil in the eyebox, focused at SLM-side distance focus_u."""
    mask = pupil_mask(hologram.shape, pupil, cfg)
    if not bool(mask.any()):
        warnings.warn(f"pupil {pupil} lies outside the eyebox", PupilOutsideEyeboxWarning)
        shape = hologram.shape if np.ndim(focus_u) == 0 else (len(focus_u), *hologram.shape)
        return torch.zeros(shape, dtype=real_dtype())
    spec = fft2c(hologram.field)
    tf = transfer_function(hologram.shape, focus_u, cfg)
    out = fft2c(spec * mask * tf, inverse=True)
    return out.real**2 + out.imag**2


def eyebox_energy_map(hologram: ComplexField) -> torch.Tensor:
    """Fourier-plane power normalised to unit sum, DC shifted to the centre."""
    spec = fft2c(hologram.field)
    power = spec.real**2 + spec.imag**2
    power = power / power.sum()
    return torch.fft.fftshift(power, dim=(-2, -1))


def energy_entropy(energy: torch.Tensor) -> float:
    p = energy.flatten().double()
    p = p[p > 0]
    return float(-(p * torch.log(p)).sum())
