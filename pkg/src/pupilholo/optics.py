"""Eye and eyepiece geometry: circle of confusion, virtual-image distances,
focal-plane scheduling and eyebox pupil sampling."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MIN_VIEWING_DISTANCE = 0.35  # m, closest virtual image offered to the viewer
C_MIN_PX = 0.5  # CoC clamp before the log weight


class DomainError(ValueError):
    pass


class PupilOutsideEyeboxWarning(UserWarning):
    pass


@dataclass(frozen=True)
class OpticalConfig:
    """Display and eye constants. All lengths in meters."""

    wavelength: float = 520e-9
    pitch: float = 8e-6
    focal_length: float = 0.05
    eye_distance: float = 0.017
    depth_near: float = 0.35
    depth_far: float = 0.70
    resolution: tuple[int, int] = (128, 128)
    coc_pitch_override: float | None = None

    def __post_init__(self):
        for name in ("wavelength", "pitch", "focal_length", "eye_distance"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if not 0 < self.depth_near <= self.depth_far:
            raise DomainError("need 0 < depth_near <= depth_far")
        if self.depth_near < MIN_VIEWING_DISTANCE - 1e-12:
            raise DomainError(f"depth_near {self.depth_near} m is closer than {MIN_VIEWING_DISTANCE} m")

    @property
    def eyebox(self) -> float:
        """Eyebox width at the eyepiece focal plane, lambda*f/p."""
        return self.wavelength * self.focal_length / self.pitch

    @property
    def coc_pitch(self) -> float:
        """Sensor-side size of one rendered pixel: eye distance times angular pixel pitch."""
        if self.coc_pitch_override is not None:
            return self.coc_pitch_override
        return self.eye_distance * self.pitch / self.focal_length

    @property
    def diopter_range(self) -> tuple[float, float]:
        return 1.0 / self.depth_far, 1.0 / self.depth_near

    def slm_distance(self, e_d):
        """SLM-side reconstruction distance u for viewer distance e_d (u = f^2/e_d)."""
        return self.focal_length**2 / e_d

    def replace(self, **kw) -> "OpticalConfig":
        vals = {k: getattr(self, k) for k in self.__dataclass_fields__}
        vals.update(kw)
        return OpticalConfig(**vals)


@dataclass(frozen=True)
class PupilSpec:
    diameter_mm: float
    center_mm: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.diameter_mm > 0:
            raise DomainError("pupil diameter must be positive")

    def inside(self, eyebox_mm: float) -> bool:
        half = eyebox_mm / 2
        return all(-half <= c < half for c in self.center_mm)


@dataclass
class FocalSchedule:
    """Focal planes ordered far to near (increasing diopter and increasing u)."""

    diopters: np.ndarray
    e_d: np.ndarray = field(init=False)
    u: np.ndarray = field(init=False)
    focal_length: float = 0.05

    def __post_init__(self):
        self.diopters = np.asarray(self.diopters, dtype=np.float64)
        self.e_d = 1.0 / self.diopters
        self.u = self.focal_length**2 * self.diopters

    @property
    def M(self) -> int:
        return len(self.diopters)

    @classmethod
    def from_distances(cls, e_d, cfg: OpticalConfig) -> "FocalSchedule":
        return cls(1.0 / np.atleast_1d(np.asarray(e_d, dtype=np.float64)), focal_length=cfg.focal_length)

    def subset(self, idx) -> "FocalSchedule":
        return FocalSchedule(self.diopters[np.asarray(idx)], focal_length=self.focal_length)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "u_k_m", "e_d_k_m", "diopter"])
            for k in range(self.M):
                w.writerow([k, repr(float(self.u[k])), repr(float(self.e_d[k])), repr(float(self.diopters[k]))])

    @classmethod
    def from_csv(cls, path: str | Path, focal_length: float | None = None) -> "FocalSchedule":
        """Reads the ``k,u_k_m,e_d_k_m,diopter`` layout; f defaults to sqrt(u * e_d) of the first row."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if focal_length is None:
            focal_length = math.sqrt(float(rows[0]["u_k_m"]) * float(rows[0]["e_d_k_m"]))
        return cls(np.array([float(r["diopter"]) for r in rows]), focal_length=focal_length)


def _check_positive(x, what: str) -> None:
    bad = (x <= 0).any() if isinstance(x, (np.ndarray, torch.Tensor)) else x <= 0
    if bad:
        raise DomainError(f"{what} must be positive")


def coc_diameter(d, d_f, s_mm, l):
    """Blur-circle diameter in meters, s*l*|1/d - 1/d_f| (s given in mm)."""
    _check_positive(d, "depth")
    _check_positive(d_f, "focal distance")
    return (s_mm * 1e-3) * l * abs(1.0 / d - 1.0 / d_f)


def coc_pixels(d, d_f, s_mm, cfg: OpticalConfig):
    """Blur-circle diameter in rendered-image pixels."""
    return coc_diameter(d, d_f, s_mm, cfg.eye_distance) / cfg.coc_pitch


def eyepiece_map(u: float, f: float, min_distance: float = MIN_VIEWING_DISTANCE) -> tuple[float, float]:
    """Image distance v = f(f-u)/u and viewer distance e_d = f^2/u for an SLM image at u."""
    if not 0 < u < f:
        raise DomainError(f"u={u} must satisfy 0 < u < f={f} for a virtual image")
    v = f * (f - u) / u
    e_d = f * f / u
    if e_d < min_distance:
        raise DomainError(f"virtual image at {e_d:.4f} m is closer than {min_distance} m")
    return v, e_d


def plan_focal_schedule(cfg: OpticalConfig, pupil: PupilSpec) -> FocalSchedule:
    """Fewest diopter-uniform focal planes keeping adjacent-plane CoC change under 1 px.

    The diopter range is split into M equal bins with one plane at each bin
    centre, so adjacent planes sit one bin apart and every scene depth is within
    half a bin of a plane.
    """
    lo, hi = cfg.diopter_range
    span = hi - lo
    px_per_diopter = pupil.diameter_mm * 1e-3 * cfg.eye_distance / cfg.coc_pitch
    m = int(math.floor(px_per_diopter * span)) + 1
    # guard against floor landing exactly on an integer product
    while m > 1 and px_per_diopter * span / m >= 1.0:
        m += 1
    edges = np.linspace(lo, hi, m + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    return FocalSchedule(centres, focal_length=cfg.focal_length)


def coc_map(depth, e_d: float, s_mm: float, cfg: OpticalConfig):
    """Per-pixel blur diameters (pixels) of a depth map viewed at focal distance e_d."""
    return coc_pixels(depth, e_d, s_mm, cfg)


def coc_weight_map(coc_px, c_min: float = C_MIN_PX):
    """In-focus emphasis weights 1/log2(1 + C), with C clamped below at c_min."""
    if isinstance(coc_px, torch.Tensor):
        return 1.0 / torch.log2(1.0 + coc_px.clamp(min=c_min))
    return 1.0 / np.log2(1.0 + np.maximum(coc_px, c_min))


def sample_pupil_grid(z_mm: float, diameter_mm: float, grid: int = 3, eyebox_mm: float | None = None) -> list[PupilSpec]:
    """Square grid of pupil centres with spacing z, centred on the eyebox, row-major."""
    if z_mm < 0:
        raise DomainError("pupil interval must be non-negative")
    half = (grid - 1) / 2
    pupils = []
    for i in range(grid):
        for j in range(grid):
            p = PupilSpec(diameter_mm, ((j - half) * z_mm, (i - half) * z_mm))
            if eyebox_mm is not None and not p.inside(eyebox_mm):
                warnings.warn(f"pupil {len(pupils)} centre {p.center_mm} outside eyebox", PupilOutsideEyeboxWarning)
            pupils.append(p)
    return pupils
