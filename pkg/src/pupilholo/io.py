"""Run configuration and on-disk formats (PNG, CSV, HFT1 tensors)."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .losses import LossConfig
from .optics import OpticalConfig


class ConfigKeyError(KeyError):
    pass


@dataclass
class RunConfig:
    """Flat run configuration; every physical quantity names its unit."""

    wavelength_nm: float = 520.0
    pitch_um: float = 8.0
    focal_length_mm: float = 50.0
    eye_distance_mm: float = 17.0
    depth_near_m: float = 0.35
    depth_far_m: float = 0.70
    resolution_px: int = 128
    pupils_mm: tuple[float, ...] = (2.0, 3.0, 4.0)
    alpha_rec: float = 1.0
    alpha_perp: float = 0.025
    perp_subset_size: int = 5
    perp_kind: str = "multiscale_gradient"
    net_depth: int = 14
    net_width: int = 16
    net_variant: str = "adc"
    learning_rate: float = 1e-4
    train_steps: int = 2000
    n_scenes: int = 10
    holdout_scenes: int = 0
    optimize_iterations: int = 500
    optimize_step_size: float = 0.05
    optimize_planes: int = 5
    dataset_dir: str = "dataset"
    checkpoint_dir: str = "checkpoint"
    seed: int = 0

    def __post_init__(self):
        self.pupils_mm = tuple(float(s) for s in self.pupils_mm)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigKeyError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pupils_mm"] = list(self.pupils_mm)
        return d

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    def optics(self) -> OpticalConfig:
        return OpticalConfig(
            wavelength=self.wavelength_nm * 1e-9,
            pitch=self.pitch_um * 1e-6,
            focal_length=self.focal_length_mm * 1e-3,
            eye_distance=self.eye_distance_mm * 1e-3,
            depth_near=self.depth_near_m,
            depth_far=self.depth_far_m,
            resolution=(self.resolution_px, self.resolution_px),
        )

    def loss(self) -> LossConfig:
        return LossConfig(self.alpha_rec, self.alpha_perp, self.perp_subset_size, self.perp_kind)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# images


def _as_np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def write_png8(path: str | Path, img) -> None:
    """[H, W] or [3, H, W] values in [0, 1] to an 8-bit PNG."""
    a = np.clip(_as_np(img), 0.0, 1.0)
    if a.ndim == 3:
        a = np.moveaxis(a, 0, -1)
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)


def write_phase_png16(path: str | Path, phase) -> None:
    """Phase wrapped to [0, 2*pi) and quantised to 16 bits."""
    p = np.mod(_as_np(phase), 2 * np.pi) / (2 * np.pi)
    Image.fromarray((np.round(p * 65535).astype(np.int64) % 65536).astype(np.uint16)).save(path)


def read_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path))


def write_energy_png(path: str | Path, energy) -> None:
    """Eyebox energy on a log scale spanning 6 decades."""
    e = _as_np(energy)
    top = e.max() if e.max() > 0 else 1.0
    log = np.log10(np.maximum(e / top, 1e-6))
    write_png8(path, (log + 6) / 6)


def write_strip(path: str | Path, images, pad: int = 2) -> None:
    """Side-by-side comparison strip of equally sized [H, W] images."""
    imgs = [np.clip(_as_np(i), 0, 1) for i in images]
    h = imgs[0].shape[0]
    gap = np.ones((h, pad))
    row = [imgs[0]]
    for img in imgs[1:]:
        row += [gap, img]
    write_png8(path, np.concatenate(row, axis=1))


# --------------------------------------------------------------------------
# csv


def write_csv(path: str | Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            vals = [row[k] for k in header] if isinstance(row, dict) else list(row)
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in vals])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tree_digest(root: str | Path) -> str:
    """SHA-256 over relative paths and file contents, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
