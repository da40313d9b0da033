"""Iterative hologram optimisers: Gerchberg-Saxton, focal-stack SGD and
pupil-aware light-field optimisation over an eyebox pupil grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import real_dtype
from .losses import ConfigError, gradient_l1, loss_rec, reconstruct_planes
from .metrics import psnr
from .optics import C_MIN_PX, OpticalConfig, PupilSpec, coc_weight_map, sample_pupil_grid
from .wave_optics import ComplexField, asm_propagate, energy_entropy, eyebox_energy_map, simulate_pupil_view


class DivergenceError(FloatingPointError):
    def __init__(self, msg, last_state=None):
        super().__init__(msg)
        self.last_state = last_state


@dataclass
class OptimizeSpec:
    iterations: int = 500
    step_size: float = 0.05
    init: str | None = None  # None picks the optimiser's own default
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.init not in (None, "random_phase", "zero_phase"):
            raise ConfigError(f"unknown init {self.init!r}")


def _init_phase(shape, spec: OptimizeSpec, default: str = "random_phase") -> torch.Tensor:
    if (spec.init or default) == "zero_phase":
        return torch.zeros(shape, dtype=real_dtype())
    g = torch.Generator().manual_seed(spec.seed)
    return (2 * torch.rand(shape, generator=g, dtype=torch.float64) - 1).mul(math.pi).to(real_dtype())


# --------------------------------------------------------------------------
# Gerchberg-Saxton


@dataclass
class GSResult:
    phase: torch.Tensor
    errors: list[float]  # target-plane amplitude RMSE before each projection pair


def gs_optimize(target: torch.Tensor, u: float, iters: int, cfg: OpticalConfig, spec: OptimizeSpec | None = None) -> GSResult:
    """Alternating projections between the SLM (unit amplitude) and the target plane amplitude."""
    spec = spec or OptimizeSpec(init="random_phase")
    target_amp = torch.sqrt(torch.as_tensor(target, dtype=real_dtype()).clamp(min=0))
    phase = _init_phase(target_amp.shape, spec)
    errors = []
    slm = ComplexField.phase_only(phase)
    for _ in range(iters):
        img = asm_propagate(slm, u, cfg).field
        errors.append(float(torch.sqrt(((img.abs() - target_amp) ** 2).mean())))
        img = torch.polar(target_amp, torch.angle(img))
        back = asm_propagate(ComplexField(img), -u, cfg).field
        slm = ComplexField.phase_only(torch.angle(back))
        phase = slm.phase
    if iters:
        img = asm_propagate(slm, u, cfg).field
        errors.append(float(torch.sqrt(((img.abs() - target_amp) ** 2).mean())))
    return GSResult(phase, errors)


# --------------------------------------------------------------------------
# focal-stack SGD


@dataclass
class SGDResult:
    hologram: ComplexField
    best_loss: float
    losses: list[float] = field(default_factory=list)


def focal_weights(stack, cfg: OpticalConfig) -> torch.Tensor:
    return torch.as_tensor(coc_weight_map(stack.coc_maps, C_MIN_PX), dtype=real_dtype())


def sgd_focal_optimize(stack, spec: OptimizeSpec, cfg: OpticalConfig, channel: int = 1) -> SGDResult:
    """Adam on amplitude and phase of a complex hologram against a focal stack.

    The loss is the CoC-weighted intensity + gradient L1 used for training;
    the best iterate seen is returned. Starts from a flat phase by default: a
    random start leaves speckle that this loss does not escape.
    """
    R = torch.as_tensor(stack.channel(channel), dtype=real_dtype())
    W = focal_weights(stack, cfg)
    shape = R.shape[-2:]
    amp = torch.full(shape, float(R.mean().sqrt()), dtype=real_dtype(), requires_grad=True)
    phase = _init_phase(shape, spec, "zero_phase").requires_grad_(True)
    opt = torch.optim.Adam([amp, phase], lr=spec.step_size)
    best, best_state, losses = math.inf, None, []
    for it in range(spec.iterations):
        opt.zero_grad()
        holo = ComplexField.from_polar(amp.abs(), phase)
        P = reconstruct_planes(holo, stack.schedule, cfg)
        loss = loss_rec(P, R, W)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at iteration {it}", best_state)
        losses.append(value)
        if value < best:
            best = value
            best_state = (amp.detach().abs().clone(), phase.detach().clone())
        loss.backward()
        opt.step()
    if best_state is None:
        best_state = (amp.detach().abs(), phase.detach())
    return SGDResult(ComplexField.from_polar(*best_state), best, losses)


# --------------------------------------------------------------------------
# pupil-aware light-field optimisation


@dataclass
class LightFieldViews:
    """Target retinal images, indexed [pupil][plane], each [H, W] intensity."""

    pupils: list[PupilSpec]
    focal_e_d: list[float]
    images: np.ndarray  # [n_pupils, n_planes, H, W]


def render_view_set(scene, pupils: list[PupilSpec], focal_e_d, cfg: OpticalConfig, channel: int = 1) -> LightFieldViews:
    """Targets for every (pupil, plane): the layered scene seen from each pupil's centre of projection."""
    from .scene_synth import render_view

    focal_e_d = [float(e) for e in focal_e_d]
    images = np.stack([np.stack([render_view(scene, p, e, cfg)[channel] for e in focal_e_d]) for p in pupils])
    return LightFieldViews(list(pupils), focal_e_d, images)


@dataclass
class LFResult:
    phase: torch.Tensor
    error_table: list[dict]
    losses: list[float]
    gain: float = 1.0


def pupil_aware_lf_optimize(views: LightFieldViews, spec: OptimizeSpec, cfg: OpticalConfig) -> LFResult:
    """Phase-only hologram supervised by per-pupil retinal views at several focal distances.

    Each iteration draws one (pupil, plane) pair and steps on the L1 + gradient
    loss between the simulated view and its target. One learned gain, shared
    by every view, maps retinal intensity to target brightness: absolute
    exposure is free, but how light divides between pupils is not.
    """
    if len(views.pupils) == 0 or len(views.focal_e_d) == 0:
        raise ConfigError("empty light-field view set")
    targets = torch.as_tensor(views.images, dtype=real_dtype())
    n_p, n_k = targets.shape[:2]
    u = [cfg.slm_distance(e) for e in views.focal_e_d]
    phase = _init_phase(targets.shape[-2:], spec).requires_grad_(True)
    with torch.no_grad():
        # start the gain at the brightness ratio of the initial views
        first = torch.stack([simulate_pupil_view(ComplexField.phase_only(phase), p, u[0], cfg).mean() for p in views.pupils])
        gain0 = float(targets.mean() / first.mean().clamp(min=1e-12))
    log_gain = torch.tensor(math.log(gain0), dtype=real_dtype(), requires_grad=True)
    opt = torch.optim.Adam([phase, log_gain], lr=spec.step_size)
    rng = np.random.default_rng(spec.seed)
    losses = []
    for _ in range(spec.iterations):
        i, k = int(rng.integers(n_p)), int(rng.integers(n_k))
        opt.zero_grad()
        view = simulate_pupil_view(ComplexField.phase_only(phase), views.pupils[i], u[k], cfg) * log_gain.exp()
        loss = (view - targets[i, k]).abs().mean() + gradient_l1(view, targets[i, k]).mean()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    final = phase.detach()
    gain = float(log_gain.detach().exp())
    table = []
    with torch.no_grad():
        holo = ComplexField.phase_only(final)
        for i, pupil in enumerate(views.pupils):
            for k in range(n_k):
                view = simulate_pupil_view(holo, pupil, u[k], cfg) * gain
                table.append(
                    {
                        "pupil_idx": i,
                        "plane_idx": k,
                        "psnr": psnr(view.clamp(0, 1), targets[i, k]),
                        "l1": float((view - targets[i, k]).abs().mean()),
                    }
                )
    return LFResult(final, table, losses, gain)


# --------------------------------------------------------------------------
# pupil-interval study


# a longer eyepiece widens the eyebox to 7.8 mm so a 3x3 grid of 4 mm pupils
# spaced up to 1.5 mm stays inside it; the narrower depth range keeps blur
# below a third of the 128 px frame
LF_STUDY_OPTICS = OpticalConfig(focal_length=0.12, depth_near=0.5, depth_far=0.7)


@dataclass
class ZStudyRow:
    z_mm: float
    diameter_mm: float
    entropy: float
    center_psnr: float
    final_loss: float


def pupil_interval_study(scene, z_list, diameter_mm: float, spec: OptimizeSpec, cfg: OpticalConfig = LF_STUDY_OPTICS,
                         n_planes: int = 3) -> list[ZStudyRow]:
    """Optimise one hologram per pupil interval z and summarise its eyebox spread and centre view.

    The centre-view PSNR is the mean over the focal planes of the middle pupil.
    """
    lo, hi = cfg.diopter_range
    focal = 1.0 / np.linspace(lo, hi, n_planes + 2)[1:-1]
    rows = []
    for z in z_list:
        pupils = sample_pupil_grid(z, diameter_mm, 3, cfg.eyebox * 1e3)
        res = pupil_aware_lf_optimize(render_view_set(scene, pupils, focal, cfg), spec, cfg)
        centre = [r["psnr"] for r in res.error_table if r["pupil_idx"] == len(pupils) // 2]
        entropy = energy_entropy(eyebox_energy_map(ComplexField.phase_only(res.phase)))
        tail = res.losses[-max(1, len(res.losses) // 10):]
        rows.append(ZStudyRow(float(z), diameter_mm, entropy, float(np.mean(centre)), float(np.mean(tail))))
    return rows
