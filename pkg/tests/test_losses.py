import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pupilholo.autodiff import DimensionError, precision
from pupilholo.losses import (
    ConfigError,
    LossConfig,
    draw_subset,
    loss_perp,
    loss_rec,
    multiscale_l1,
    reconstruct_planes,
    total_loss,
)
from pupilholo.optics import FocalSchedule
from pupilholo.wave_optics import ComplexField

from conftest import bandlimited_field


def loss_rec_loop(P, R, W):
    M, H, Wd = P.shape
    total = 0.0
    for k in range(M):
        acc = 0.0
        for y in range(H):
            for x in range(Wd):
                acc += W[k, y, x] * abs(P[k, y, x] - R[k, y, x])
                if x + 1 < Wd:
                    acc += abs((P[k, y, x + 1] - P[k, y, x]) - (R[k, y, x + 1] - R[k, y, x]))
                if y + 1 < H:
                    acc += abs((P[k, y + 1, x] - P[k, y, x]) - (R[k, y + 1, x] - R[k, y, x]))
        total += acc / (H * Wd)
    return total / M


def pyramid_l1_loop(p, r, levels=3):
    total = 0.0
    for level in range(levels):
        if level:
            p = 0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2])
            r = 0.25 * (r[0::2, 0::2] + r[1::2, 0::2] + r[0::2, 1::2] + r[1::2, 1::2])
        total += loss_rec_loop(p[None], r[None], np.ones((1, *p.shape)))
    return total / levels


def single_plane_asm_np(field, d, cfg):
    n = field.shape[0]
    f = np.fft.fftfreq(n, cfg.pitch)
    fy, fx = np.meshgrid(f, f, indexing="ij")
    arg = 1 / cfg.wavelength**2 - fx**2 - fy**2
    H = np.where(arg > 0, np.exp(1j * 2 * np.pi * d * np.sqrt(np.maximum(arg, 0))), 0)
    return np.fft.ifft2(np.fft.fft2(field) * H)


# --------------------------------------------------------------------------
# reconstruct_planes


class _ZeroSchedule:
    M = 1
    u = np.array([0.0])


def test_zero_distance_gives_amplitude_squared(cfg64):
    amp = torch.rand(64, 64)
    holo = ComplexField.from_polar(amp, torch.rand(64, 64) * 6)
    P = reconstruct_planes(holo, _ZeroSchedule(), cfg64)
    assert torch.allclose(P[0], amp**2, atol=1e-6)


def test_energy_constant_across_planes(cfg64):
    with precision("binary64"):
        holo = ComplexField(bandlimited_field(64, 0, dtype=torch.complex128))
        sched = FocalSchedule.from_distances(np.linspace(0.35, 0.7, 5), cfg64)
        sums = reconstruct_planes(holo, sched, cfg64).sum(dim=(-2, -1))
    assert float((sums.max() - sums.min()) / sums.mean()) < 1e-6


def test_matches_independent_asm(cfg64):
    field = bandlimited_field(64, 1, dtype=torch.complex64)
    sched = FocalSchedule.from_distances([0.5], cfg64)
    P = reconstruct_planes(ComplexField(field), sched, cfg64)[0].numpy()
    ref = np.abs(single_plane_asm_np(field.numpy().astype(np.complex128), float(sched.u[0]), cfg64)) ** 2
    assert np.abs(P - ref).max() / ref.max() < 1e-5


def test_reconstruct_is_differentiable(cfg64):
    phase = torch.zeros(64, 64, requires_grad=True)
    sched = FocalSchedule.from_distances([0.4, 0.6], cfg64)
    P = reconstruct_planes(ComplexField.phase_only(phase), sched, cfg64)
    (P * torch.rand_like(P)).sum().backward()
    assert phase.grad is not None and torch.isfinite(phase.grad).all()


# --------------------------------------------------------------------------
# loss_rec


def test_loss_rec_perfect_is_zero():
    R = torch.rand(3, 8, 8)
    assert float(loss_rec(R, R.clone(), torch.ones_like(R))) == 0.0


def test_zero_weight_constant_offset_is_zero():
    R = torch.full((2, 8, 8), 0.2)
    assert float(loss_rec(R + 0.3, R, torch.zeros_like(R))) == 0.0


def test_loss_rec_matches_loop():
    rng = np.random.default_rng(0)
    P, R, W = rng.random((2, 8, 8)), rng.random((2, 8, 8)), rng.random((2, 8, 8)) * 1.7
    with precision("binary64"):
        got = float(loss_rec(torch.from_numpy(P), torch.from_numpy(R), torch.from_numpy(W)))
    assert abs(got - loss_rec_loop(P, R, W)) < 1e-6


def test_loss_rec_length_mismatch():
    with pytest.raises(DimensionError):
        loss_rec(torch.rand(3, 4, 4), torch.rand(2, 4, 4), torch.rand(3, 4, 4))
    with pytest.raises(DimensionError):
        loss_rec(torch.rand(2, 4, 4), torch.rand(2, 4, 5), torch.rand(2, 4, 4))


@given(seed=st.integers(0, 10_000))
def test_losses_non_negative(seed):
    g = torch.Generator().manual_seed(seed)
    P, R, W = (torch.rand(3, 8, 8, generator=g) for _ in range(3))
    assert float(loss_rec(P, R, W)) >= 0
    assert float(loss_perp(P, R, [0, 2])) >= 0


# --------------------------------------------------------------------------
# loss_perp


def test_loss_perp_perfect_and_disabled():
    P = torch.rand(4, 8, 8)
    assert float(loss_perp(P, P.clone(), [0, 1, 3])) == 0.0
    assert float(loss_perp(P, torch.rand(4, 8, 8), [0, 1], kind="none")) == 0.0


def test_pyramid_matches_loop():
    rng = np.random.default_rng(5)
    p, r = rng.random((8, 8)), rng.random((8, 8))
    with precision("binary64"):
        got = float(loss_perp(torch.from_numpy(p)[None], torch.from_numpy(r)[None], [0]))
        direct = float(multiscale_l1(torch.from_numpy(p), torch.from_numpy(r)))
    assert abs(got - pyramid_l1_loop(p, r)) < 1e-9
    assert got == direct


def test_subset_larger_than_stack():
    with pytest.raises(ConfigError):
        loss_perp(torch.rand(2, 8, 8), torch.rand(2, 8, 8), [0, 1, 2])


@given(seed=st.integers(0, 10_000), m=st.integers(1, 40), size=st.integers(1, 8))
def test_subset_draw_without_replacement(seed, m, size):
    sub = draw_subset(np.random.default_rng(seed), m, size)
    assert len(sub) == min(m, size) == len(set(sub)) and all(0 <= k < m for k in sub)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(0.0, 0.0)
    with pytest.raises(ConfigError):
        LossConfig(perp_kind="lpips")
    with pytest.raises(ConfigError):
        LossConfig(alpha_rec=-1.0)


def test_total_loss_combination():
    P, R, W = torch.rand(3, 8, 8), torch.rand(3, 8, 8), torch.rand(3, 8, 8)
    cfg = LossConfig(0.7, 0.3)
    total, rec, perp = total_loss(P, R, W, cfg, [0, 2])
    assert torch.allclose(total, 0.7 * rec + 0.3 * perp)
