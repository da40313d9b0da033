import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pupilholo.autodiff import (
    DimensionError,
    NonFiniteGradError,
    SizeError,
    backward,
    bilinear_sample,
    conv2d,
    directional_fd,
    directional_grad,
    elementwise,
    fft2,
    fft2c,
    load_hft,
    mlp_forward,
    precision,
    real_dtype,
    save_hft,
)


def fd_rel_err(fn, inputs, seed=0, h=1e-3):
    g = torch.Generator().manual_seed(seed)
    dirs = [torch.randn(t.shape, generator=g, dtype=torch.float64) for t in inputs]
    analytic = directional_grad(fn, inputs, dirs)
    numeric = directional_fd(fn, inputs, dirs, h)
    return abs(analytic - numeric) / max(abs(numeric), 1e-8)


def test_add_values():
    out = elementwise("add", torch.tensor([1.0, 2.0]), torch.tensor([3.0, 4.0]))
    assert out.tolist() == [4.0, 6.0]


def test_square_grad_at_three():
    x = torch.tensor(3.0, requires_grad=True)
    backward(elementwise("square", x), [x])
    assert x.grad.item() == 6.0


def test_broadcast_scalar_grad_is_input_sum():
    a = torch.randn(2, 2, dtype=torch.float64)
    s = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
    elementwise("mul", a, s).sum().backward()
    assert s.grad.item() == pytest.approx(float(a.sum()), rel=1e-12)
    # the same value from central differences
    fd = directional_fd(lambda t: (a * t).sum(), [s], [torch.ones(())])
    assert fd == pytest.approx(float(a.sum()), rel=1e-9)


def test_broadcast_mismatch_raises():
    with pytest.raises(DimensionError):
        elementwise("add", torch.zeros(2, 3), torch.zeros(2, 2))


def test_div_by_zero_flagged_in_backward():
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    y = elementwise("div", x, torch.tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteGradError):
        backward(y.sum(), [x])


def test_fft_dc_impulse():
    z = torch.ones(4, 4, dtype=torch.complex64)
    spec = fft2c(z)
    assert spec[0, 0].real.item() == pytest.approx(4.0)
    spec[0, 0] = 0
    assert spec.abs().max().item() < 1e-6


def test_fft_pair_api_roundtrip():
    g = torch.Generator().manual_seed(1)
    re, im = torch.randn(8, 8, generator=g), torch.randn(8, 8, generator=g)
    fr, fi = fft2(re, im, "forward")
    br, bi = fft2(fr, fi, "inverse")
    assert torch.allclose(br, re, atol=1e-6) and torch.allclose(bi, im, atol=1e-6)


def test_fft_parseval_16():
    g = torch.Generator().manual_seed(2)
    z = torch.randn(16, 16, generator=g, dtype=torch.complex128)
    a = float((z.abs() ** 2).sum())
    b = float((fft2c(z).abs() ** 2).sum())
    assert abs(a - b) / a < 1e-6


def test_fft_non_pow2_raises():
    with pytest.raises(SizeError):
        fft2c(torch.zeros(6, 8, dtype=torch.complex64))


def test_fft_backward_is_adjoint():
    # <F x, y> = <x, F^H y> for the unitary transform
    g = torch.Generator().manual_seed(3)
    x = torch.randn(8, 8, generator=g, dtype=torch.complex128)
    y = torch.randn(8, 8, generator=g, dtype=torch.complex128)
    lhs = (fft2c(x) * y.conj()).sum()
    rhs = (x * fft2c(y, inverse=True).conj()).sum()
    assert abs(complex(lhs - rhs)) < 1e-10


def test_conv_identity_kernel():
    x = torch.randn(2, 6, 6)
    w = torch.zeros(2, 2, 3, 3)
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    assert torch.equal(conv2d(x, w), x)


def test_conv_ones_kernel_interior():
    x = torch.full((1, 5, 5), 0.7)
    y = conv2d(x, torch.ones(1, 1, 3, 3))
    assert y[0, 2, 2].item() == pytest.approx(9 * 0.7)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(torch.zeros(2, 4, 4), torch.zeros(1, 3, 3, 3))


def test_conv_weight_grad_fd_binary32():
    g = torch.Generator().manual_seed(4)
    x = torch.randn(1, 5, 5, generator=g)
    w = torch.randn(1, 1, 3, 3, generator=g)
    err = fd_rel_err(lambda ww: (conv2d(x.to(ww.dtype), ww) ** 2).sum(), [w])
    assert err < 1e-3


def test_bilinear_integer_is_gather():
    x = torch.arange(16.0).view(1, 4, 4)
    coords = torch.tensor([[[1.0, 2.0], [3.0, 0.0]]])
    out = bilinear_sample(x, coords)
    assert out[0].tolist() == [[6.0, 12.0]]


def test_bilinear_midpoint():
    x = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
    out = bilinear_sample(x, torch.tensor([[0.5, 0.5]]))
    assert out.item() == pytest.approx(1.5)


def test_bilinear_out_of_bounds_zero():
    x = torch.ones(1, 3, 3)
    out = bilinear_sample(x, torch.tensor([[-2.0, 0.0], [0.0, 5.0], [-0.5, 0.0]]))
    assert out[0].tolist() == [0.0, 0.0, 0.5]


def test_bilinear_coord_grad_fd():
    g = torch.Generator().manual_seed(5)
    x = torch.randn(2, 6, 6, generator=g, dtype=torch.float64)
    coords = torch.rand(4, 4, 2, generator=g, dtype=torch.float64) * 4 + 0.3
    err = fd_rel_err(lambda c: (bilinear_sample(x, c) ** 2).sum(), [coords], h=1e-5)
    assert err < 1e-6


def test_mlp_identity_and_relu():
    x = torch.tensor([[-1.0, 2.0]])
    assert torch.equal(mlp_forward(x, [(torch.eye(2), torch.zeros(2), "none")]), x)
    assert mlp_forward(x, [(torch.eye(2), torch.zeros(2), "relu")]).tolist() == [[0.0, 2.0]]


def test_mlp_dimension_error():
    with pytest.raises(DimensionError):
        mlp_forward(torch.zeros(1, 3), [(torch.eye(2), torch.zeros(2), "none")])


def test_mlp_two_layer_fd():
    g = torch.Generator().manual_seed(6)
    x = torch.randn(3, 4, generator=g)
    w1, b1 = torch.randn(5, 4, generator=g), torch.randn(5, generator=g)
    w2, b2 = torch.randn(2, 5, generator=g), torch.randn(2, generator=g)

    def f(a, b, c, d):
        return mlp_forward(x.to(a.dtype), [(a, b, "tanh"), (c, d, "none")]).pow(2).sum()

    assert fd_rel_err(f, [w1, b1, w2, b2]) < 1e-3


def test_precision_switch():
    assert real_dtype() == torch.float32
    with precision("binary64"):
        assert real_dtype() == torch.float64
        assert torch.zeros(1).dtype == torch.float64
    assert real_dtype() == torch.float32


@given(
    shape=st.lists(st.integers(1, 5), min_size=0, max_size=4),
    dtype=st.sampled_from([np.float32, np.float64]),
    seed=st.integers(0, 2**31 - 1),
)
def test_hft_roundtrip(tmp_path_factory, shape, dtype, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    path = tmp_path_factory.mktemp("hft") / "a.hft"
    save_hft(path, arr)
    back = load_hft(path)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_hft_header_layout(tmp_path):
    save_hft(tmp_path / "x.hft", np.zeros((2, 3), dtype=np.float32))
    raw = (tmp_path / "x.hft").read_bytes()
    assert raw[:4] == b"HFT1"
    assert raw[4:8] == (2).to_bytes(4, "little")
    assert raw[8:12] == (2).to_bytes(4, "little") and raw[12:16] == (3).to_bytes(4, "little")
    assert raw[16] == 0 and len(raw) == 17 + 24


@given(st.integers(0, 10_000))
def test_sum_loss_directional_derivative(seed):
    # sum-of-all-elements loss through a small op graph
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 4, 4, generator=g, dtype=torch.float64) + 0.5
    w = torch.randn(2, 1, 3, 3, generator=g, dtype=torch.float64)

    def f(a, b):
        y = conv2d(torch.log(a), b)
        return torch.tanh(y).sum() + torch.sqrt(a).sum()

    assert fd_rel_err(f, [x, w], seed=seed, h=1e-5) < 1e-3
