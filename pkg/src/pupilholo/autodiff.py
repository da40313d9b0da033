"""Dense-tensor differentiation layer.

Reverse-mode differentiation is delegated to torch's tape; this module pins the
contracts the rest of the package relies on (unitary power-of-two FFTs,
zero-padded bilinear sampling, precision switching, non-finite gradient
detection) and provides the HFT1 tensor file format.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class DimensionError(ValueError):
    pass


class SizeError(ValueError):
    pass


class NonFiniteGradError(FloatingPointError):
    pass


_DTYPES = {"binary32": torch.float32, "binary64": torch.float64}
_precision = "binary32"


def set_precision(mode: str) -> None:
    """Switch the default real dtype ("binary32" for training, "binary64" for oracles)."""
    global _precision
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}")
    _precision = mode
    torch.set_default_dtype(_DTYPES[mode])


def real_dtype() -> torch.dtype:
    return _DTYPES[_precision]


def complex_dtype() -> torch.dtype:
    return torch.complex64 if _precision == "binary32" else torch.complex128


@contextlib.contextmanager
def precision(mode: str):
    prev = _precision
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


def deterministic(seed: int = 0) -> None:
    """Single-thread, deterministic-kernel mode used by tests and the CLI."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)


# --------------------------------------------------------------------------
# elementwise


def _broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        x = a[-i] if i <= len(a) else 1
        y = b[-i] if i <= len(b) else 1
        if x != y and 1 not in (x, y):
            raise DimensionError(f"shapes {tuple(a)} and {tuple(b)} do not broadcast")
        out.append(max(x, y))
    return tuple(reversed(out))


_BINARY = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
}
_UNARY = {
    "exp": torch.exp,
    "log": torch.log,
    "abs": torch.abs,
    "square": torch.square,
    "sqrt": torch.sqrt,
}


def elementwise(op: str, a: torch.Tensor, b: torch.Tensor | float | None = None) -> torch.Tensor:
    if op in _BINARY:
        if b is None:
            raise DimensionError(f"{op} needs two operands")
        b = torch.as_tensor(b, dtype=a.dtype)
        _broadcast_shape(a.shape, b.shape)
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise DimensionError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


def backward(loss: torch.Tensor, tensors: Sequence[torch.Tensor] | None = None) -> None:
    """Run the reverse pass and refuse to continue on NaN/Inf gradients."""
    loss.backward()
    if tensors is None:
        return
    for i, t in enumerate(tensors):
        if t.grad is not None and not torch.isfinite(t.grad).all():
            raise NonFiniteGradError(f"non-finite gradient in tensor {i} (shape {tuple(t.shape)})")


# --------------------------------------------------------------------------
# FFT


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def check_pow2(shape: Sequence[int]) -> None:
    h, w = shape[-2], shape[-1]
    if not (_is_pow2(h) and _is_pow2(w)):
        raise SizeError(f"FFT extents must be powers of two, got {h}x{w}")


def fft2c(z: torch.Tensor, inverse: bool = False) -> torch.Tensor:
    """Unitary 2D FFT over the last two axes of a complex tensor."""
    check_pow2(z.shape)
    if inverse:
        return torch.fft.ifft2(z, norm="ortho")
    return torch.fft.fft2(z, norm="ortho")


def fft2(re: torch.Tensor, im: torch.Tensor, direction: str = "forward") -> tuple[torch.Tensor, torch.Tensor]:
    """Unitary FFT on a field stored as paired real planes."""
    if direction not in ("forward", "inverse"):
        raise ValueError(direction)
    if re.shape != im.shape:
        raise DimensionError("real and imaginary planes differ in shape")
    out = fft2c(torch.complex(re, im), inverse=direction == "inverse")
    return out.real, out.imag


# --------------------------------------------------------------------------
# convolution, sampling, MLP


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1. Accepts [C,H,W] or [B,C,H,W]."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if weight.dim() != 4 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"weight {tuple(weight.shape)} incompatible with input channels {x.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError("bias must have one entry per output channel")
    pad = weight.shape[-1] // 2
    y = F.conv2d(x, weight, bias, padding=pad)
    return y[0] if squeeze else y


def bilinear_sample(x: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` at fractional (row, col) positions; reads outside the image are zero.

    x: [C,H,W] with coords [*S,2] -> [C,*S], or batched x: [B,C,H,W] with
    coords [B,*S,2] -> [B,C,*S]. At exact lattice lines the coordinate gradient
    is taken from the cell whose lower corner lies on the line (floor rule).
    """
    batched = x.dim() == 4
    if not batched:
        x = x.unsqueeze(0)
        coords = coords.unsqueeze(0)
    if coords.shape[-1] != 2 or coords.shape[0] != x.shape[0]:
        raise DimensionError(f"coords shape {tuple(coords.shape)} incompatible with input {tuple(x.shape)}")
    b, c, h, w = x.shape
    sample_shape = coords.shape[1:-1]
    pts = coords.reshape(b, -1, 2)
    r, col = pts[..., 0], pts[..., 1]
    r0 = torch.floor(r)
    c0 = torch.floor(col)
    fr = r - r0
    fc = col - c0
    r0 = r0.long()
    c0 = c0.long()
    flat = x.reshape(b, c, h * w)

    def tap(ri, ci):
        inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        idx = (ri.clamp(0, h - 1) * w + ci.clamp(0, w - 1)).unsqueeze(1).expand(b, c, -1)
        return torch.gather(flat, 2, idx) * inside.unsqueeze(1).to(x.dtype)

    fr = fr.unsqueeze(1)
    fc = fc.unsqueeze(1)
    out = (
        tap(r0, c0) * (1 - fr) * (1 - fc)
        + tap(r0, c0 + 1) * (1 - fr) * fc
        + tap(r0 + 1, c0) * fr * (1 - fc)
        + tap(r0 + 1, c0 + 1) * fr * fc
    )
    out = out.reshape(b, c, *sample_shape)
    return out if batched else out[0]


_ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "none": lambda t: t,
}


def mlp_forward(x: torch.Tensor, layers: Sequence[tuple[torch.Tensor, torch.Tensor, str]]) -> torch.Tensor:
    """Dense layers ``y = act(x @ W.T + b)`` applied in order."""
    for i, (weight, bias, act) in enumerate(layers):
        if weight.shape[1] != x.shape[-1] or bias.shape[0] != weight.shape[0]:
            raise DimensionError(f"layer {i}: weight {tuple(weight.shape)} vs input {tuple(x.shape)}")
        if act not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        x = _ACTIVATIONS[act](x @ weight.T + bias)
    return x


# --------------------------------------------------------------------------
# finite-difference oracle


def directional_fd(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    directions: Sequence[torch.Tensor],
    h: float = 1e-3,
) -> float:
    """Central difference of a scalar ``fn`` along ``directions``, evaluated in binary64."""
    with torch.no_grad():
        xs = [t.detach().double() for t in inputs]
        ds = [d.detach().double() for d in directions]
        plus = fn(*[x + h * d for x, d in zip(xs, ds)])
        minus = fn(*[x - h * d for x, d in zip(xs, ds)])
    return float((plus - minus) / (2 * h))


def directional_grad(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], directions: Sequence[torch.Tensor]) -> float:
    """Reverse-mode gradient of scalar ``fn`` dotted with ``directions``."""
    xs = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*xs)
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    total = 0.0
    for g, d in zip(grads, directions):
        if g is not None:
            total += float((g.double() * d.double()).sum())
    return total


# --------------------------------------------------------------------------
# HFT1 tensor files

_MAGIC = b"HFT1"
_TAG = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_FROM_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_hft(path: str | Path, array) -> None:
    """Write ``array`` as HFT1: magic, u32 rank, u32 extents, u8 dtype tag, LE row-major payload."""
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.asarray(array)
    if array.dtype == np.float64:
        array = array.astype("<f8")
    else:
        array = array.astype("<f4")
    header = _MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<B", _TAG[array.dtype])
    Path(path).write_bytes(header + np.ascontiguousarray(array).tobytes())


def load_hft(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an HFT1 file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    off = 8 + 4 * rank
    dtype = _FROM_TAG[raw[off]]
    payload = raw[off + 1 :]
    count = int(np.prod(shape)) if rank else 1
    if len(payload) != count * dtype.itemsize:
        raise ValueError(f"{path}: payload length {len(payload)} does not match shape {shape}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
