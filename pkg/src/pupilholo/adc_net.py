"""Pupil-conditioned hologram predictors built on adjustable deformable convolution.

An ADC layer is a deformable 3x3 convolution whose offset branch g_o has no
weights of its own: a small MLP g_m maps the normalised pupil diameter to the
full parameter vector of g_o. The predictors wrap these layers in a compact
U-Net and emit a complex hologram.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import DimensionError, bilinear_sample, conv2d, load_hft, real_dtype, save_hft
from .optics import OpticalConfig, PupilSpec
from .wave_optics import ComplexField, HologramPrediction, asm_propagate

S_MAX_MM = 5.0
N_TAPS = 9
OFFSET_CHANNELS = 2 * N_TAPS
CHECKPOINT_VERSION = "pupilholo-ckpt-1"

# regular 3x3 grid, tap p = (dy + 1) * 3 + (dx + 1), matching conv weight layout [.., ky, kx]
_TAP_DY = torch.tensor([-1, -1, -1, 0, 0, 0, 1, 1, 1], dtype=torch.float64)
_TAP_DX = torch.tensor([-1, 0, 1, -1, 0, 1, -1, 0, 1], dtype=torch.float64)


class StateError(RuntimeError):
    pass


def normalized_pupil(s, s_max: float = S_MAX_MM) -> float:
    d = s.diameter_mm if isinstance(s, PupilSpec) else float(s)
    return d / s_max


# --------------------------------------------------------------------------
# ADC layer


def deformable_conv(x: torch.Tensor, offsets: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 deformable convolution.

    x: [B, C_in, H, W]; offsets: [B, 18, H, W] with channel 2p the column (dx)
    and 2p+1 the row (dy) displacement of tap p; weight: [C_out, C_in, 3, 3].
    """
    b, c_in, h, w = x.shape
    if offsets.shape != (b, OFFSET_CHANNELS, h, w):
        raise DimensionError(f"offsets {tuple(offsets.shape)} do not match input {tuple(x.shape)}")
    if weight.shape[1:] != (c_in, 3, 3):
        raise DimensionError(f"weight {tuple(weight.shape)} incompatible with {c_in} input channels")
    dtype = x.dtype
    rows = torch.arange(h, dtype=dtype).view(1, 1, h, 1)
    cols = torch.arange(w, dtype=dtype).view(1, 1, 1, w)
    dx = offsets[:, 0::2]  # [B, 9, H, W]
    dy = offsets[:, 1::2]
    r = rows + _TAP_DY.to(dtype).view(1, N_TAPS, 1, 1) + dy
    c = cols + _TAP_DX.to(dtype).view(1, N_TAPS, 1, 1) + dx
    coords = torch.stack([r, c], dim=-1)  # [B, 9, H, W, 2]
    samples = bilinear_sample(x, coords)  # [B, C_in, 9, H, W]
    out = torch.einsum("bipyx,oip->boyx", samples, weight.reshape(weight.shape[0], c_in, N_TAPS))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class ADCLayer(nn.Module):
    """Adjustable deformable convolution: g_m (hypernetwork) -> g_o (offset conv) -> g_c (deformable conv)."""

    def __init__(self, c_in: int, c_out: int, hidden: int = 32, s_max: float = S_MAX_MM):
        super().__init__()
        self.c_in, self.c_out, self.s_max = c_in, c_out, s_max
        self.n_theta_o = OFFSET_CHANNELS * c_in * 9 + OFFSET_CHANNELS
        self.g_m = nn.Sequential(
            nn.Linear(1, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh(), nn.Linear(hidden, self.n_theta_o)
        )
        nn.init.zeros_(self.g_m[-1].weight)
        nn.init.zeros_(self.g_m[-1].bias)
        self.weight = nn.Parameter(torch.empty(c_out, c_in, 3, 3))
        self.bias = nn.Parameter(torch.zeros(c_out))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.instrument = False
        self.last_offsets: torch.Tensor | None = None

    def theta_o(self, s_norm: float) -> torch.Tensor:
        inp = torch.full((1, 1), float(s_norm), dtype=self.weight.dtype)
        return self.g_m(inp)[0]

    def offsets(self, x: torch.Tensor, s_norm: float) -> torch.Tensor:
        theta = self.theta_o(s_norm)
        n_w = OFFSET_CHANNELS * self.c_in * 9
        w_o = theta[:n_w].view(OFFSET_CHANNELS, self.c_in, 3, 3)
        return conv2d(x, w_o, theta[n_w:])

    def forward(self, x: torch.Tensor, s_norm: float) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.c_in:
            raise DimensionError(f"expected {self.c_in} channels, got {x.shape[1]}")
        off = self.offsets(x, s_norm)
        if self.instrument:
            self.last_offsets = off.detach()
        y = deformable_conv(x, off, self.weight, self.bias)
        return y[0] if squeeze else y


def adc_forward(X: torch.Tensor, s, layer: ADCLayer) -> torch.Tensor:
    """Apply one ADC layer to [C_in, H, W] features for pupil ``s`` (PupilSpec or mm)."""
    return layer(X, normalized_pupil(s, layer.s_max))


class ModulatedConv(nn.Module):
    """Comparison variant: 3x3 conv with per-input-channel scales from the pupil, then demodulated."""

    def __init__(self, c_in: int, c_out: int, hidden: int = 32, s_max: float = S_MAX_MM):
        super().__init__()
        self.s_max = s_max
        self.style = nn.Sequential(nn.Linear(1, hidden), nn.Tanh(), nn.Linear(hidden, c_in))
        nn.init.zeros_(self.style[-1].weight)
        nn.init.zeros_(self.style[-1].bias)
        self.weight = nn.Parameter(torch.empty(c_out, c_in, 3, 3))
        self.bias = nn.Parameter(torch.zeros(c_out))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.norm = float(self.weight.detach().pow(2).sum((1, 2, 3)).sqrt().mean())

    def forward(self, x: torch.Tensor, s_norm: float) -> torch.Tensor:
        scale = 1.0 + self.style(torch.full((1, 1), float(s_norm), dtype=self.weight.dtype))[0]
        w = self.weight * scale.view(1, -1, 1, 1)
        w = w * (self.norm / (w.pow(2).sum((1, 2, 3), keepdim=True) + 1e-8).sqrt())
        return conv2d(x, w, self.bias)


class PlainConv(nn.Module):
    """Comparison variant without pupil conditioning."""

    def __init__(self, c_in: int, c_out: int, **_):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)

    def forward(self, x: torch.Tensor, s_norm: float) -> torch.Tensor:
        return self.conv(x)


_VARIANTS = {"adc": ADCLayer, "modconv": ModulatedConv, "conv": PlainConv}


# --------------------------------------------------------------------------
# backbone


@dataclass
class NetConfig:
    in_channels: int = 4
    out_channels: int = 2
    depth: int = 14  # total conv layers: 14, 20 or 26
    width: int = 16
    variant: str = "adc"  # "adc" | "modconv" | "conv"
    resolution: tuple[int, int] = (128, 128)
    s_max_mm: float = S_MAX_MM
    seed: int = 0

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        if self.depth < 10:
            raise ValueError("depth must be at least 10 layers")
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if any(r % 4 for r in self.resolution):
            raise DimensionError("resolution must be divisible by 4")


class UNet(nn.Module):
    """Three-level encoder-decoder; conditioned layers sit at the 1/2 and 1/4 levels.

    Layer budget: stem, down, cond, down, (depth - 9) residual conditioned
    bottleneck layers, up, cond, up, refine, head.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        cond = _VARIANTS[cfg.variant]
        kw = {"s_max": cfg.s_max_mm}
        self.stem = nn.Conv2d(cfg.in_channels, w, 3, padding=1)
        self.down1 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.enc_cond = cond(w, w, **kw)
        self.down2 = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.bottleneck = nn.ModuleList([cond(w, w, **kw) for _ in range(cfg.depth - 9)])
        self.up1 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.dec_cond = cond(w, w, **kw)
        self.up2 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.refine = nn.Conv2d(w, w, 3, padding=1)
        self.head = nn.Conv2d(w, cfg.out_channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def cond_layers(self) -> list[nn.Module]:
        return [self.enc_cond, *self.bottleneck, self.dec_cond]

    def forward(self, x: torch.Tensor, s_norm: float) -> torch.Tensor:
        a = F.relu(self.stem(x))
        b = F.relu(self.down1(a))
        b = F.relu(self.enc_cond(b, s_norm))
        c = F.relu(self.down2(b))
        for layer in self.bottleneck:
            c = c + F.relu(layer(c, s_norm))
        u = F.interpolate(c, scale_factor=2, mode="nearest")
        u = F.relu(self.up1(torch.cat([u, b], 1)))
        u = F.relu(self.dec_cond(u, s_norm))
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = F.relu(self.up2(torch.cat([u, a], 1)))
        u = F.relu(self.refine(u))
        return self.head(u)


def _inv_softplus(y: torch.Tensor) -> torch.Tensor:
    return y + torch.log(-torch.expm1(-y))


class _Predictor(nn.Module):
    def __init__(self, net_cfg: NetConfig, optics: OpticalConfig):
        super().__init__()
        self.net_cfg = net_cfg
        self.optics = optics
        self.frozen_s: float | None = None
        g = torch.Generator().manual_seed(net_cfg.seed)
        with torch.random.fork_rng():
            torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=g)))
            self.backbone = UNet(net_cfg).to(real_dtype())

    def s_input(self, s) -> float:
        """Normalised pupil fed to the conditioning layers; ``frozen_s`` pins it."""
        if self.frozen_s is not None:
            return self.frozen_s
        return normalized_pupil(s, self.net_cfg.s_max_mm)

    def set_instrument(self, on: bool = True) -> None:
        for layer in self.backbone.cond_layers():
            if isinstance(layer, ADCLayer):
                layer.instrument = on
                layer.last_offsets = None

    def _check_resolution(self, shape) -> None:
        if tuple(shape[-2:]) != self.net_cfg.resolution:
            raise DimensionError(f"input {tuple(shape[-2:])} does not match network resolution {self.net_cfg.resolution}")


class HologramNet(_Predictor):
    """RGB-D + pupil size -> complex hologram on the SLM.

    The head predicts the field at a reference plane in the middle of the
    diopter range (softplus amplitude as a correction to the square root of the
    input intensity, pi*tanh phase); that field is propagated back to the SLM.
    """

    def __init__(self, net_cfg: NetConfig | None = None, optics: OpticalConfig | None = None, channel: int = 1):
        net_cfg = net_cfg or NetConfig()
        optics = optics or OpticalConfig(resolution=net_cfg.resolution)
        if net_cfg.in_channels != 4 or net_cfg.out_channels != 2:
            raise ValueError("HologramNet takes RGB-D input and emits 2 channels")
        super().__init__(net_cfg, optics)
        self.channel = channel
        lo, hi = optics.diopter_range
        self.u_ref = optics.focal_length**2 * 0.5 * (lo + hi)

    def encode_input(self, scene) -> torch.Tensor:
        rgb = torch.as_tensor(np.asarray(scene.rgb), dtype=real_dtype())
        lo, hi = self.optics.diopter_range
        dpt = 1.0 / torch.as_tensor(np.asarray(scene.depth), dtype=real_dtype())
        dn = (dpt - lo) / (hi - lo) if hi > lo else torch.zeros_like(dpt)
        return torch.cat([rgb, dn.unsqueeze(0)], 0)

    def forward(self, x: torch.Tensor, s) -> ComplexField:
        """x: [4, H, W] or [1, 4, H, W]; returns the SLM field [H, W]."""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[0] != 1 or x.shape[1] != 4:
            raise DimensionError(f"expected a single [4, H, W] RGB-D input, got {tuple(x.shape)}")
        self._check_resolution(x.shape)
        raw = self.backbone(x, self.s_input(s))[0]
        base = _inv_softplus(x[0, self.channel].clamp(min=1e-4).sqrt())
        amp = F.softplus(raw[0] + base)
        phase = math.pi * torch.tanh(raw[1])
        ref = ComplexField.from_polar(amp, phase)
        return asm_propagate(ref, -self.u_ref, self.optics)

    def predict(self, scene, s) -> HologramPrediction:
        self._check_resolution(np.shape(scene.depth))
        return self.forward(self.encode_input(scene), s)


class FocalStackNet(_Predictor):
    """Focal stack of N evenly spaced planes + pupil -> per-plane phases and blend masks.

    Each plane's field sqrt(R_t) exp(i Phi_t) is propagated back by -u_t and
    the results are blended with per-pixel softmax weights.
    """

    def __init__(self, n_planes: int, net_cfg: NetConfig | None = None, optics: OpticalConfig | None = None):
        base = net_cfg or NetConfig()
        net_cfg = NetConfig(**{**asdict(base), "in_channels": n_planes, "out_channels": 2 * n_planes})
        super().__init__(net_cfg, optics or OpticalConfig(resolution=net_cfg.resolution))
        self.n_planes = n_planes

    def heads(self, R: torch.Tensor, s) -> tuple[torch.Tensor, torch.Tensor]:
        """Initial phases Phi [N, H, W] and softmax masks W [N, H, W]."""
        if R.dim() != 3 or R.shape[0] != self.n_planes:
            raise DimensionError(f"expected {self.n_planes} planes, got {tuple(R.shape)}")
        self._check_resolution(R.shape)
        raw = self.backbone(R.unsqueeze(0), self.s_input(s))[0]
        phases = math.pi * torch.tanh(raw[: self.n_planes])
        weights = torch.softmax(raw[self.n_planes :], dim=0)
        return phases, weights

    def forward(self, R: torch.Tensor, u, s) -> ComplexField:
        phases, weights = self.heads(R, s)
        return compose_planes(R, phases, weights, u, self.optics)


def compose_planes(R: torch.Tensor, phases: torch.Tensor, weights: torch.Tensor, u, optics: OpticalConfig) -> ComplexField:
    """sum_t W_t * ASM(sqrt(R_t) exp(i Phi_t), -u_t)."""
    if not (len(R) == len(phases) == len(weights) == len(np.atleast_1d(u))):
        raise DimensionError("plane counts of R, phases, weights and distances differ")
    fields = ComplexField.from_polar(R.clamp(min=0).sqrt(), phases)
    # a [N, H, W] field with N distances pairs field t with distance t
    back = asm_propagate(fields, -np.asarray(u, dtype=np.float64), optics).field
    return ComplexField((weights.to(back.dtype) * back).sum(0))


# --------------------------------------------------------------------------
# functional entry points


def predict_hologram(scene, s, net: HologramNet) -> HologramPrediction:
    return net.predict(scene, s)


def predict_fs_hologram(stack, s, net: FocalStackNet, channel: int = 1) -> HologramPrediction:
    if stack.M != net.n_planes:
        raise DimensionError(f"stack has {stack.M} planes, network expects {net.n_planes}")
    R = torch.as_tensor(stack.channel(channel), dtype=real_dtype())
    return net(R, stack.schedule.u, s)


def extract_offsets(net: _Predictor, scene_or_input, s) -> list[torch.Tensor]:
    """Offset fields [H_l, W_l, 18] of every ADC layer from one instrumented forward pass."""
    layers = [m for m in net.backbone.cond_layers() if isinstance(m, ADCLayer)]
    if not layers:
        raise StateError("network has no ADC layers")
    if not all(m.instrument for m in layers):
        raise StateError("instrumentation disabled; call set_instrument(True) first")
    with torch.no_grad():
        if isinstance(net, HologramNet) and not isinstance(scene_or_input, torch.Tensor):
            net.predict(scene_or_input, s)
        elif isinstance(net, FocalStackNet):
            net.heads(torch.as_tensor(scene_or_input, dtype=real_dtype()), s)
        else:
            net(scene_or_input, s)
    return [m.last_offsets[0].permute(1, 2, 0).contiguous() for m in layers]


# --------------------------------------------------------------------------
# checkpoints


def _optics_dict(o: OpticalConfig) -> dict:
    d = asdict(o)
    d["resolution"] = list(d["resolution"])
    return d


def save_checkpoint(net: _Predictor, directory: str | Path, extra: dict | None = None) -> Path:
    """One HFT1 file per tensor plus manifest.json (layer list, shapes, s_max, version)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    for i, (name, t) in enumerate(net.state_dict().items()):
        fname = f"t{i:03d}.hft"
        save_hft(directory / fname, t.detach().cpu().numpy())
        tensors.append({"name": name, "file": fname, "shape": list(t.shape)})
    manifest = {
        "version": CHECKPOINT_VERSION,
        "kind": type(net).__name__,
        "s_max_mm": net.net_cfg.s_max_mm,
        "net": {**asdict(net.net_cfg), "resolution": list(net.net_cfg.resolution)},
        "optics": _optics_dict(net.optics),
        "n_planes": getattr(net, "n_planes", None),
        "tensors": tensors,
        "extra": extra or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path) -> _Predictor:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise StateError(f"unsupported checkpoint version {manifest.get('version')!r}")
    net_cfg = NetConfig(**manifest["net"])
    optics = OpticalConfig(**{**manifest["optics"], "resolution": tuple(manifest["optics"]["resolution"])})
    if manifest["kind"] == "FocalStackNet":
        net = FocalStackNet(manifest["n_planes"], net_cfg, optics)
    else:
        net = HologramNet(net_cfg, optics)
    state = {}
    for entry in manifest["tensors"]:
        arr = load_hft(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise StateError(f"tensor {entry['name']} has shape {arr.shape}, manifest says {entry['shape']}")
        state[entry["name"]] = torch.from_numpy(np.ascontiguousarray(arr))
    net.load_state_dict(state)
    return net
