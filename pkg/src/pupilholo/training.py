"""Focal-stack supervised training of the hologram predictors."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adc_net import FocalStackNet, HologramNet, load_checkpoint, save_checkpoint
from .autodiff import load_hft, real_dtype, save_hft
from .losses import LossConfig, draw_subset, reconstruct_planes, total_loss
from .optics import C_MIN_PX, FocalSchedule, OpticalConfig, PupilSpec, coc_weight_map, plan_focal_schedule
from .scene_synth import SceneRGBD, generate_scene, render_focal_stack

TRAIN_PUPILS_MM = (2.0, 3.0, 4.0)
LOG_FIELDS = ["step", "loss", "loss_rec", "loss_perp", "s", "scene_id"]


class DatasetError(KeyError):
    pass


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator: the draw for (seed, step, stream) never depends on earlier steps."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream, step)))


def scene_seed(seed: int, index: int) -> int:
    """Sub-seed of scene ``index`` under a run seed."""
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(1, index)).generate_state(1)[0])


@dataclass
class StackSample:
    """Supervision for one (scene, pupil): targets R and weights W over the pupil's schedule."""

    schedule: FocalSchedule
    targets: torch.Tensor  # [M, H, W]
    weights: torch.Tensor  # [M, H, W]
    fs_input: torch.Tensor | None = None  # [N, H, W] for the focal-stack predictor


@dataclass
class TrainingDataset:
    scenes: list[SceneRGBD]
    pupils_mm: tuple[float, ...]
    stacks: dict[tuple[int, float], StackSample]
    cfg: OpticalConfig
    fs_schedule: FocalSchedule | None = None

    def __len__(self) -> int:
        return len(self.scenes)

    def sample(self, scene_id: int, s_mm: float) -> StackSample:
        key = (scene_id, float(s_mm))
        if key not in self.stacks:
            raise DatasetError(f"no focal stack for scene {scene_id} at {s_mm} mm")
        return self.stacks[key]

    def validate(self) -> None:
        for i in range(len(self.scenes)):
            for s in self.pupils_mm:
                self.sample(i, s)


def evenly_spaced_schedule(cfg: OpticalConfig, n: int) -> FocalSchedule:
    """n planes at the centres of n equal diopter bins."""
    lo, hi = cfg.diopter_range
    edges = np.linspace(lo, hi, n + 1)
    return FocalSchedule(0.5 * (edges[1:] + edges[:-1]), focal_length=cfg.focal_length)


def make_sample(scene: SceneRGBD, s_mm: float, cfg: OpticalConfig, channel: int = 1, fs_schedule=None) -> StackSample:
    pupil = PupilSpec(s_mm)
    stack = render_focal_stack(scene, pupil, plan_focal_schedule(cfg, pupil), cfg)
    R = torch.as_tensor(stack.channel(channel), dtype=real_dtype())
    W = torch.as_tensor(coc_weight_map(stack.coc_maps, C_MIN_PX), dtype=real_dtype())
    fs = None
    if fs_schedule is not None:
        fs = torch.as_tensor(render_focal_stack(scene, pupil, fs_schedule, cfg).channel(channel), dtype=real_dtype())
    return StackSample(stack.schedule, R, W, fs)


def build_dataset(
    n_scenes: int,
    cfg: OpticalConfig,
    seed: int = 0,
    pupils_mm=TRAIN_PUPILS_MM,
    first_index: int = 0,
    n_layers: tuple[int, int] = (2, 6),
    fs_planes: int | None = None,
) -> TrainingDataset:
    """Procedural scenes ``first_index .. first_index + n_scenes - 1`` with a focal stack per pupil size.

    Held-out sets use a different ``first_index`` under the same seed.
    """
    fs_schedule = evenly_spaced_schedule(cfg, fs_planes) if fs_planes else None
    scenes, stacks = [], {}
    for i in range(n_scenes):
        sub = scene_seed(seed, first_index + i)
        rng = np.random.default_rng(sub)
        layers = int(rng.integers(n_layers[0], n_layers[1] + 1))
        texture = "polygons" if rng.random() < 0.5 else "noise"
        scene = generate_scene(sub, layers, texture, cfg)
        scenes.append(scene)
        for s in pupils_mm:
            stacks[(i, float(s))] = make_sample(scene, s, cfg, fs_schedule=fs_schedule)
    return TrainingDataset(scenes, tuple(float(s) for s in pupils_mm), stacks, cfg, fs_schedule)


def dataset_from_scenes(scenes, cfg: OpticalConfig, pupils_mm=TRAIN_PUPILS_MM, fs_planes: int | None = None) -> TrainingDataset:
    fs_schedule = evenly_spaced_schedule(cfg, fs_planes) if fs_planes else None
    stacks = {
        (i, float(s)): make_sample(scene, s, cfg, fs_schedule=fs_schedule)
        for i, scene in enumerate(scenes)
        for s in pupils_mm
    }
    return TrainingDataset(list(scenes), tuple(float(s) for s in pupils_mm), stacks, cfg, fs_schedule)


# --------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    step: int = 0
    seed: int = 0
    optimizer: dict = field(default_factory=dict)
    loss: float = math.nan
    loss_rec: float = math.nan
    loss_perp: float = math.nan
    log: list[dict] = field(default_factory=list)

    def save(self, directory: str | Path, net) -> Path:
        """Network checkpoint plus optimizer moments (HFT1) and a JSON state file."""
        directory = Path(directory)
        save_checkpoint(net, directory / "net")
        opt_dir = directory / "optim"
        opt_dir.mkdir(parents=True, exist_ok=True)
        meta = {"step": self.step, "seed": self.seed, "loss": self.loss, "loss_rec": self.loss_rec,
                "loss_perp": self.loss_perp, "param_groups": self.optimizer.get("param_groups", []), "state": {}}
        for pid, st in self.optimizer.get("state", {}).items():
            entry = {"step": float(st["step"])}
            for key in ("exp_avg", "exp_avg_sq"):
                fname = f"p{int(pid):03d}_{key}.hft"
                save_hft(opt_dir / fname, st[key].detach().cpu().numpy())
                entry[key] = fname
            meta["state"][str(pid)] = entry
        (directory / "state.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        write_log(directory / "log.csv", self.log)
        return directory

    @classmethod
    def load(cls, directory: str | Path):
        """Returns (state, net)."""
        directory = Path(directory)
        net = load_checkpoint(directory / "net")
        meta = json.loads((directory / "state.json").read_text())
        opt_state = {}
        for pid, entry in meta["state"].items():
            opt_state[int(pid)] = {
                "step": torch.tensor(entry["step"]),
                "exp_avg": torch.from_numpy(np.ascontiguousarray(load_hft(directory / "optim" / entry["exp_avg"]))),
                "exp_avg_sq": torch.from_numpy(np.ascontiguousarray(load_hft(directory / "optim" / entry["exp_avg_sq"]))),
            }
        log = read_log(directory / "log.csv") if (directory / "log.csv").exists() else []
        state = cls(meta["step"], meta["seed"], {"state": opt_state, "param_groups": meta["param_groups"]},
                    meta["loss"], meta["loss_rec"], meta["loss_perp"], log)
        return state, net


def write_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"step": int(r["step"]), "loss": float(r["loss"]), "loss_rec": float(r["loss_rec"]),
             "loss_perp": float(r["loss_perp"]), "s": float(r["s"]), "scene_id": int(r["scene_id"])}
            for r in csv.DictReader(fh)
        ]


# --------------------------------------------------------------------------
# loop


def forward_sample(net, dataset: TrainingDataset, scene_id: int, s_mm: float):
    """Predicted SLM hologram for one dataset item."""
    if isinstance(net, FocalStackNet):
        sample = dataset.sample(scene_id, s_mm)
        if sample.fs_input is None or dataset.fs_schedule is None:
            raise DatasetError("dataset has no focal-stack inputs for the focal-stack predictor")
        return net(sample.fs_input, dataset.fs_schedule.u, s_mm)
    return net.predict(dataset.scenes[scene_id], s_mm)


def train(
    dataset: TrainingDataset,
    net: HologramNet | FocalStackNet,
    loss_cfg: LossConfig | None = None,
    epochs: float | None = 1,
    seed: int = 0,
    *,
    steps: int | None = None,
    lr: float = 1e-4,
    state: TrainState | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    callback=None,
) -> TrainState:
    """Adam, batch size 1. Each step draws (scene, s) uniformly from a counter-based RNG.

    ``steps`` is the total step count; otherwise ``epochs`` passes over all
    (scene, pupil) pairs. Passing a loaded ``state`` resumes where it stopped.
    """
    loss_cfg = loss_cfg or LossConfig()
    dataset.validate()
    n_pairs = len(dataset.scenes) * len(dataset.pupils_mm)
    total = steps if steps is not None else int(round(epochs * n_pairs))
    state = state or TrainState(seed=seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    if state.optimizer:
        opt.load_state_dict(state.optimizer)
        for group in opt.param_groups:
            group["lr"] = lr
    net.train()
    while state.step < total:
        t = state.step
        rng = step_rng(state.seed, t)
        scene_id = int(rng.integers(len(dataset.scenes)))
        s_mm = dataset.pupils_mm[int(rng.integers(len(dataset.pupils_mm)))]
        sample = dataset.sample(scene_id, s_mm)
        subset = draw_subset(rng, sample.schedule.M, loss_cfg.perp_subset_size)
        opt.zero_grad()
        holo = forward_sample(net, dataset, scene_id, s_mm)
        P = reconstruct_planes(holo, sample.schedule, dataset.cfg)
        loss, rec, perp = total_loss(P, sample.targets, sample.weights, loss_cfg, subset)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {t}")
        loss.backward()
        opt.step()
        state.step = t + 1
        state.loss, state.loss_rec, state.loss_perp = float(loss.detach()), float(rec.detach()), float(perp.detach())
        state.log.append({"step": t, "loss": state.loss, "loss_rec": state.loss_rec, "loss_perp": state.loss_perp,
                          "s": float(s_mm), "scene_id": scene_id})
        if callback is not None:
            callback(state)
        if checkpoint_dir and checkpoint_every and state.step % checkpoint_every == 0:
            state.optimizer = opt.state_dict()
            state.save(checkpoint_dir, net)
    state.optimizer = opt.state_dict()
    if log_path:
        write_log(log_path, state.log)
    if checkpoint_dir:
        state.save(checkpoint_dir, net)
    net.eval()
    return state


# --------------------------------------------------------------------------
# evaluation


def evaluate(net, dataset: TrainingDataset) -> list[dict]:
    """In-focus-weighted PSNR, PSNR and SSIM (mean over planes) for every (scene, pupil)."""
    from .metrics import psnr, ssim, weighted_psnr

    rows = []
    with torch.no_grad():
        for i in range(len(dataset.scenes)):
            for s in dataset.pupils_mm:
                sample = dataset.sample(i, s)
                P = reconstruct_planes(forward_sample(net, dataset, i, s), sample.schedule, dataset.cfg)
                R = sample.targets
                rows.append({
                    "scene_id": i,
                    "s": s,
                    "wpsnr": weighted_psnr(P, R, sample.weights),
                    "psnr": psnr(P, R),
                    "ssim": float(np.mean([ssim(P[k], R[k]) for k in range(len(P))])),
                })
    return rows
