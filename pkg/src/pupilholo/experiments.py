"""Desk-scale experiment drivers shared by scripts/ and the acceptance suite.

Long runs cache their summary (and checkpoint) under a directory keyed by the
config digest, so a rerun with an unchanged config reloads instead of retraining.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adc_net import HologramNet, NetConfig, extract_offsets, load_checkpoint, save_checkpoint
from .losses import LossConfig, reconstruct_planes
from .metrics import dof_trend, is_monotone_nonincreasing, offset_depth_statistics, weighted_psnr
from .optics import OpticalConfig, PupilSpec
from .phase_retrieval import LF_STUDY_OPTICS, OptimizeSpec, pupil_interval_study, sgd_focal_optimize
from .scene_synth import generate_scene, render_focal_stack
from .training import build_dataset, dataset_from_scenes, evaluate, train

DEFAULT_CACHE = Path(__file__).resolve().parents[2] / ".cache"


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _cached(cache_dir, name: str, cfg) -> tuple[Path, dict | None]:
    d = Path(cache_dir or DEFAULT_CACHE) / f"{name}-{_digest(asdict(cfg))}"
    summary = d / "summary.json"
    return d, json.loads(summary.read_text()) if summary.exists() else None


def _store(d: Path, summary: dict) -> dict:
    d.mkdir(parents=True, exist_ok=True)
    (d / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# --------------------------------------------------------------------------
# single-scene overfit


@dataclass
class OverfitConfig:
    scene_seed: int = 0
    n_layers: int = 2
    texture: str = "noise"
    s_mm: float = 2.0
    steps: int = 2000
    lr: float = 1e-3
    net_depth: int = 14
    sgd_iterations: int = 500
    seed: int = 0


def run_overfit(cfg: OverfitConfig = OverfitConfig(), cache_dir=None, log=print) -> dict:
    """Network fitted to one scene, reported next to direct SGD on the same stack."""
    d, hit = _cached(cache_dir, "overfit", cfg)
    if hit is not None:
        return hit
    torch.manual_seed(cfg.seed)
    optics = OpticalConfig()
    scene = generate_scene(cfg.scene_seed, cfg.n_layers, cfg.texture, optics)
    ds = dataset_from_scenes([scene], optics, pupils_mm=(cfg.s_mm,))
    net = HologramNet(NetConfig(depth=cfg.net_depth, seed=cfg.seed), optics)
    t0 = time.perf_counter()
    train(ds, net, LossConfig(), steps=cfg.steps, lr=cfg.lr, seed=cfg.seed,
          callback=lambda st: st.step % 500 == 0 and log(f"overfit step {st.step} loss {st.loss:.5f}"))
    seconds = time.perf_counter() - t0
    net_wpsnr = evaluate(net, ds)[0]["wpsnr"]
    sample = ds.sample(0, cfg.s_mm)
    stack = render_focal_stack(scene, PupilSpec(cfg.s_mm), sample.schedule, optics)
    res = sgd_focal_optimize(stack, OptimizeSpec(cfg.sgd_iterations, 0.05), optics)
    with torch.no_grad():
        sgd_wpsnr = weighted_psnr(reconstruct_planes(res.hologram, stack.schedule, optics), sample.targets, sample.weights)
    return _store(d, {"net_wpsnr": net_wpsnr, "sgd_wpsnr": sgd_wpsnr, "steps": cfg.steps, "seconds": seconds})


# --------------------------------------------------------------------------
# toy training on procedural scenes


@dataclass
class ToyTrainingConfig:
    n_scenes: int = 50
    holdout_scenes: int = 10
    pupils_mm: tuple[float, ...] = (2.0, 3.0, 4.0)
    steps: int = 3000
    lr: float = 1e-4
    net_depth: int = 14
    seed: int = 0
    dof_s_mm: tuple[float, ...] = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0)
    offset_s_mm: tuple[float, ...] = (2.0, 3.0, 4.0)


@dataclass
class ToyTrainingResult:
    holdout_wpsnr: float
    wpsnr_by_s: dict
    dof_series: list[dict]  # one per (held-out scene, focus) with a non-empty defocus region
    offsets: list[dict]  # per pupil size: mean |offset| per depth quintile
    seconds: float
    checkpoint: str
    extra: dict = field(default_factory=dict)

    def dof_mean(self, focus: str, key: str = "sharpness") -> list[float]:
        """Held-out mean of one sharpness column per pupil size."""
        return np.nanmean([r[key] for r in self.dof_series if r["focus"] == focus], axis=0).tolist()

    @property
    def dof_monotone(self) -> bool:
        return all(is_monotone_nonincreasing(self.dof_mean(f)) for f in ("near", "far"))

    @property
    def dof_series_monotone(self) -> tuple[int, int]:
        ok = sum(is_monotone_nonincreasing(r["sharpness"]) for r in self.dof_series)
        return ok, len(self.dof_series)

    @property
    def offsets_edges_exceed_middle(self) -> int:
        return sum(r["means"][0] >= r["means"][2] and r["means"][4] >= r["means"][2] for r in self.offsets)


def _dof_series(net, scenes, s_list, optics) -> list[dict]:
    series = []
    for i, scene in enumerate(scenes):
        rows = dof_trend(scene, s_list, optics, net=net)
        for focus in ("near", "far"):
            oof = [r.out_of_focus_sharpness for r in rows if r.focus == focus]
            inf = [r.in_focus_sharpness for r in rows if r.focus == focus]
            if not np.isnan(oof).any():  # the in-focus column may be NaN when nothing is sharp at the largest pupil
                series.append({"scene": i, "focus": focus, "s_mm": list(s_list), "sharpness": oof, "in_focus": inf})
    return series


def _offset_report(net, scenes, s_list, optics) -> list[dict]:
    out = []
    net.set_instrument(True)
    try:
        for s in s_list:
            stats = [offset_depth_statistics(extract_offsets(net, sc, s), sc.depth, s, optics) for sc in scenes]
            counts = np.sum([st.counts for st in stats], axis=0)
            sums = np.sum([st.means * st.counts for st in stats], axis=0)
            means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
            out.append({"s_mm": float(s), "means": means.tolist(), "counts": counts.tolist()})
    finally:
        net.set_instrument(False)
    return out


def run_toy_training(cfg: ToyTrainingConfig = ToyTrainingConfig(), cache_dir=None, log=print) -> ToyTrainingResult:
    """Train on procedural scenes, then measure held-out quality, DoF trend and offset statistics."""
    d, hit = _cached(cache_dir, "toy", cfg)
    if hit is not None:
        return ToyTrainingResult(**hit)
    torch.manual_seed(cfg.seed)
    optics = OpticalConfig()
    ds = build_dataset(cfg.n_scenes, optics, cfg.seed, cfg.pupils_mm)
    held = build_dataset(cfg.holdout_scenes, optics, cfg.seed, cfg.pupils_mm, first_index=10_000)
    trained = d / "trained.json"
    if trained.exists():  # training finished earlier; only the evaluation is redone
        net, seconds = load_checkpoint(d / "net"), json.loads(trained.read_text())["seconds"]
    else:
        net = HologramNet(NetConfig(depth=cfg.net_depth, seed=cfg.seed), optics)
        d.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        train(ds, net, LossConfig(), steps=cfg.steps, lr=cfg.lr, seed=cfg.seed, log_path=d / "log.csv",
              callback=lambda st: st.step % 250 == 0 and log(f"train step {st.step} loss {st.loss:.5f}"))
        seconds = time.perf_counter() - t0
        save_checkpoint(net, d / "net")
        trained.write_text(json.dumps({"seconds": seconds}))
    rows = evaluate(net, held)
    by_s = {str(s): float(np.mean([r["wpsnr"] for r in rows if r["s"] == s])) for s in cfg.pupils_mm}
    result = ToyTrainingResult(
        holdout_wpsnr=float(np.mean([r["wpsnr"] for r in rows])),
        wpsnr_by_s=by_s,
        dof_series=_dof_series(net, held.scenes, cfg.dof_s_mm, optics),
        offsets=_offset_report(net, held.scenes, cfg.offset_s_mm, optics),
        seconds=seconds,
        checkpoint=str(d / "net"),
    )
    _store(d, asdict(result))
    return result


def load_toy_network(result: ToyTrainingResult):
    return load_checkpoint(result.checkpoint)


# --------------------------------------------------------------------------
# pupil-interval trend


@dataclass
class PupilIntervalConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    z_mm: tuple[float, ...] = (0.5, 1.0, 1.5)
    diameter_mm: float = 4.0
    iterations: int = 2000
    step_size: float = 0.05
    n_layers: int = 4


def run_pupil_interval_trend(cfg: PupilIntervalConfig = PupilIntervalConfig(), cache_dir=None) -> list[dict]:
    """One study per seed: entropy and centre-view PSNR for each pupil interval z."""
    d, hit = _cached(cache_dir, "lf", cfg)
    if hit is not None:
        return hit["runs"]
    runs = []
    for seed in cfg.seeds:
        scene = generate_scene(seed, cfg.n_layers, "polygons", LF_STUDY_OPTICS)
        rows = pupil_interval_study(scene, cfg.z_mm, cfg.diameter_mm, OptimizeSpec(cfg.iterations, cfg.step_size, seed=seed))
        runs.append({"seed": seed, "z_mm": [r.z_mm for r in rows], "entropy": [r.entropy for r in rows],
                     "center_psnr": [r.center_psnr for r in rows]})
    _store(d, {"runs": runs})
    return runs
