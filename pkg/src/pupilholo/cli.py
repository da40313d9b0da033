"""Command-line entry point: ``pupilholo <command> [--config PATH] [--seed N] ...``.

Exit codes: 0 success, 2 bad or missing input, 3 numerical failure. Every
command ends by printing one ``RESULT key=value ...`` line.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .autodiff import deterministic, load_hft, save_hft
from .io import ConfigKeyError, RunConfig, tree_digest, write_csv, write_energy_png, write_phase_png16, write_png8, write_strip
from .optics import DomainError, FocalSchedule, PupilSpec, plan_focal_schedule

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
BUNDLED_CONFIGS = ("fixture64",)


class InputError(Exception):
    pass


def load_config(arg: str | None) -> RunConfig:
    if arg is None:
        return RunConfig()
    if arg in BUNDLED_CONFIGS:
        text = resources.files("pupilholo").joinpath(f"configs/{arg}.json").read_text()
        return RunConfig.from_dict(json.loads(text))
    path = Path(arg)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        return RunConfig.load(path)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def result_line(**kv) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    return "RESULT " + " ".join(f"{k}={fmt(v)}" for k, v in kv.items())


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def _save_field(path: Path, field) -> None:
    f = field.field.detach()
    save_hft(path, torch.stack([f.real, f.imag]).numpy())


def _load_field(path: Path):
    from .wave_optics import ComplexField

    if not path.exists():
        raise InputError(f"hologram not found: {path}")
    arr = torch.from_numpy(np.ascontiguousarray(load_hft(path)))
    if arr.dim() != 3 or arr.shape[0] != 2:
        raise InputError(f"{path}: expected a [2, H, W] real/imag tensor")
    return ComplexField(torch.complex(arr[0], arr[1]))


# --------------------------------------------------------------------------
# dataset on disk


def _stack_dirname(s: float) -> str:
    return f"stack_s{s:.1f}"


def render_dataset(cfg: RunConfig, seed: int, out: Path, n_scenes: int | None = None, first_index: int = 0) -> dict:
    """Layout: scene_<seed>/{rgb.png, rgb.hft, depth.hft, meta.json, stack_s<mm>/{plane_<k>.png, stack.hft, coc.hft, schedule.csv}}."""
    from .scene_synth import generate_scene, render_focal_stack
    from .training import scene_seed

    optics = cfg.optics()
    n = cfg.n_scenes if n_scenes is None else n_scenes
    n_stacks = 0
    for i in range(n):
        sub = scene_seed(seed, first_index + i)
        rng = np.random.default_rng(sub)
        layers = int(rng.integers(2, 7))
        texture = "polygons" if rng.random() < 0.5 else "noise"
        scene = generate_scene(sub, layers, texture, optics)
        sdir = out / f"scene_{sub}"
        sdir.mkdir(parents=True, exist_ok=True)
        save_hft(sdir / "rgb.hft", scene.rgb.astype(np.float32))
        save_hft(sdir / "depth.hft", scene.depth.astype(np.float32))
        write_png8(sdir / "rgb.png", scene.rgb)
        meta = {"index": first_index + i, "seed": sub, "layers": layers, "texture": texture,
                "layer_depths_m": [layer.depth for layer in scene.layers]}
        (sdir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        for s in cfg.pupils_mm:
            pupil = PupilSpec(s)
            stack = render_focal_stack(scene, pupil, plan_focal_schedule(optics, pupil), optics)
            d = sdir / _stack_dirname(s)
            d.mkdir(parents=True, exist_ok=True)
            stack.schedule.to_csv(d / "schedule.csv")
            save_hft(d / "stack.hft", stack.images.astype(np.float32))
            save_hft(d / "coc.hft", stack.coc_maps.astype(np.float32))
            for k in range(stack.M):
                write_png8(d / f"plane_{k:03d}.png", stack.images[k])
            n_stacks += 1
    cfg.save(out / "config.json")
    return {"scenes": n, "stacks": n_stacks}


def load_dataset(root: Path, cfg: RunConfig):
    """Rebuild a TrainingDataset from a rendered directory (scene order from meta.json)."""
    from .optics import C_MIN_PX, coc_weight_map
    from .scene_synth import SceneRGBD
    from .training import StackSample, TrainingDataset

    optics = cfg.optics()
    scene_dirs = sorted(root.glob("scene_*"), key=lambda d: json.loads((d / "meta.json").read_text())["index"])
    if not scene_dirs:
        raise InputError(f"no scenes under {root}")
    scenes, stacks = [], {}
    for i, sdir in enumerate(scene_dirs):
        rgb = load_hft(sdir / "rgb.hft").astype(np.float64)
        depth = load_hft(sdir / "depth.hft").astype(np.float64)
        scenes.append(SceneRGBD(rgb, depth, [], json.loads((sdir / "meta.json").read_text())["seed"]))
        for s in cfg.pupils_mm:
            d = sdir / _stack_dirname(s)
            if not d.exists():
                continue
            sched = FocalSchedule.from_csv(d / "schedule.csv")
            images = torch.from_numpy(load_hft(d / "stack.hft"))[:, 1].contiguous()
            coc = load_hft(d / "coc.hft").astype(np.float64)
            W = torch.as_tensor(coc_weight_map(coc, C_MIN_PX), dtype=torch.float32)
            stacks[(i, float(s))] = StackSample(sched, images, W)
    return TrainingDataset(scenes, cfg.pupils_mm, stacks, optics)


# --------------------------------------------------------------------------
# commands


def cmd_render_dataset(args) -> str:
    cfg = load_config(args.config)
    out = _out_dir(args)
    info = render_dataset(cfg, _seed(args, cfg), out)
    return result_line(**info, digest=tree_digest(out)[:16])


def _build_net(cfg: RunConfig, seed: int):
    from .adc_net import HologramNet, NetConfig

    net_cfg = NetConfig(depth=cfg.net_depth, width=cfg.net_width, variant=cfg.net_variant,
                        resolution=(cfg.resolution_px, cfg.resolution_px), seed=seed)
    return HologramNet(net_cfg, cfg.optics())


def cmd_train(args) -> str:
    from .training import TrainState, build_dataset, evaluate, train

    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    data_dir = Path(args.dataset) if args.dataset else None
    if data_dir is not None:
        if not data_dir.exists():
            raise InputError(f"dataset not found: {data_dir}")
        dataset = load_dataset(data_dir, cfg)
    else:
        dataset = build_dataset(cfg.n_scenes, cfg.optics(), seed, cfg.pupils_mm)
    state = None
    if args.resume:
        if not Path(args.resume).exists():
            raise InputError(f"checkpoint not found: {args.resume}")
        state, net = TrainState.load(args.resume)
    else:
        net = _build_net(cfg, seed)
    state = train(dataset, net, cfg.loss(), seed=seed, steps=cfg.train_steps, lr=cfg.learning_rate, state=state,
                  log_path=out / "log.csv", checkpoint_dir=out / "checkpoint")
    kv = {"steps": state.step, "loss": state.loss}
    if cfg.holdout_scenes:
        held = build_dataset(cfg.holdout_scenes, cfg.optics(), seed, cfg.pupils_mm, first_index=10_000)
        rows = evaluate(net, held)
        write_csv(out / "holdout.csv", ["scene_id", "s", "wpsnr", "psnr", "ssim"], rows)
        kv["holdout_wpsnr"] = float(np.mean([r["wpsnr"] for r in rows]))
    return result_line(**kv)


def cmd_optimize(args) -> str:
    from .metrics import psnr, weighted_psnr
    from .losses import reconstruct_planes
    from .phase_retrieval import OptimizeSpec, focal_weights, sgd_focal_optimize
    from .scene_synth import generate_scene, render_focal_stack
    from .training import evenly_spaced_schedule
    from .wave_optics import double_phase_encode, normalize_amplitude

    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    optics = cfg.optics()
    s = args.pupil_mm if args.pupil_mm is not None else cfg.pupils_mm[0]
    scene = generate_scene(seed, 4, "polygons", optics)
    stack = render_focal_stack(scene, PupilSpec(s), evenly_spaced_schedule(optics, cfg.optimize_planes), optics)
    t0 = time.perf_counter()
    res = sgd_focal_optimize(stack, OptimizeSpec(cfg.optimize_iterations, cfg.optimize_step_size, seed=seed), optics)
    elapsed = time.perf_counter() - t0
    with torch.no_grad():
        P = reconstruct_planes(res.hologram, stack.schedule, optics)
    R = stack.channel(1)
    W = focal_weights(stack, optics)
    _save_field(out / "hologram.hft", res.hologram)
    stack.schedule.to_csv(out / "schedule.csv")
    normed, _ = normalize_amplitude(res.hologram)
    write_phase_png16(out / "hologram_phase.png", double_phase_encode(normed))
    write_strip(out / "reconstruction.png", [*P.clamp(0, 1)])
    write_strip(out / "target.png", list(R))
    return result_line(psnr=psnr(P, R), wpsnr=weighted_psnr(P, R, W), iterations=cfg.optimize_iterations,
                       best_loss=res.best_loss, seconds=round(elapsed, 1))


def cmd_simulate_view(args) -> str:
    from .wave_optics import eyebox_energy_map, energy_entropy, simulate_pupil_view

    cfg = load_config(args.config)
    optics = cfg.optics()
    out = _out_dir(args)
    if not args.hologram:
        raise InputError("--hologram is required")
    holo = _load_field(Path(args.hologram))
    if tuple(holo.shape) != optics.resolution:
        raise InputError(f"hologram {tuple(holo.shape)} does not match configured resolution {optics.resolution}")
    s = args.pupil_mm if args.pupil_mm is not None else cfg.pupils_mm[0]
    pupil = PupilSpec(s, (args.pupil_x_mm, args.pupil_y_mm))
    if args.schedule:
        sched = FocalSchedule.from_csv(args.schedule)
    else:
        sched = plan_focal_schedule(optics, PupilSpec(s))
    k = args.focus_index if args.focus_index is not None else sched.M // 2
    if not 0 <= k < sched.M:
        raise InputError(f"focus index {k} outside 0..{sched.M - 1}")
    with torch.no_grad():
        view = simulate_pupil_view(holo, pupil, float(sched.u[k]), optics)
        energy = eyebox_energy_map(holo)
    save_hft(out / "view.hft", view.numpy())
    peak = float(view.max()) if float(view.max()) > 0 else 1.0
    write_png8(out / "view.png", view / peak)
    write_energy_png(out / "eyebox_energy.png", energy)
    return result_line(pupil_mm=s, focus_index=k, u_m=float(sched.u[k]), mean_intensity=float(view.mean()),
                       entropy=energy_entropy(energy))


def cmd_analyze(args) -> str:
    from .adc_net import extract_offsets, load_checkpoint
    from .metrics import dof_trend, offset_depth_statistics
    from .scene_synth import generate_scene
    from .training import scene_seed

    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args)
    ck = Path(args.checkpoint) if args.checkpoint else None
    if ck is not None and (ck / "net" / "manifest.json").exists():
        ck = ck / "net"  # a training checkpoint keeps the network one level down
    if ck is None or not (ck / "manifest.json").exists():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    net = load_checkpoint(ck)
    optics = net.optics
    s_list = list(args.s_list) if args.s_list else list(cfg.pupils_mm)
    n_scenes = max(1, cfg.holdout_scenes)
    scenes = [generate_scene(scene_seed(seed, 10_000 + i), 4, "polygons", optics) for i in range(n_scenes)]
    rows = []
    net.set_instrument(True)
    for s in s_list:
        per_scene = [offset_depth_statistics(extract_offsets(net, sc, s), sc.depth, s, optics) for sc in scenes]
        means = np.mean([p.means for p in per_scene], axis=0)
        counts = np.sum([p.counts for p in per_scene], axis=0)
        top = means.max()
        norm = means / top if top > 0 else np.zeros_like(means)
        edges = per_scene[0].bin_edges_m
        for b in range(len(means)):
            rows.append({"s_mm": s, "bin": b, "d_near_m": float(edges[b]), "d_far_m": float(edges[b + 1]),
                         "mean_offset_px": float(means[b]), "normalized": float(norm[b]), "count": int(counts[b])})
    net.set_instrument(False)
    write_csv(out / "offsets.csv", ["s_mm", "bin", "d_near_m", "d_far_m", "mean_offset_px", "normalized", "count"], rows)
    dof_s = [1.0 + 0.5 * i for i in range(9)]
    dof_rows = dof_trend(scenes[0], dof_s, optics, net=net)
    write_csv(out / "dof.csv", ["diameter_mm", "focus", "out_of_focus_sharpness", "in_focus_sharpness"],
              [vars(r) for r in dof_rows])
    return result_line(offset_rows=len(rows), dof_rows=len(dof_rows))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pupilholo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config, or a bundled name (fixture64)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", default="out", help="output directory")
        return sp

    common(sub.add_parser("render-dataset", help="render scenes and per-pupil focal stacks"))
    sp = common(sub.add_parser("train", help="train the pupil-conditioned predictor"))
    sp.add_argument("--dataset", help="rendered dataset directory (rendered in memory when omitted)")
    sp.add_argument("--resume", help="training checkpoint directory to resume from")
    sp = common(sub.add_parser("optimize", help="SGD hologram for a procedural focal-stack fixture"))
    sp.add_argument("--pupil-mm", type=float)
    sp = common(sub.add_parser("simulate-view", help="retinal view of a hologram through an eye pupil"))
    sp.add_argument("--hologram", help="[2, H, W] HFT1 hologram (real, imag)")
    sp.add_argument("--pupil-mm", type=float)
    sp.add_argument("--pupil-x-mm", type=float, default=0.0)
    sp.add_argument("--pupil-y-mm", type=float, default=0.0)
    sp.add_argument("--focus-index", type=int)
    sp.add_argument("--schedule", help="schedule.csv; defaults to the plan for the pupil size")
    sp = common(sub.add_parser("analyze", help="offset statistics and depth-of-field trend of a checkpoint"))
    sp.add_argument("--checkpoint", help="network checkpoint directory")
    sp.add_argument("--s-list", type=float, nargs="+")
    return p


COMMANDS = {
    "render-dataset": cmd_render_dataset,
    "train": cmd_train,
    "optimize": cmd_optimize,
    "simulate-view": cmd_simulate_view,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    deterministic(args.seed or 0)
    try:
        line = COMMANDS[args.command](args)
    except (InputError, ConfigKeyError, FileNotFoundError, DomainError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(result_line(status="input_error"))
        return EXIT_INPUT
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        print(result_line(status="numeric_error"))
        return EXIT_NUMERIC
    print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
