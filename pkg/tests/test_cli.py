import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pupilholo.autodiff import load_hft, save_hft
from pupilholo.cli import main
from pupilholo.io import ConfigKeyError, RunConfig, read_csv, read_png, tree_digest, write_png8
from pupilholo.losses import reconstruct_planes
from pupilholo.optics import FocalSchedule
from pupilholo.wave_optics import ComplexField

from conftest import bandlimited_field

SMALL = {"resolution_px": 64, "n_scenes": 1, "net_depth": 10, "net_width": 4, "train_steps": 2, "holdout_scenes": 1}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    lines = capsys.readouterr().out.strip().splitlines()
    return code, lines[-1] if lines else ""


def parse_result(line):
    assert line.startswith("RESULT ")
    return dict(kv.split("=", 1) for kv in line.split()[1:])


def write_config(path, **kv):
    path.write_text(json.dumps(kv))
    return path


# --------------------------------------------------------------------------
# RunConfig


@given(
    res=st.sampled_from([32, 64, 128]),
    lr=st.floats(1e-6, 1e-2),
    pupils=st.lists(st.sampled_from([1.5, 2.0, 3.0, 4.0]), min_size=1, max_size=4),
)
def test_config_roundtrip(res, lr, pupils):
    cfg = RunConfig(resolution_px=res, learning_rate=lr, pupils_mm=tuple(pupils))
    again = RunConfig.from_dict(json.loads(cfg.dumps()))
    assert again == cfg and again.dumps() == cfg.dumps()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigKeyError, match="wavelength"):
        RunConfig.from_dict({"wavelength": 520})


def test_config_units_feed_optics():
    o = RunConfig(wavelength_nm=633, pitch_um=6.4, focal_length_mm=100).optics()
    assert o.wavelength == pytest.approx(633e-9) and o.pitch == pytest.approx(6.4e-6)
    assert o.focal_length == pytest.approx(0.1)


# --------------------------------------------------------------------------
# render-dataset


@pytest.fixture(scope="module")
def rendered(tmp_path_factory):
    root = tmp_path_factory.mktemp("render")
    cfg = write_config(root / "cfg.json", resolution_px=64, n_scenes=10)
    outs = []
    for name in ("a", "b"):
        assert main(["render-dataset", "--config", str(cfg), "--seed", "7", "--out", str(root / name)]) == 0
        outs.append(root / name)
    return outs


def test_render_twice_is_hash_equal(rendered):
    assert tree_digest(rendered[0]) == tree_digest(rendered[1])


def test_render_layout(rendered):
    stacks = sorted(rendered[0].glob("scene_*/stack_s*"))
    assert len(list(rendered[0].glob("scene_*"))) == 10 and len(stacks) == 30
    for sdir in rendered[0].glob("scene_*"):
        counts = [len(read_csv(sdir / f"stack_s{s:.1f}" / "schedule.csv")) for s in (2.0, 3.0, 4.0)]
        assert counts[0] <= counts[1] <= counts[2]
        assert load_hft(sdir / "stack_s2.0" / "stack.hft").shape == (counts[0], 3, 64, 64)


def test_rendered_dataset_trains(rendered, tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", **{**SMALL, "n_scenes": 10, "holdout_scenes": 0})
    code, line = run(capsys, "train", "--config", cfg, "--dataset", rendered[0], "--out", tmp_path / "t")
    assert code == 0 and parse_result(line)["steps"] == "2"


# --------------------------------------------------------------------------
# optimize / simulate-view / train / analyze


def test_optimize_fixture64(tmp_path, capsys):
    code, line = run(capsys, "optimize", "--config", "fixture64", "--out", tmp_path)
    res = parse_result(line)
    assert code == 0
    assert float(res["seconds"]) < 60 and float(res["wpsnr"]) >= 30.0
    assert (tmp_path / "hologram.hft").exists() and read_png(tmp_path / "hologram_phase.png").dtype == np.uint16


def test_simulate_view_full_eyebox_matches_reconstruction(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", resolution_px=64, pupils_mm=[2.0])
    field = bandlimited_field(64, 3)
    save_hft(tmp_path / "holo.hft", torch.stack([field.real, field.imag]).numpy())
    sched = FocalSchedule.from_distances([0.4, 0.5, 0.6], RunConfig(resolution_px=64).optics())
    sched.to_csv(tmp_path / "schedule.csv")
    code, _ = run(capsys, "simulate-view", "--config", cfg, "--hologram", tmp_path / "holo.hft", "--pupil-mm", 20,
                  "--schedule", tmp_path / "schedule.csv", "--focus-index", 1, "--out", tmp_path / "v")
    assert code == 0
    direct = reconstruct_planes(ComplexField(field), sched, RunConfig(resolution_px=64).optics())[1]
    write_png8(tmp_path / "direct.png", direct / direct.max())
    assert (tmp_path / "direct.png").read_bytes() == (tmp_path / "v" / "view.png").read_bytes()
    assert np.allclose(load_hft(tmp_path / "v" / "view.hft"), direct.numpy(), rtol=1e-5, atol=1e-7)


def test_train_and_analyze(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", **SMALL)
    code, line = run(capsys, "train", "--config", cfg, "--out", tmp_path / "t")
    res = parse_result(line)
    assert code == 0 and res["steps"] == "2" and "holdout_wpsnr" in res
    assert len(read_csv(tmp_path / "t" / "log.csv")) == 2
    code, line = run(capsys, "analyze", "--config", cfg, "--checkpoint", tmp_path / "t" / "checkpoint",
                     "--s-list", 2, 3, 4, "--out", tmp_path / "a")
    assert code == 0
    rows = read_csv(tmp_path / "a" / "offsets.csv")
    assert len(rows) == 5 * 3
    assert {r["bin"] for r in rows} == {"0", "1", "2", "3", "4"}


def test_resume_continues_step_count(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", **{**SMALL, "holdout_scenes": 0})
    assert run(capsys, "train", "--config", cfg, "--out", tmp_path / "t")[0] == 0
    cfg4 = write_config(tmp_path / "cfg4.json", **{**SMALL, "holdout_scenes": 0, "train_steps": 4})
    code, line = run(capsys, "train", "--config", cfg4, "--resume", tmp_path / "t" / "checkpoint", "--out", tmp_path / "r")
    assert code == 0 and parse_result(line)["steps"] == "4"


# --------------------------------------------------------------------------
# exit codes


@pytest.mark.parametrize(
    "argv",
    [
        ["optimize", "--config", "missing.json"],
        ["simulate-view", "--config", "fixture64"],
        ["simulate-view", "--config", "fixture64", "--hologram", "nope.hft"],
        ["analyze", "--checkpoint", "nowhere"],
        ["train", "--dataset", "nowhere"],
    ],
)
def test_missing_input_exits_2(argv, tmp_path, capsys):
    code, line = run(capsys, *argv, "--out", tmp_path)
    assert code == 2 and parse_result(line)["status"] == "input_error"


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", pupil_size=3)
    assert run(capsys, "optimize", "--config", cfg, "--out", tmp_path)[0] == 2


def test_numerical_failure_exits_3(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", resolution_px=64, optimize_step_size=1e30, optimize_iterations=20)
    code, line = run(capsys, "optimize", "--config", cfg, "--out", tmp_path)
    assert code == 3 and parse_result(line)["status"] == "numeric_error"


# --------------------------------------------------------------------------
# determinism


def test_commands_are_deterministic(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", **{**SMALL, "optimize_iterations": 40})
    for cmd in ("optimize", "train"):
        lines, digests = [], []
        for rep in range(2):
            out = tmp_path / f"{cmd}{rep}"
            code, line = run(capsys, cmd, "--config", cfg, "--seed", 3, "--out", out)
            assert code == 0
            lines.append(" ".join(kv for kv in line.split() if not kv.startswith("seconds=")))
            digests.append(tree_digest(out))
        assert lines[0] == lines[1]
        if cmd == "optimize":
            assert digests[0] == digests[1]
