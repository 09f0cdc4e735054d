import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest
import torch

from dcchi.cli import build_parser, load_simulation, main, parse_config_file
from dcchi.core import PanImage, SceneTeX, SpectralCube, WavelengthGrid, load_cube, load_pan, save_cube, save_pan
from dcchi.net import loss_measure
from dcchi.tex import band_planck_grid, tex_synthesize

GRID = WavelengthGrid.linspace(8000, 11500, 4)


def run(*argv):
    return main([str(a) for a in argv])


# -- simulate ----------------------------------------------------------------


def test_simulate_noiseless_roundtrip(tmp_path):
    assert run("simulate", "--out", tmp_path / "s", "--height", 16, "--width", 16, "--bands", 4) == 0
    meas, truth = load_simulation(tmp_path / "s")
    assert loss_measure(truth, meas.mask, meas.disp, meas.response, meas) == 0.0


def test_simulate_output_width(tmp_path):
    run("simulate", "--out", tmp_path / "s", "--height", 8, "--width", 12, "--bands", 5, "--disp-step", 2)
    m = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert m["shapes"]["y_cassi"] == [8, 12 + 2 * 4]
    assert load_cube(tmp_path / "s" / "y_cassi.hsc").shape == (8, 20, 1)


def test_simulate_from_cube_and_manifest_replay(tmp_path, rng):
    cube = SpectralCube(rng.random((6, 7, 3)).astype(np.float32), WavelengthGrid.linspace(400, 700, 3))
    save_cube(cube, tmp_path / "c.hsc")
    run("simulate", "--cube", tmp_path / "c.hsc", "--out", tmp_path / "a", "--noise-sigma", 0.05,
        "--noise-seed", 9, "--mask-seed", 4)
    run("simulate", "--manifest", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b")
    for name in ("y_cassi.hsc", "y_pan.hsc", "mask.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_config_errors_listed(tmp_path, capsys):
    assert run("simulate", "--out", tmp_path, "--noise-sigma", -1, "--mask-p", 1.5, "--disp-step", -2) == 2
    err = capsys.readouterr().err
    assert err.count("config error") == 3


def test_simulate_missing_cube_is_data_error(tmp_path):
    assert run("simulate", "--cube", tmp_path / "nope.hsc", "--out", tmp_path / "o") == 3


def test_unknown_flag_fails_fast(tmp_path):
    assert run("simulate", "--out", tmp_path, "--bogus", 1) == 2
    assert run("frobnicate") == 2


def test_help_lists_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
    assert set(sub.choices) == {"simulate", "synthesize", "scan-check", "scan-order", "train-toy", "eval"}


def test_help_subprocess():
    out = subprocess.run([sys.executable, "-m", "dcchi.cli", "train-toy", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for flag in ("--no-tex-head", "--no-loss-m", "--bfr", "--config", "--manifest"):
        assert flag in out.stdout


def test_threads_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv("DCCHI_THREADS", "1")
    before = torch.get_num_threads()
    assert run("--threads", 3, "scan-order", "--height", 4, "--width", 4, "--out", tmp_path / "o.pgm") == 0
    assert torch.get_num_threads() == 1
    torch.set_num_threads(before)


# -- synthesize --------------------------------------------------------------


def write_tex_inputs(tmp_path, rng, e_value=None):
    T = rng.uniform(280, 330, (5, 6))
    e = rng.uniform(0, 1, (5, 6)) if e_value is None else np.full((5, 6), e_value)
    X = SpectralCube(rng.uniform(0, 1, (5, 6, 4)).astype(np.float32), GRID)
    save_pan(PanImage(T), tmp_path / "T.pgm")
    save_pan(PanImage(e), tmp_path / "e.pgm")
    save_cube(X, tmp_path / "X.hsc")
    return tmp_path / "T.pgm", tmp_path / "e.pgm", tmp_path / "X.hsc"


def synth(paths, out):
    return run("synthesize", "--temperature", paths[0], "--emissivity", paths[1], "--texture", paths[2],
               "--out", out)


def test_synthesize_matches_library_bitwise(tmp_path, rng):
    paths = write_tex_inputs(tmp_path, rng)
    assert synth(paths, tmp_path / "out.hsc") == 0
    scene = SceneTeX(load_pan(paths[0]).data.astype(np.float64), load_pan(paths[1]).data.astype(np.float64),
                     load_cube(paths[2]).data, GRID)
    lib = tex_synthesize(scene, GRID)
    assert load_cube(tmp_path / "out.hsc") == lib
    assert json.loads((tmp_path / "out.hsc.json").read_text())["radiance_scale"] == 0.05


def test_synthesize_e_zero_gives_texture(tmp_path, rng):
    paths = write_tex_inputs(tmp_path, rng, e_value=0.0)
    synth(paths, tmp_path / "out.hsc")
    assert load_cube(tmp_path / "out.hsc") == load_cube(paths[2])


def test_synthesize_e_one_gives_planck(tmp_path, rng):
    paths = write_tex_inputs(tmp_path, rng, e_value=1.0)
    synth(paths, tmp_path / "out.hsc")
    T = load_pan(paths[0]).data.astype(np.float64)
    want = (0.05 * band_planck_grid(T, GRID)).astype(np.float32)
    np.testing.assert_array_equal(load_cube(tmp_path / "out.hsc").data, want)


def test_synthesize_size_mismatch(tmp_path, rng):
    paths = write_tex_inputs(tmp_path, rng)
    save_pan(PanImage(np.ones((3, 3))), tmp_path / "small.pgm")
    assert synth((tmp_path / "small.pgm", paths[1], paths[2]), tmp_path / "o.hsc") == 3


# -- scan-order / scan-check -------------------------------------------------


def test_scan_order_pgm(tmp_path):
    assert run("scan-order", "--height", 16, "--width", 16, "--bfr", 0.7, "--out", tmp_path / "o.pgm") == 0
    assert int((load_pan(tmp_path / "o.pgm").data == 1).sum()) == 179
    assert run("scan-order", "--bfr", 1.2, "--out", tmp_path / "x.pgm") == 2


def test_scan_check_small(tmp_path, capsys):
    code = run("scan-check", "--instances", 10, "--max-len", 200, "--max-state", 4, "--min-log2", 8,
               "--max-log2", 12, "--timing-csv", tmp_path / "t.csv")
    out = capsys.readouterr().out
    assert "scan equivalence" in out
    with open(tmp_path / "t.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["L"]) for r in rows] == [256, 512, 1024, 2048, 4096]
    # short sweeps are noisy, so only the exit code contract is checked here
    assert code in (0, 4)


# -- train-toy ---------------------------------------------------------------


def test_config_file_parsing(tmp_path):
    (tmp_path / "c.cfg").write_text("# toy\n[train]\niterations = 3\nbfr = 0.5\ntex_head = false\nname = 'x'\n")
    assert parse_config_file(tmp_path / "c.cfg") == {"iterations": 3, "bfr": 0.5, "tex_head": False, "name": "x"}


def test_train_toy_rejects_all_bad_keys(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("iterations = 2\nfoo = 1\nbar = 2\ndepth = 0\n")
    assert run("train-toy", "--config", tmp_path / "c.cfg", "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "foo" in err and "bar" in err and "depth" in err
    assert not (tmp_path / "o").exists()


def test_train_toy_bfr_sweep_and_replay(tmp_path):
    (tmp_path / "c.cfg").write_text("iterations = 2\nheight = 8\nwidth = 8\nbands = 3\nchannels = 4\nstate_size = 4\n")
    assert run("train-toy", "--config", tmp_path / "c.cfg", "--out", tmp_path / "a", "--no-tex-head",
               "--no-loss-m", "--bfr", 0.3, 0.5, 0.7, 0.8, 0.9) == 0
    with open(tmp_path / "a" / "bfr_sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["bfr"]) for r in rows] == [0.3, 0.5, 0.7, 0.8, 0.9]
    assert all(r["tex_head"] == "False" and r["loss_m"] == "False" for r in rows)
    with open(tmp_path / "a" / "train_bfr0.7.csv", newline="") as fh:
        assert all(float(r["L_m"]) == 0.0 for r in csv.DictReader(fh))
    assert run("train-toy", "--manifest", tmp_path / "a" / "config.json", "--out", tmp_path / "b") == 0
    for b in ("0.3", "0.9"):
        assert (tmp_path / "a" / f"weights_bfr{b}.bin").read_bytes() == (tmp_path / "b" / f"weights_bfr{b}.bin").read_bytes()


def test_train_toy_numerical_failure(tmp_path, monkeypatch):
    import importlib

    from dcchi.train import NumericalError

    train_mod = importlib.import_module("dcchi.train")

    def boom(*a, **k):
        raise NumericalError("loss diverged")

    monkeypatch.setattr(train_mod, "train", boom)
    (tmp_path / "c.cfg").write_text("iterations = 1\nheight = 8\nwidth = 8\nbands = 3\nchannels = 4\n")
    assert run("train-toy", "--config", tmp_path / "c.cfg", "--out", tmp_path / "o") == 4


# -- eval --------------------------------------------------------------------


def test_eval_csv(tmp_path, rng, capsys):
    a = SpectralCube(rng.random((12, 12, 2)).astype(np.float32), GRID.linspace(400, 500, 2))
    b = SpectralCube(np.clip(a.data + 0.05, 0, None), a.grid)
    save_cube(a, tmp_path / "t.hsc")
    save_cube(b, tmp_path / "p.hsc")
    assert run("eval", "--pred", tmp_path / "p.hsc", "--truth", tmp_path / "t.hsc", "--residual", tmp_path / "r.pgm") == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["band"] for r in rows] == ["0", "1", "mean"]
    assert float(rows[0]["psnr_db"]) > 0
    assert load_pan(tmp_path / "r.pgm").shape == (12, 12)


def test_eval_bad_magic(tmp_path):
    (tmp_path / "x.hsc").write_bytes(b"XXXX" + bytes(16))
    assert run("eval", "--pred", tmp_path / "x.hsc", "--truth", tmp_path / "x.hsc") == 3
