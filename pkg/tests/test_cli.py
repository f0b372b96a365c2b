import os

import numpy as np
import pytest
from PIL import Image

from dynfield.cli import main, parse_edit_ops
from dynfield.config import ConfigError, RunConfig, dump_config, parse_config

TINY = """
# tiny smoke configuration
scene = orbit
k = 3
width = 16
height = 16
latent_dim = 16
steps = 2
batch_rays = 8
n_samples = 4
eval_samples = 4
solver_n = 1
eval_solver = euler_bins
eval_solver_n = 1
corr_rays = 2
mf_points = 2
smooth_points = 2
log_every = 0
checkpoint_every = 0
"""


def test_parse_config_defaults_and_overrides():
    cfg = parse_config("")
    assert cfg == RunConfig()
    cfg = parse_config("steps = 7\nlr = 1e-3\nscene = linear\n")
    assert cfg.steps == 7 and cfg.lr == 1e-3 and cfg.scene == "linear"


def test_parse_config_rejects_unknown_and_garbage():
    with pytest.raises(ConfigError):
        parse_config("stepz = 7\n")
    with pytest.raises(ConfigError):
        parse_config("just words\n")
    with pytest.raises(ConfigError):
        parse_config("steps = many\n")


def test_config_roundtrip():
    cfg = parse_config("steps = 42\nw_corr = 2.5\n")
    again = parse_config(dump_config(cfg))
    assert again == cfg


def test_parse_edit_ops():
    edit, swap = parse_edit_ops("flip;translate:0.1,0,0;swap-bg:/x/y")
    assert swap == "/x/y"
    assert len(edit.branches) == 1
    dup, _ = parse_edit_ops("duplicate:1,0,0")
    assert len(dup.branches) == 2
    ident, _ = parse_edit_ops("flip:1,0.2;flip:1,0.2")
    assert ident.is_identity()
    with pytest.raises(ValueError):
        parse_edit_ops("rotate:1")


def _read_rgbs(path):
    out = []
    i = 0
    while os.path.exists(os.path.join(path, "rgb", f"{i:04d}.png")):
        out.append(np.asarray(Image.open(
            os.path.join(path, "rgb", f"{i:04d}.png"))))
        i += 1
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "run.cfg"
    cfg_path.write_text(TINY)
    data = str(root / "data")
    run = str(root / "run")
    rend = str(root / "render")
    assert main(["synth", "--config", str(cfg_path), "--out", data]) == 0
    assert main(["train", "--config", str(cfg_path), "--data", data,
                 "--out", run]) == 0
    ckpt = os.path.join(run, "checkpoint.bin")
    assert main(["render", "--config", str(cfg_path), "--ckpt", ckpt,
                 "--data", data, "--protocol", "fixed-view",
                 "--out", rend]) == 0
    return root, str(cfg_path), data, run, rend


def test_cli_synth_train_render(pipeline):
    root, cfg_path, data, run, rend = pipeline
    assert os.path.exists(os.path.join(data, "manifest.txt"))
    assert os.path.exists(os.path.join(run, "losses.csv"))
    for out in (data, run, rend):
        assert os.path.exists(os.path.join(out, "run_manifest.txt"))
    manifest = open(os.path.join(run, "run_manifest.txt")).read()
    assert "config_hash=" in manifest and "checkpoint_hash=" in manifest
    assert len(_read_rgbs(rend)) == 3


def test_cli_render_writes_flow_outputs(pipeline):
    root, cfg_path, data, run, rend = pipeline
    # forward flow exists for frames 0..K-2, backward for 1..K-1
    raw = np.fromfile(os.path.join(rend, "flow_fw", "0000.f32"),
                      dtype="<f4")
    assert raw.shape == (16 * 16 * 2,)
    assert np.isfinite(raw).all()
    wheel = np.asarray(Image.open(
        os.path.join(rend, "flow_fw", "0000.png")))
    assert wheel.shape == (16, 16, 3)
    assert os.path.exists(os.path.join(rend, "flow_bw", "0002.f32"))
    assert not os.path.exists(os.path.join(rend, "flow_bw", "0000.f32"))


def test_cli_eval_report(pipeline):
    root, cfg_path, data, run, rend = pipeline
    report = str(root / "report.txt")
    assert main(["eval", "--pred", rend, "--gt", data,
                 "--report", report]) == 0
    text = open(report).read()
    assert "mean_psnr=" in text and "mean_ssim=" in text
    assert "frame_0002_psnr=" in text


def test_cli_eval_self_comparison_perfect(pipeline, tmp_path):
    root, cfg_path, data, run, rend = pipeline
    report = str(tmp_path / "self.txt")
    assert main(["eval", "--pred", data, "--gt", data,
                 "--report", report]) == 0
    kv = dict(line.split("=", 1) for line in open(report).read().splitlines())
    assert float(kv["mean_psnr"]) == 99.0
    np.testing.assert_allclose(float(kv["mean_ssim"]), 1.0, atol=1e-12)


def test_cli_edit_involution_bit_identical(pipeline, tmp_path):
    root, cfg_path, data, run, rend = pipeline
    ckpt = os.path.join(run, "checkpoint.bin")
    edited = str(tmp_path / "edited")
    assert main(["edit", "--config", cfg_path, "--ckpt", ckpt,
                 "--data", data, "--ops", "flip:1,0.2;flip:1,0.2",
                 "--out", edited]) == 0
    for a, b in zip(_read_rgbs(rend), _read_rgbs(edited)):
        np.testing.assert_array_equal(a, b)


def test_cli_errors_are_reported(pipeline, tmp_path, capsys):
    root, cfg_path, data, run, rend = pipeline
    assert main(["render", "--ckpt", str(tmp_path / "no.bin"),
                 "--data", data, "--out", str(tmp_path / "r")]) == 1
    assert "missing checkpoint" in capsys.readouterr().err
    assert main(["eval", "--pred", str(tmp_path / "empty"), "--gt", data,
                 "--report", str(tmp_path / "rep.txt")]) == 1
