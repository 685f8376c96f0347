import json

import pytest

from cli_runs import cli
from quasiconf.raster import load_float_map, save_image
from quasiconf.synth import red_circle_spec, render_scene


@pytest.fixture()
def fixture_png(tmp_path):
    img, _ = render_scene(red_circle_spec(0.02, 48))
    save_image(img, tmp_path / "img.png")
    return tmp_path


def test_transform_rg_channels(fixture_png):
    res = cli(["transform", "rg", "img.png", "-o", "rg.dhcm"], fixture_png)
    assert res.returncode == 0, res.stderr
    fmap = load_float_map(fixture_png / "rg.dhcm")
    assert fmap.channels == 3 and fmap.height == 48


def test_transform_lbp_scales(fixture_png):
    res = cli(["transform", "lbp", "img.png", "--scales", "1:8", "-o", "l.dhcm"], fixture_png)
    assert res.returncode == 0, res.stderr
    assert load_float_map(fixture_png / "l.dhcm").channels == 2


def test_estimate_noise_stdout(fixture_png):
    res = cli(["estimate-noise", "img.png"], fixture_png)
    assert res.returncode == 0
    kv = dict(line.split("=") for line in res.stdout.split())
    assert abs(float(kv["sigma_r"]) / 0.02 - 1) < 0.5


def test_pipeline_streams_subset(fixture_png):
    res = cli(["pipeline", "img.png", "--streams", "rg", "-o", "out"], fixture_png)
    assert res.returncode == 0, res.stderr
    assert sorted(p.name for p in (fixture_png / "out").iterdir()) == [
        "img.diagnostics.jsonl", "img.rg.conf.dhcm", "img.rg.d2.dhcm", "img.rg.transform.dhcm"]


def test_missing_input_nonzero_and_no_artifacts(tmp_path):
    res = cli(["pipeline", "missing.png", "-o", "out"], tmp_path)
    assert res.returncode == 1 and res.stderr.startswith("error:")
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("args", [
    ["confidence", "nope.dhcm", "--k", "2", "--prior", "0.5", "-o", "c.dhcm"],
    ["pipeline", "img.png", "--streams", "hue", "-o", "out"],
    ["transform", "lbp", "img.png", "--scales", "1:80", "-o", "x.dhcm"],
    ["classify", "--model", "img.png", "img.png"],
])
def test_error_exit_codes(fixture_png, args):
    res = cli(args, fixture_png)
    assert res.returncode == 1
    assert "error:" in res.stderr and "Traceback" not in res.stderr


def test_bad_usage_exit_two(tmp_path):
    assert cli(["confidence"], tmp_path).returncode == 2
    assert cli(["--threads", "0", "synth", "-o", "x"], tmp_path).returncode == 2


def test_confidence_channel_range(fixture_png):
    cli(["transform", "rg", "img.png", "-o", "rg.dhcm"], fixture_png)
    res = cli(["confidence", "rg.dhcm", "--channel", "5", "--k", "2", "--prior", "0.5", "-o", "c"], fixture_png)
    assert res.returncode == 1


def test_calibration_json(tmp_path):
    res = cli(["eval", "calibration", "--fixture", "gray"], tmp_path)
    report = json.loads(res.stdout)
    assert report["rg"]["auc"] is None and report["rg"]["mean_conf_h0"] < 0.1


def test_calibration_on_synth_output(tmp_path):
    (tmp_path / "spec.cfg").write_text("scene = red-circle\nsize = 48\n")
    assert cli(["synth", "--spec", "spec.cfg", "-o", "s"], tmp_path).returncode == 0
    res = cli(["eval", "calibration", "--image", "s/red-circle-000.png",
               "--truth", "s/red-circle-000.truth.dhcm"], tmp_path)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["rg"]["auc"] > 0.95


def test_train_and_classify(tmp_path):
    (tmp_path / "spec.cfg").write_text("scene = classes\ncount = 3\nsize = 32\n")
    cli(["synth", "--spec", "spec.cfg", "-o", "s"], tmp_path)
    res = cli(["train", "--manifest", "s/manifest.tsv", "--kernels", "4", "--epochs", "30",
               "--streams", "rg,lbp,raw", "-o", "m.dhnm"], tmp_path)
    assert res.returncode == 0, res.stderr
    assert "samples=21" in res.stdout
    res = cli(["classify", "--model", "m.dhnm", "s/blue-circle-000.png"], tmp_path)
    lines = res.stdout.split()
    assert lines[0].startswith("class=")
    probs = [float(l.split("=")[1]) for l in lines[1:]]
    assert len(probs) == 7 and abs(sum(probs) - 1) < 1e-6


def test_global_flags_before_or_after_subcommand(tmp_path):
    assert cli(["--seed", "3", "synth", "-o", "a"], tmp_path).returncode == 0
    assert cli(["synth", "--seed", "3", "-o", "b"], tmp_path).returncode == 0
    assert (tmp_path / "a/gray-circle-000.png").read_bytes() == (tmp_path / "b/gray-circle-000.png").read_bytes()
