import json

import numpy as np
import pytest

from quasiconf.errors import ConfigError
from quasiconf.lbp import LbpScale
from quasiconf.noise import NoiseModel
from quasiconf.pipeline import (
    PipelineConfig, StageError, StreamConfig, analyze, artifact_names, config_from_kv, parse_kv,
    raw_tensor, run_pipeline, stream_tensors,
)
from quasiconf.raster import ImageRGB, load_float_map, save_image
from quasiconf.synth import red_circle_spec, render_scene


@pytest.fixture(scope="module")
def circle():
    img, truth = render_scene(red_circle_spec(0.02, 48))
    return img, truth


def test_parse_kv():
    assert parse_kv("a = 1\n# c\n\nb=x,y  # tail\n") == {"a": "1", "b": "x,y"}
    with pytest.raises(ConfigError):
        parse_kv("novalue\n")


def test_config_from_kv():
    cfg = config_from_kv({"streams": "lbp", "lbp.scales": "1:8,3:24", "lbp.prior": "0.4",
                          "lbp.splits": "0,50,auto", "illum_correct": "on", "encoder.kernels": "4",
                          "noise.edge_radius": "3"})
    (s,) = cfg.streams
    assert s.scales == (LbpScale(1, 8), LbpScale(3, 24)) and s.priors() == [0.4, 0.4]
    assert s.splits == (0.0, 50.0) and s.adaptive
    assert cfg.illum_correct and cfg.encoder.n_kernels == 4 and cfg.noise_params.edge_exclusion_radius == 3
    with pytest.raises(ConfigError):
        config_from_kv({"lbp.scale": "1:8"})
    with pytest.raises(ConfigError):
        config_from_kv({"streams": "hue"})
    with pytest.raises(ConfigError):
        config_from_kv({"illum_correct": "maybe"})
    with pytest.raises(ConfigError):
        PipelineConfig(streams=(StreamConfig("rg"), StreamConfig("rg")))


def test_default_priors():
    assert StreamConfig("rg").priors() == [0.472]
    assert StreamConfig("lbp").priors() == [0.5445, 0.5, 0.522]


def test_analyze_streams_and_diagnostics(circle):
    img, _ = circle
    an = analyze(img, PipelineConfig())
    assert list(an.streams) == ["rg", "lbp"]
    rg, lbp = an.streams["rg"], an.streams["lbp"]
    assert rg.transform.channels == 2 and rg.d2.channels == 1 and rg.confidence.channels == 1
    assert lbp.transform.channels == 3 and lbp.d2.channels == 3 and lbp.confidence.channels == 3
    stages = [d["stage"] for d in an.diagnostics]
    assert stages[0] == "noise"
    assert {"rg", "lbp"} <= {d.get("stream") for d in an.diagnostics}
    for d in an.diagnostics:
        json.dumps(d)
    conf = rg.confidence.data
    assert conf.min() >= 0 and conf.max() <= 1


def test_fixed_noise_skips_estimation(circle):
    img, _ = circle
    noise = NoiseModel.isotropic(0.02)
    an = analyze(img, PipelineConfig(noise=noise))
    assert an.noise == noise


def test_illumination_fallback_on_colourful_image():
    a = np.zeros((32, 32, 3))
    a[..., 0] = 0.8
    a += 0.01 * np.random.default_rng(0).standard_normal(a.shape)
    an = analyze(ImageRGB(np.clip(a, 0, 1)), PipelineConfig(illum_correct=True, noise=NoiseModel.isotropic(0.01)))
    illum = [d for d in an.diagnostics if d["stage"] == "illumination"]
    assert illum and illum[0].get("fallback_identity")


def test_stage_error_names_stage():
    tiny = ImageRGB(np.full((6, 6, 3), 0.5))
    with pytest.raises(StageError) as info:
        analyze(tiny, PipelineConfig())
    assert info.value.stage == "noise"
    with pytest.raises(StageError) as info:
        analyze(tiny, PipelineConfig(noise=NoiseModel.isotropic(0.01)))
    assert info.value.stage == "lbp"


def test_stream_tensors_confidence_toggle(circle):
    img, _ = circle
    an = analyze(img, PipelineConfig())
    on = stream_tensors(an, True)
    off = stream_tensors(an, False)
    assert list(on) == ["rg", "lbp"]
    assert (off["lbp"].confidence == 1).all()
    assert on["lbp"].confidence.max() <= 1 and not (on["lbp"].confidence == 1).all()
    assert (raw_tensor(img).confidence == 1).all() and raw_tensor(img).shape == (3, 48, 48)


def test_run_pipeline_artifacts_and_determinism(circle, tmp_path):
    img, _ = circle
    src = tmp_path / "fixture.png"
    save_image(img, src)
    cfg = PipelineConfig(write_features=True)
    a = run_pipeline(cfg, src, tmp_path / "a")
    b = run_pipeline(cfg, src, tmp_path / "b")
    assert [p.name for p in a] == artifact_names(cfg, "fixture")
    assert len(a) == 2 * 3 + 1 + 1
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    assert load_float_map(tmp_path / "a" / "fixture.features.dhcm").channels == 2 * cfg.encoder.n_kernels
    for line in (tmp_path / "a" / "fixture.diagnostics.jsonl").read_text().splitlines():
        assert "stage" in json.loads(line)


def test_single_stream_artifacts(circle, tmp_path):
    img, _ = circle
    save_image(img, tmp_path / "x.png")
    out = run_pipeline(config_from_kv({"streams": "rg"}), tmp_path / "x.png", tmp_path / "o")
    assert sorted(p.name for p in out) == sorted(["x.rg.transform.dhcm", "x.rg.d2.dhcm", "x.rg.conf.dhcm",
                                                  "x.diagnostics.jsonl"])


def test_missing_input_leaves_nothing(tmp_path):
    with pytest.raises(StageError) as info:
        run_pipeline(PipelineConfig(), tmp_path / "nope.png", tmp_path / "out")
    assert info.value.stage == "load"
    assert not (tmp_path / "out").exists()


def test_partial_artifacts_removed(circle, tmp_path):
    img, _ = circle
    save_image(img, tmp_path / "x.png")
    out = tmp_path / "out"
    (out / "x.diagnostics.jsonl").mkdir(parents=True)   # blocks the final write
    with pytest.raises(StageError) as info:
        run_pipeline(PipelineConfig(), tmp_path / "x.png", out)
    assert info.value.stage == "output"
    assert [p.name for p in out.iterdir()] == ["x.diagnostics.jsonl"]
