"""End-to-end chain: noise estimate, optional illumination correction,
operators, confidence maps, artifacts and diagnostics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .confidence import FIXED_SPLITS, confidence_map, lambda_schedule, operator_prior
from .errors import ConfigError, GrayPointError, QuasiconfError
from .illumination import DEFAULT_DELTA, IDENTITY_GRAY_POINT, correct_illumination, estimate_gray_point
from .lbp import DEFAULT_SCALES, SAMPLING_MODES, LbpScale, lbp_multiscale, parse_scales
from .nconv import EncoderConfig, FeatureTensor, encode
from .noise import NoiseEstimationParams, NoiseModel, estimate_noise_model
from .raster import FloatMap, ImageRGB, intensity, load_image, save_float_map
from .rg import K_RG, rg_mahalanobis

OPERATORS = ("rg", "lbp")


@dataclass(frozen=True)
class StreamConfig:
    operator: str
    scales: tuple[LbpScale, ...] = DEFAULT_SCALES
    prior: float | None = None           # None: built-in table
    splits: tuple[float, ...] = FIXED_SPLITS
    adaptive: bool = True                 # add median/2 as a split
    median_of: str = "d2"

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ConfigError(f"unknown operator {self.operator!r}")
        if self.prior is not None and not 0 <= self.prior <= 1:
            raise ConfigError("prior must lie in [0, 1]")

    def priors(self) -> list[float]:
        if self.operator == "rg":
            return [operator_prior("rg") if self.prior is None else self.prior]
        return [operator_prior("lbp", s) if self.prior is None else self.prior for s in self.scales]


@dataclass(frozen=True)
class PipelineConfig:
    streams: tuple[StreamConfig, ...] = (StreamConfig("rg"), StreamConfig("lbp"))
    noise: NoiseModel | None = None       # None: estimate per image
    noise_params: NoiseEstimationParams = field(default_factory=NoiseEstimationParams)
    illum_correct: bool = False
    delta: float = DEFAULT_DELTA
    sampling: str = "lattice"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    write_features: bool = False

    def __post_init__(self):
        if not self.streams:
            raise ConfigError("need at least one stream")
        names = [s.operator for s in self.streams]
        if len(set(names)) != len(names):
            raise ConfigError("each operator may appear once")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        for s in self.streams:
            s.priors()


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "on", "true", "yes"):
        return True
    if t in ("0", "off", "false", "no"):
        return False
    raise ConfigError(f"expected on/off, got {text!r}")


def _splits(text: str) -> tuple[tuple[float, ...], bool]:
    vals, adaptive = [], False
    for t in text.split(","):
        t = t.strip()
        if t == "auto":
            adaptive = True
        elif t:
            vals.append(float(t))
    return tuple(vals), adaptive


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def config_from_kv(values: dict[str, str]) -> PipelineConfig:
    """Build a config from flat keys, e.g. ``streams=rg,lbp``,
    ``lbp.scales=1:8,2:16``, ``rg.prior=0.47``, ``rg.splits=0,100,auto``,
    ``illum_correct=on``, ``encoder.kernels=8``."""
    v = dict(values)
    known = {"streams", "noise", "illum_correct", "delta", "sampling", "write_features",
             "encoder.kernels", "encoder.seed", "encoder.epsilon",
             "noise.structure_fraction", "noise.extreme_discard", "noise.canny_low",
             "noise.canny_high", "noise.edge_radius"}
    streams = []
    names = [s.strip() for s in v.get("streams", "rg,lbp").split(",") if s.strip()]
    for name in names:
        kw = {}
        if f"{name}.scales" in v:
            kw["scales"] = parse_scales(v[f"{name}.scales"])
        if f"{name}.prior" in v:
            kw["prior"] = float(v[f"{name}.prior"])
        if f"{name}.splits" in v:
            kw["splits"], kw["adaptive"] = _splits(v[f"{name}.splits"])
        if f"{name}.median_of" in v:
            kw["median_of"] = v[f"{name}.median_of"]
        known |= {f"{name}.{k}" for k in ("scales", "prior", "splits", "median_of")}
        streams.append(StreamConfig(name, **kw))
    unknown = sorted(set(v) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    noise = None
    if v.get("noise", "auto") != "auto":
        noise = NoiseModel.from_kv(Path(v["noise"]).read_text())
    np_kw = {}
    for key, attr in (("noise.structure_fraction", "structure_fraction"),
                      ("noise.extreme_discard", "extreme_discard"),
                      ("noise.canny_low", "canny_low"), ("noise.canny_high", "canny_high")):
        if key in v:
            np_kw[attr] = float(v[key])
    if "noise.edge_radius" in v:
        np_kw["edge_exclusion_radius"] = int(v["noise.edge_radius"])
    enc = EncoderConfig(
        n_kernels=int(v.get("encoder.kernels", 8)),
        seed=int(v.get("encoder.seed", 0)),
        epsilon=float(v.get("encoder.epsilon", 1e-8)),
    )
    return PipelineConfig(
        streams=tuple(streams),
        noise=noise,
        noise_params=NoiseEstimationParams(**np_kw),
        illum_correct=_bool(v.get("illum_correct", "off")),
        delta=float(v.get("delta", DEFAULT_DELTA)),
        sampling=v.get("sampling", "lattice"),
        encoder=enc,
        write_features=_bool(v.get("write_features", "off")),
    )


# ---------------------------------------------------------------- analysis

@dataclass(frozen=True)
class StreamResult:
    name: str
    transform: FloatMap
    d2: FloatMap
    confidence: FloatMap
    valid: np.ndarray      # (C_conf, H, W) bool
    tensor: FeatureTensor


@dataclass
class Analysis:
    streams: dict[str, StreamResult]
    noise: NoiseModel
    diagnostics: list[dict]


class StageError(QuasiconfError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (QuasiconfError, ValueError, OSError) as exc:
        raise StageError(name, exc) from exc


def _schedule_diag(sched) -> dict:
    return {"splits": list(sched.split_values), "lambda_top": sched.lambda_top, "median_d2": sched.median}


def _rg_stream(img: ImageRGB, noise: NoiseModel, sc: StreamConfig, diags: list) -> StreamResult:
    out = rg_mahalanobis(img, noise)
    d2 = out.d2.data[0].astype(np.float64)
    sched = lambda_schedule(d2, K_RG, out.valid, sc.median_of, sc.splits, sc.adaptive)
    prior = sc.priors()[0]
    conf = confidence_map(d2, K_RG, prior, sched, out.valid)
    diags.append({"stage": "confidence", "stream": "rg", "k": K_RG, "prior": prior, **_schedule_diag(sched)})
    feats = out.rg.data.astype(np.float64)
    tensor = FeatureTensor(feats, np.broadcast_to(conf.values, feats.shape))
    return StreamResult("rg", out.rg, out.d2, conf.to_float_map(), out.valid[None], tensor)


def _lbp_stream(img: ImageRGB, noise: NoiseModel, sc: StreamConfig, sampling: str,
                diags: list) -> StreamResult:
    out = lbp_multiscale(intensity(img), sc.scales, noise.sigma_i, sampling)
    confs = []
    for i, (scale, prior) in enumerate(zip(sc.scales, sc.priors())):
        sched = lambda_schedule(out.d2[i], scale.points, out.valid[i], sc.median_of, sc.splits, sc.adaptive)
        confs.append(confidence_map(out.d2[i], scale.points, prior, sched, out.valid[i]).values)
        diags.append({"stage": "confidence", "stream": "lbp", "scale": str(scale), "k": scale.points,
                      "prior": prior, **_schedule_diag(sched)})
    conf = np.stack(confs)
    tensor = FeatureTensor(out.codes, conf)
    return StreamResult("lbp", FloatMap(out.codes), FloatMap(out.d2), FloatMap(conf), out.valid, tensor)


def analyze(img: ImageRGB, config: PipelineConfig | None = None) -> Analysis:
    config = config or PipelineConfig()
    diags: list[dict] = []
    if config.noise is None:
        noise = _stage("noise", estimate_noise_model, img, config.noise_params)
        diags.append({"stage": "noise", "source": "estimated", **noise.as_dict()})
    else:
        noise = config.noise
        diags.append({"stage": "noise", "source": "given", **noise.as_dict()})
    colour_img, colour_noise = img, noise
    if config.illum_correct:
        try:
            gp = estimate_gray_point(img, config.delta)
            fallback = False
        except GrayPointError:
            gp, fallback = IDENTITY_GRAY_POINT, True
        res = _stage("illumination", correct_illumination, img, gp, noise)
        colour_img, colour_noise = res.image, res.noise
        diags.append({"stage": "illumination", "r_bar": gp.r_bar, "g_bar": gp.g_bar,
                      "support_count": 0 if fallback else gp.support_count,
                      "gains": list(res.gains), "clipped": res.clipped, "fallback_identity": fallback})
    streams = {}
    for sc in config.streams:
        if sc.operator == "rg":
            streams["rg"] = _stage("rg", _rg_stream, colour_img, colour_noise, sc, diags)
        else:
            # texture reads the uncorrected intensity
            streams["lbp"] = _stage("lbp", _lbp_stream, img, noise, sc, config.sampling, diags)
    return Analysis(streams, noise, diags)


def raw_tensor(img: ImageRGB) -> FeatureTensor:
    rgb = img.as_float64().transpose(2, 0, 1)
    return FeatureTensor(rgb, np.ones_like(rgb))


def stream_tensors(analysis: Analysis, use_confidence: bool = True) -> dict[str, FeatureTensor]:
    out = {}
    for name, res in analysis.streams.items():
        t = res.tensor
        out[name] = t if use_confidence else FeatureTensor(t.features, np.ones_like(t.features))
    return out


# ---------------------------------------------------------------- artifacts

def artifact_names(config: PipelineConfig, stem: str) -> list[str]:
    names = [f"{stem}.{sc.operator}.{part}.dhcm" for sc in config.streams
             for part in ("transform", "d2", "conf")]
    if config.write_features:
        names.append(f"{stem}.features.dhcm")
    return names + [f"{stem}.diagnostics.jsonl"]


def run_pipeline(config: PipelineConfig, image_path, out_dir) -> list[Path]:
    """Write transform, d2 and confidence maps per stream plus a diagnostics
    file.  On failure every artifact written so far is removed and a
    ``StageError`` naming the failing stage is raised."""
    image_path, out_dir = Path(image_path), Path(out_dir)
    written: list[Path] = []
    try:
        img = _stage("load", load_image, image_path)
        analysis = analyze(img, config)
        _stage("output", out_dir.mkdir, parents=True, exist_ok=True)
        stem = image_path.stem
        for name, res in analysis.streams.items():
            for part, fmap in (("transform", res.transform), ("d2", res.d2), ("conf", res.confidence)):
                path = out_dir / f"{stem}.{name}.{part}.dhcm"
                written.append(path)
                _stage("output", save_float_map, fmap, path)
        diags = list(analysis.diagnostics)
        if config.write_features:
            enc = _stage("encode", encode, stream_tensors(analysis), config.encoder)
            path = out_dir / f"{stem}.features.dhcm"
            written.append(path)
            _stage("output", save_float_map, FloatMap(enc.vector.reshape(-1, 1, 1)), path)
            diags.append({"stage": "encode", "length": int(enc.vector.size), "degenerate": list(enc.degenerate)})
        path = out_dir / f"{stem}.diagnostics.jsonl"
        written.append(path)
        text = "".join(json.dumps(d, sort_keys=True) + "\n" for d in diags)
        _stage("output", path.write_text, text)
    except BaseException:
        for p in written:
            if not p.is_dir():
                p.unlink(missing_ok=True)
        raise
    return written


def with_streams(config: PipelineConfig, names) -> PipelineConfig:
    by_name = {s.operator: s for s in config.streams}
    return replace(config, streams=tuple(by_name.get(n) or StreamConfig(n) for n in names))
