"""Accuracy versus training-set size on the seven synthetic classes."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .nconv import EncoderConfig, classify, encode, train_linear
from .noise import NoiseModel
from .pipeline import PipelineConfig, StageError, analyze, raw_tensor, stream_tensors
from .synth import CLASS_NAMES, class_scene, render_scene

STREAM_SETS = {
    "raw": ("raw",),
    "rg": ("rg",),
    "lbp": ("lbp",),
    "rg+lbp": ("rg", "lbp"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    sizes: tuple[int, ...] = (5, 10, 50, 100)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    streams: tuple[str, ...] = ("raw", "rg", "lbp", "rg+lbp")
    train_per_class: int = 100
    test_per_class: int = 50
    image_size: int = 48
    data_seed: int = 1234
    epochs: int = 200
    lr: float = 0.1
    l2: float = 1e-3
    encoder: EncoderConfig = EncoderConfig(n_kernels=16)

    def __post_init__(self):
        for s in self.streams:
            if s not in STREAM_SETS:
                raise ConfigError(f"unknown stream set {s!r}")
        if not self.sizes or min(self.sizes) < 1:
            raise ConfigError("sample sizes must be >= 1")
        if max(self.sizes) > self.train_per_class:
            raise ConfigError(f"samples per class {max(self.sizes)} exceed the pool of {self.train_per_class}")
        if self.test_per_class < 1 or not self.seeds:
            raise ConfigError("need test samples and at least one seed")

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "ExperimentConfig":
        ints = lambda t: tuple(int(x) for x in t.split(",") if x.strip())
        conv = {"sizes": ints, "seeds": ints,
                "streams": lambda t: tuple(x.strip() for x in t.split(",") if x.strip()),
                "train_per_class": int, "test_per_class": int, "image_size": int,
                "data_seed": int, "epochs": int, "lr": float, "l2": float}
        kw, enc = {}, {"n_kernels": 16}
        for key, text in values.items():
            if key in conv:
                kw[key] = conv[key](text)
            elif key == "encoder.kernels":
                enc["n_kernels"] = int(text)
            elif key == "encoder.seed":
                enc["seed"] = int(text)
            elif key == "encoder.epsilon":
                enc["epsilon"] = float(text)
            else:
                raise ConfigError(f"unknown experiment key {key!r}")
        return cls(encoder=EncoderConfig(**enc), **kw)


@dataclass(frozen=True)
class ResultRow:
    stream: str
    conf: bool
    samples: int
    mean_acc: float
    std_acc: float
    accs: tuple[float, ...]


FALLBACK_NOISE = NoiseModel.isotropic(0.01)


def image_features(img, encoder: EncoderConfig, config: PipelineConfig | None = None) -> dict:
    """Encoded blocks keyed by (stream, confidence on/off) for one image."""
    config = config or PipelineConfig()
    try:
        an = analyze(img, config)
    except StageError as exc:
        # busy scenes can leave no flat pixels to estimate noise from
        if exc.stage != "noise":
            raise
        an = analyze(img, replace(config, noise=FALLBACK_NOISE))
    out = {("raw", False): encode({"raw": raw_tensor(img)}, encoder).vector}
    for use_conf in (True, False):
        enc = encode(stream_tensors(an, use_conf), encoder)
        for name, vec in enc.blocks.items():
            out[(name, use_conf)] = vec
    return out


def build_features(cfg: ExperimentConfig, threads: int = 1):
    """Encode every image once per (stream, confidence) combination.

    Returns ``(blocks, labels, is_train)`` where ``blocks[(name, conf)]``
    is an (n_images, n_kernels) array.  Scene specs are drawn sequentially,
    so the result does not depend on ``threads``.
    """
    rng = np.random.default_rng(cfg.data_seed)
    n_classes = len(CLASS_NAMES)
    per_class = cfg.train_per_class + cfg.test_per_class
    labels = np.repeat(np.arange(n_classes), per_class)
    is_train = np.tile(np.arange(per_class) < cfg.train_per_class, n_classes)
    specs = [class_scene(int(label), rng, size=cfg.image_size) for label in labels]

    def one(spec):
        return image_features(render_scene(spec)[0], cfg.encoder)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            feats = list(pool.map(one, specs))
    else:
        feats = [one(s) for s in specs]
    blocks = {k: np.array([f[k] for f in feats]) for k in feats[0]}
    return blocks, labels, is_train


def _design(blocks, stream: str, conf: bool) -> np.ndarray:
    parts = STREAM_SETS[stream]
    use = False if stream == "raw" else conf
    return np.concatenate([blocks[(p, use)] for p in parts], axis=1)


def run_experiment(cfg: ExperimentConfig | None = None, features=None, threads: int = 1) -> list[ResultRow]:
    cfg = cfg or ExperimentConfig()
    blocks, labels, is_train = features if features is not None else build_features(cfg, threads)
    train_idx = np.flatnonzero(is_train)
    test_idx = np.flatnonzero(~is_train)
    rows = []
    for stream in cfg.streams:
        for conf in ((False,) if stream == "raw" else (True, False)):
            X = _design(blocks, stream, conf)
            for n in cfg.sizes:
                accs = []
                for seed in cfg.seeds:
                    rng = np.random.default_rng([seed, n])
                    pick = np.concatenate([
                        rng.choice(train_idx[labels[train_idx] == c], n, replace=False)
                        for c in range(len(CLASS_NAMES))])
                    model, _ = train_linear(X[pick], labels[pick], lr=cfg.lr, epochs=cfg.epochs,
                                            seed=seed, l2=cfg.l2)
                    pred, _ = classify(model, X[test_idx])
                    accs.append(float(np.mean(pred == labels[test_idx])))
                rows.append(ResultRow(stream, conf, n, float(np.mean(accs)), float(np.std(accs)), tuple(accs)))
    return rows


def write_table(rows, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["stream", "conf", "samples", "mean_acc", "std_acc"])
        for r in rows:
            w.writerow([r.stream, "on" if r.conf else "off", r.samples, f"{r.mean_acc:.6f}", f"{r.std_acc:.6f}"])
