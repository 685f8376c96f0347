"""Confidence-weighted encoder: normalized convolution, confidence pooling,
and a multinomial logistic-regression head."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, ShapeError


@dataclass(frozen=True)
class FeatureTensor:
    features: np.ndarray     # (C, H, W)
    confidence: np.ndarray   # (C, H, W) in [0, 1]

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        c = np.asarray(self.confidence, dtype=np.float64)
        if c.ndim == 2:
            c = np.broadcast_to(c, f.shape)
        if f.ndim != 3 or f.shape != c.shape:
            raise ShapeError(f"features {f.shape} and confidence {c.shape} must be equal (C, H, W)")
        if np.any(c < 0) or np.any(c > 1):
            raise ShapeError("confidence must lie in [0, 1]")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "confidence", np.ascontiguousarray(c))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.features.shape


@dataclass(frozen=True)
class NormConvLayer:
    kernel: np.ndarray       # (k, k, c_in, c_out), non-negative
    bias: np.ndarray         # (c_out,)
    epsilon: float = 1e-8

    def __post_init__(self):
        w = np.asarray(self.kernel, dtype=np.float64)
        if w.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ConfigError(f"kernel must be (k, k, c_in, c_out) with odd k, got {w.shape}")
        if np.any(w < 0):
            raise ConfigError("normalized convolution needs non-negative weights")
        if np.any(w.sum(axis=(0, 1, 2)) <= 0):
            raise ConfigError("every output channel needs a kernel with positive mass")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if b.shape != (w.shape[3],):
            raise ConfigError("bias needs one entry per output channel")
        object.__setattr__(self, "kernel", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def random(cls, rng: np.random.Generator, size: int, c_in: int, c_out: int,
               epsilon: float = 1e-8, concentration: float = 0.1) -> "NormConvLayer":
        """Gamma(concentration) weights; a small shape parameter gives sparse
        kernels, so stacked layers do not average all input channels into
        one another."""
        w = rng.gamma(concentration, 1.0, (size, size, c_in, c_out))
        # guarantee positive mass per output channel
        w[size // 2, size // 2, np.arange(c_out) % c_in, np.arange(c_out)] += 1e-3
        return cls(w, np.zeros(c_out), epsilon)


def _windows(a: np.ndarray, k: int) -> np.ndarray:
    """(H*W, C*k*k) patch matrix over a zero-padded (C, H, W) array."""
    p = k // 2
    c, h, w = a.shape
    padded = np.pad(a, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(padded, (k, k), axis=(1, 2))      # (C, H, W, k, k)
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def normalized_conv(x: FeatureTensor, layer: NormConvLayer) -> FeatureTensor:
    """f' = sum(w c f) / (sum(w c) + eps) + bias,  c' = sum(w c) / sum(w).

    Padding carries zero confidence, so borders renormalize over the
    available support.
    """
    k, _, c_in, c_out = layer.kernel.shape
    c, h, w = x.shape
    if c != c_in:
        raise ShapeError(f"layer expects {c_in} channels, input has {c}")
    if h < k or w < k:
        raise ShapeError(f"input {w}x{h} smaller than kernel {k}x{k}")
    conf = x.confidence
    # zero-confidence samples contribute an exact +0 whatever their value
    cf = np.where(conf > 0, conf * x.features, 0.0)
    wmat = layer.kernel.transpose(2, 0, 1, 3).reshape(c_in * k * k, c_out)
    num = _windows(cf, k) @ wmat
    den = _windows(conf, k) @ wmat
    feat = num / (den + layer.epsilon) if layer.epsilon > 0 else np.divide(
        num, den, out=np.zeros_like(num), where=den > 0)
    feat = feat + layer.bias
    out_conf = np.clip(den / layer.kernel.sum(axis=(0, 1, 2)), 0.0, 1.0)
    return FeatureTensor(feat.T.reshape(c_out, h, w), out_conf.T.reshape(c_out, h, w))


def confidence_pool(x: FeatureTensor, window: int = 2) -> FeatureTensor:
    """Per channel and window, keep the feature at the most confident cell
    (first in row-major order on ties)."""
    c, h, w = x.shape
    ph, pw = (-h) % window, (-w) % window
    f, cf = x.features, x.confidence
    if ph or pw:
        f = np.pad(f, ((0, 0), (0, ph), (0, pw)))
        cf = np.pad(cf, ((0, 0), (0, ph), (0, pw)))
    hh, ww = f.shape[1] // window, f.shape[2] // window

    def blocks(a):
        return a.reshape(c, hh, window, ww, window).transpose(0, 1, 3, 2, 4).reshape(c, hh, ww, -1)

    fb, cb = blocks(f), blocks(cf)
    idx = np.argmax(cb, axis=-1)[..., None]
    return FeatureTensor(np.take_along_axis(fb, idx, -1)[..., 0], np.take_along_axis(cb, idx, -1)[..., 0])


# ---------------------------------------------------------------- encoder

@dataclass(frozen=True)
class EncoderConfig:
    n_kernels: int = 8
    kernel_sizes: tuple[int, ...] = (5, 3)
    seed: int = 0
    epsilon: float = 1e-8
    pool: int = 2
    concentration: float = 0.1


def stream_layers(name: str, c_in: int, config: EncoderConfig) -> list[NormConvLayer]:
    """Fixed random layers for one stream; seeded by stream name so that the
    declaration order of streams does not change any stream's kernels."""
    rng = np.random.default_rng([config.seed, zlib.crc32(name.encode()), c_in])
    layers, c = [], c_in
    for size in config.kernel_sizes:
        layers.append(NormConvLayer.random(rng, size, c, config.n_kernels, config.epsilon,
                                           config.concentration))
        c = config.n_kernels
    return layers


@dataclass(frozen=True)
class Encoding:
    vector: np.ndarray
    blocks: dict = field(default_factory=dict)
    degenerate: tuple[str, ...] = ()


def encode_stream(x: FeatureTensor, layers, pool: int = 2) -> FeatureTensor:
    for layer in layers:
        x = confidence_pool(normalized_conv(x, layer), pool)
    return x


def encode(streams, config: EncoderConfig | None = None, expected=None) -> Encoding:
    """Concatenate per-stream spatial means after the conv/pool stages.

    ``streams`` is an ordered mapping or sequence of (name, FeatureTensor).
    ``expected`` optionally maps stream names to required (C, H, W) shapes.
    """
    config = config or EncoderConfig()
    items = list(streams.items()) if isinstance(streams, dict) else list(streams)
    if not items:
        raise ConfigError("encode needs at least one stream")
    parts, blocks, degenerate = [], {}, []
    for name, x in items:
        if expected is not None and name in expected and tuple(expected[name]) != x.shape:
            raise ShapeError(f"stream {name!r} has shape {x.shape}, expected {tuple(expected[name])}")
        if not np.any(x.confidence > 0):
            degenerate.append(name)
        out = encode_stream(x, stream_layers(name, x.shape[0], config), config.pool)
        vec = out.features.mean(axis=(1, 2))
        blocks[name] = vec
        parts.append(vec)
    return Encoding(np.concatenate(parts), blocks, tuple(degenerate))


# ---------------------------------------------------------------- linear head

@dataclass(frozen=True)
class LinearClassifier:
    weights: np.ndarray        # (n_features, n_classes)
    bias: np.ndarray           # (n_classes,)
    classes: np.ndarray        # original label values, (n_classes,)
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    epochs: int = 0
    seed: int = 0
    meta: str = ""             # free-form key=value;... describing the features

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def scores(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_features:
            raise ShapeError(f"model expects {self.n_features} features, got {x.shape[-1]}")
        return ((x - self.feature_mean) / self.feature_scale) @ self.weights + self.bias


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(W, b, X, y, l2: float = 0.0):
    """Mean cross-entropy plus (l2/2)||W||^2 and its gradient."""
    n = X.shape[0]
    p = softmax(X @ W + b)
    loss = -np.log(p[np.arange(n), y] + 1e-300).mean() + 0.5 * l2 * np.sum(W * W)
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, X.T @ g + l2 * W, g.sum(axis=0)


def train_linear(features, labels, lr: float = 0.1, epochs: int = 200, seed: int = 0,
                 l2: float = 1e-3, batch_size: int = 32, standardize: bool = True, meta: str = ""):
    """Mini-batch gradient descent on softmax regression; returns (model, loss)."""
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != labels.shape[0]:
        raise ShapeError("features must be (n_samples, n_features) matching labels")
    classes, y = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ConfigError("training needs at least two classes")
    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale < 1e-12] = 1.0
    else:
        mean, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Xs = (X - mean) / scale
    rng = np.random.default_rng(seed)
    W = np.zeros((X.shape[1], classes.size))
    b = np.zeros(classes.size)
    n = Xs.shape[0]
    # a diverging run is reported below, not through numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                _, gW, gb = loss_and_grad(W, b, Xs[idx], y[idx], l2)
                W -= lr * gW
                b -= lr * gb
        loss, _, _ = loss_and_grad(W, b, Xs, y, l2)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise ConfigError("training diverged; lower the learning rate")
    model = LinearClassifier(W, b, classes, mean, scale, epochs, seed, meta)
    return model, float(loss)


def classify(model: LinearClassifier, x):
    p = softmax(model.scores(x))
    return model.classes[np.argmax(p, axis=-1)], p


# magic | version u16 | n_features u32 | n_classes u32 | epochs u32 | seed u64 | meta length u32
_DHNM = struct.Struct("<4sHIIIQI")
DHNM_VERSION = 1


def encode_model(model: LinearClassifier) -> bytes:
    """Header, UTF-8 metadata, then f64 classes, feature mean, feature
    scale, weights (row-major) and bias."""
    f, k = model.weights.shape
    meta = model.meta.encode()
    header = _DHNM.pack(b"DHNM", DHNM_VERSION, f, k, model.epochs, model.seed, len(meta))
    body = b"".join(np.asarray(a, dtype="<f8").tobytes() for a in (
        model.classes, model.feature_mean, model.feature_scale, model.weights, model.bias))
    return header + meta + body


def decode_model(buf: bytes) -> LinearClassifier:
    if len(buf) < _DHNM.size:
        raise FormatError("model file shorter than its header")
    magic, version, f, k, epochs, seed, n_meta = _DHNM.unpack_from(buf)
    if magic != b"DHNM":
        raise FormatError("bad magic; not a DHNM model file")
    if version != DHNM_VERSION:
        raise FormatError(f"unsupported DHNM version {version}")
    start = _DHNM.size + n_meta
    if len(buf) < start:
        raise FormatError("model metadata truncated")
    meta = buf[_DHNM.size:start].decode()
    payload = buf[start:]
    if len(payload) != 8 * (k + 2 * f + f * k + k):
        raise FormatError("model payload size does not match its header")
    vals = np.frombuffer(payload, dtype="<f8")
    parts = np.split(vals, np.cumsum([k, f, f, f * k]))
    classes = parts[0]
    if np.all(classes == np.round(classes)):
        classes = classes.astype(np.int64)
    return LinearClassifier(parts[3].reshape(f, k).copy(), parts[4].copy(), classes,
                            parts[1].copy(), parts[2].copy(), epochs, seed, meta)


def save_model(model: LinearClassifier, path) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path) -> LinearClassifier:
    return decode_model(Path(path).read_bytes())
