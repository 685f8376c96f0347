"""Command-line entry point.

Every subcommand is a batch step that reads files and writes files; all
randomness comes from ``--seed``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _kv_file(path) -> dict[str, str]:
    from .pipeline import parse_kv
    return parse_kv(Path(path).read_text()) if path else {}


def _pipeline_config(args, extra: dict | None = None):
    """Config file first, then command-line overrides."""
    from .pipeline import config_from_kv
    kv = _kv_file(args.config)
    kv.update(extra or {})
    for flag, key in (("streams", "streams"), ("noise", "noise"), ("delta", "delta"),
                      ("sampling", "sampling")):
        val = getattr(args, flag, None)
        if val is not None:
            kv[key] = str(val)
    if getattr(args, "illum_correct", False):
        kv["illum_correct"] = "on"
    if getattr(args, "scales", None):
        kv["lbp.scales"] = args.scales
    return config_from_kv(kv)


def _noise_for(img, args):
    from .noise import NoiseModel, estimate_noise_model
    if args.noise in (None, "auto"):
        return estimate_noise_model(img, _pipeline_config(args).noise_params)
    return NoiseModel.from_kv(Path(args.noise).read_text())


# ---------------------------------------------------------------- commands

def cmd_estimate_noise(args) -> int:
    from .noise import NoiseEstimationParams, estimate_noise_model
    from .raster import load_image
    params = {}
    for item in args.params or []:
        key, _, value = item.partition("=")
        params[key] = int(value) if key == "edge_exclusion_radius" else float(value)
    noise = estimate_noise_model(load_image(args.image), NoiseEstimationParams(**params))
    text = noise.to_kv()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_transform(args) -> int:
    import numpy as np
    from .lbp import parse_scales, lbp_multiscale
    from .raster import FloatMap, intensity, load_image, save_float_map
    from .rg import rg_mahalanobis
    img = load_image(args.image)
    noise = _noise_for(img, args)
    if args.operator == "rg":
        out = rg_mahalanobis(img, noise)
        fmap = FloatMap(np.concatenate([out.rg.data, out.d2.data]))
    else:
        cfg = _pipeline_config(args)
        out = lbp_multiscale(intensity(img), parse_scales(args.scales or "1:8,2:16,3:24"),
                             noise.sigma_i, cfg.sampling)
        fmap = out.to_float_map()
    save_float_map(fmap, args.output)
    return 0


def cmd_confidence(args) -> int:
    from .confidence import FIXED_SPLITS, confidence_map, lambda_schedule
    from .pipeline import _splits
    from .raster import load_float_map, save_float_map
    fmap = load_float_map(args.d2)
    if not 0 <= args.channel < fmap.channels:
        raise ValueError(f"channel {args.channel} out of range for a {fmap.channels}-channel map")
    d2 = fmap.data[args.channel].astype("float64")
    splits, adaptive = _splits(args.splits) if args.splits else (FIXED_SPLITS, True)
    sched = lambda_schedule(d2, args.k, None, args.median_of, splits, adaptive)
    conf = confidence_map(d2, args.k, args.prior, sched)
    save_float_map(conf.to_float_map(), args.output)
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline
    extra = {"write_features": "on"} if args.features else {}
    paths = run_pipeline(_pipeline_config(args, extra), args.image, args.output)
    for p in paths:
        print(p)
    return 0


def _parse_triple(text: str) -> tuple[float, float, float]:
    vals = tuple(float(v) for v in text.split(","))
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise ValueError(f"expected one or three comma-separated numbers, got {text!r}")
    return vals


def _scene_specs(kv: dict[str, str], seed: int):
    """Scene list for ``synth``: ``scene=classes`` draws ``count`` images per
    class, ``red-circle`` and ``gray`` are the calibration fixtures, and
    ``custom`` takes the shape fields directly."""
    import numpy as np
    from .synth import CLASS_NAMES, SceneSpec, class_scene, gray_spec, red_circle_spec
    kind = kv.get("scene", "classes")
    size = int(kv.get("size", 48 if kind == "classes" else 64))
    sigma = float(kv.get("sigma", 0.02))
    count = int(kv.get("count", 1))
    if kind == "classes":
        rng = np.random.default_rng(seed)
        return [(f"{CLASS_NAMES[c]}-{i:03d}", class_scene(c, rng, size=size))
                for c in range(len(CLASS_NAMES)) for i in range(count)]
    if kind == "red-circle":
        return [(f"red-circle-{i:03d}", red_circle_spec(sigma, size, seed + i)) for i in range(count)]
    if kind == "gray":
        return [(f"gray-{i:03d}", gray_spec(sigma, size, seed + i)) for i in range(count)]
    if kind == "custom":
        fields = {"shape": str, "pictogram": str, "radius": float, "border_width": float,
                  "fill": _parse_triple, "border": _parse_triple, "background": _parse_triple,
                  "pictogram_color": _parse_triple, "gains": _parse_triple, "label": int}
        kw = {k: conv(kv[k]) for k, conv in fields.items() if k in kv}
        return [(f"scene-{i:03d}", SceneSpec(size=size, sigma=(sigma,) * 3, seed=seed + i, **kw))
                for i in range(count)]
    raise ValueError(f"unknown scene kind {kind!r}")


def cmd_synth(args) -> int:
    import numpy as np
    from .raster import FloatMap, save_float_map, save_image
    from .synth import render_scene
    kv = _kv_file(args.spec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["path\tlabel\ttruth"]
    for name, spec in _scene_specs(kv, args.seed):
        img, truth = render_scene(spec)
        save_image(img, out / f"{name}.png")
        masks = np.stack([truth.h0_rg, truth.h0_lbp]).astype(np.float32)
        save_float_map(FloatMap(masks), out / f"{name}.truth.dhcm")
        rows.append(f"{name}.png\t{spec.label}\t{name}.truth.dhcm")
    (out / "manifest.tsv").write_text("\n".join(rows) + "\n")
    print(out / "manifest.tsv")
    return 0


def cmd_eval_calibration(args) -> int:
    from .pipeline import analyze
    from .raster import load_float_map, load_image
    from .synth import calibration_report, gray_spec, red_circle_spec, render_scene
    if args.image:
        if not args.truth:
            raise ValueError("--image needs --truth")
        img = load_image(args.image)
        masks = load_float_map(args.truth).data > 0.5
        h0_rg, h0_lbp = masks[0], masks[1]
    else:
        make = red_circle_spec if args.fixture == "red-circle" else gray_spec
        img, truth = render_scene(make(args.sigma, args.size, args.seed))
        h0_rg, h0_lbp = truth.h0_rg, truth.h0_lbp
    an = analyze(img, _pipeline_config(args))
    report = {}
    for name, res in an.streams.items():
        truth_mask = h0_rg if name == "rg" else h0_lbp
        # shape boundaries are ambiguous for colour, so the rg AUC skips them
        exclude = ~h0_lbp if name == "rg" else None
        r = calibration_report(res.confidence.data[0], truth_mask, res.valid[0], exclude=exclude)
        report[name] = {"auc": r.auc, "mean_conf_h0": r.mean_conf_h0,
                        "mean_conf_not_h0": r.mean_conf_not_h0,
                        "fpr_at_half": r.fpr_at_half, "n_pixels": r.n_pixels}
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval_limited(args) -> int:
    from .experiment import ExperimentConfig, run_experiment, write_table
    kv = _kv_file(args.config)
    cfg = ExperimentConfig.from_kv(kv)
    rows = run_experiment(cfg, threads=args.threads)
    write_table(rows, args.output)
    return 0


def _read_manifest(path):
    base = Path(path).parent
    items = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("\t")
        if not line.strip() or parts[0] == "path":
            continue
        if len(parts) < 2:
            raise ValueError(f"{path}:{n}: expected path<TAB>label")
        items.append((base / parts[0], int(parts[1])))
    if not items:
        raise ValueError(f"{path}: empty manifest")
    return items


def _features_for(img, streams, use_conf, encoder):
    import numpy as np
    from .experiment import image_features
    blocks = image_features(img, encoder)
    return np.concatenate([blocks[(s, False if s == "raw" else use_conf)] for s in streams])


def _model_meta(streams, use_conf, encoder) -> str:
    return (f"streams={','.join(streams)};conf={'on' if use_conf else 'off'};"
            f"kernels={encoder.n_kernels};encoder_seed={encoder.seed}")


def _parse_meta(meta: str):
    from .nconv import EncoderConfig
    kv = dict(item.split("=", 1) for item in meta.split(";") if item)
    try:
        streams = tuple(kv["streams"].split(","))
        enc = EncoderConfig(n_kernels=int(kv["kernels"]), seed=int(kv["encoder_seed"]))
        return streams, kv["conf"] == "on", enc
    except KeyError as e:
        raise ValueError(f"model metadata lacks {e.args[0]}") from None


def _stream_list(text: str) -> tuple[str, ...]:
    streams = tuple(s.strip() for s in text.split(",") if s.strip())
    for s in streams:
        if s not in ("raw", "rg", "lbp"):
            raise ValueError(f"unknown stream {s!r}")
    return streams


def cmd_train(args) -> int:
    import numpy as np
    from .nconv import EncoderConfig, save_model, train_linear
    from .raster import load_image
    streams = _stream_list(args.streams)
    use_conf = args.conf == "on"
    encoder = EncoderConfig(n_kernels=args.kernels, seed=args.seed)
    items = _read_manifest(args.manifest)
    if args.limit_per_class:
        rng = np.random.default_rng(args.seed)
        labels = np.array([lab for _, lab in items])
        keep = []
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            keep.extend(sorted(rng.choice(idx, min(args.limit_per_class, idx.size), replace=False)))
        items = [items[i] for i in sorted(keep)]
    X = np.array([_features_for(load_image(p), streams, use_conf, encoder) for p, _ in items])
    y = np.array([lab for _, lab in items])
    model, loss = train_linear(X, y, lr=args.lr, epochs=args.epochs, seed=args.seed, l2=args.l2,
                               meta=_model_meta(streams, use_conf, encoder))
    save_model(model, args.output)
    print(f"samples={len(items)}\nfeatures={X.shape[1]}\nloss={loss!r}")
    return 0


def cmd_classify(args) -> int:
    from .nconv import classify, load_model
    from .raster import load_image
    model = load_model(args.model)
    streams, use_conf, encoder = _parse_meta(model.meta)
    x = _features_for(load_image(args.image), streams, use_conf, encoder)
    label, probs = classify(model, x)
    lines = [f"class={label}"] + [f"p_{c}={float(p)!r}" for c, p in zip(model.classes, probs)]
    print("\n".join(lines))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, default):
        parser.add_argument("--seed", type=int, default=default(0), help="random seed (default 0)")
        parser.add_argument("--threads", type=int, default=default(1), help="worker threads (default 1)")
        parser.add_argument("--config", default=default(None), help="flat key=value configuration file")

    # subcommands accept the global flags too; SUPPRESS keeps them from
    # overwriting values given before the subcommand name
    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, lambda v: argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="quasiconf",
                                description="Quasi-invariant decomposition with confidence maps.")
    global_flags(p, lambda v: v)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, parents=[common], **kw)
        sp.set_defaults(func=fn)
        return sp

    def noise_flags(sp):
        sp.add_argument("--noise", default=None, help="noise model key=value file, or 'auto'")
        sp.add_argument("--sampling", default=None, choices=("lattice", "bilinear"))

    sp = add("estimate-noise", cmd_estimate_noise, help="per-channel noise sigmas")
    sp.add_argument("image")
    sp.add_argument("--params", nargs="*", metavar="KEY=VALUE")
    sp.add_argument("-o", "--output")

    sp = add("transform", cmd_transform, help="rg or LBP operator output with d2")
    sp.add_argument("operator", choices=("rg", "lbp"))
    sp.add_argument("image")
    sp.add_argument("--scales", default=None, help="LBP scales, e.g. 1:8,2:16,3:24")
    noise_flags(sp)
    sp.add_argument("-o", "--output", required=True)

    sp = add("confidence", cmd_confidence, help="confidence map from a d2 map")
    sp.add_argument("d2")
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--prior", type=float, required=True)
    sp.add_argument("--splits", default=None, help="e.g. 0,100,1000,auto")
    sp.add_argument("--channel", type=int, default=0)
    sp.add_argument("--median-of", default="d2", choices=("d2", "d"))
    sp.add_argument("-o", "--output", required=True)

    sp = add("pipeline", cmd_pipeline, help="noise, illumination, operators, confidence")
    sp.add_argument("image")
    sp.add_argument("--streams", default=None, help="comma list of rg, lbp")
    sp.add_argument("--scales", default=None)
    sp.add_argument("--illum-correct", action="store_true")
    sp.add_argument("--delta", type=float, default=None)
    sp.add_argument("--features", action="store_true", help="also write the encoded vector")
    noise_flags(sp)
    sp.add_argument("-o", "--output", required=True, help="output directory")

    sp = add("synth", cmd_synth, help="render synthetic scenes with ground truth")
    sp.add_argument("--spec", default=None, help="scene key=value file")
    sp.add_argument("-o", "--output", required=True)

    ev = add("eval", None, help="calibration and limited-sample evaluation")
    evs = ev.add_subparsers(dest="eval_command", required=True)
    sp = evs.add_parser("calibration", parents=[common])
    sp.set_defaults(func=cmd_eval_calibration)
    sp.add_argument("--fixture", default="red-circle", choices=("red-circle", "gray"))
    sp.add_argument("--sigma", type=float, default=0.02)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--image")
    sp.add_argument("--truth", help="2-channel DHCM with the H0 masks from `synth`")
    sp.add_argument("-o", "--output")
    sp = evs.add_parser("limited-samples", parents=[common])
    sp.set_defaults(func=cmd_eval_limited)
    sp.add_argument("-o", "--output", required=True)

    sp = add("train", cmd_train, help="train the linear head on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--streams", default="rg,lbp")
    sp.add_argument("--conf", default="on", choices=("on", "off"))
    sp.add_argument("--limit-per-class", type=int, default=0)
    sp.add_argument("--kernels", type=int, default=16)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--l2", type=float, default=1e-3)
    sp.add_argument("-o", "--output", required=True)

    sp = add("classify", cmd_classify, help="classify one image")
    sp.add_argument("--model", required=True)
    sp.add_argument("image")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    for var in THREAD_VARS:
        os.environ.setdefault(var, str(args.threads))
    from .errors import QuasiconfError
    try:
        return args.func(args)
    except (QuasiconfError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
