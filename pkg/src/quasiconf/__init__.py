"""Quasi-invariant image decomposition with per-pixel confidence maps.

Submodules are imported on first attribute access so that the command line
can set thread limits before numpy loads.
"""
import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "ImageRGB": "raster", "IntensityMap": "raster", "FloatMap": "raster",
    "load_image": "raster", "save_image": "raster",
    "NoiseModel": "noise", "estimate_noise_model": "noise",
    "rg_transform": "rg", "rg_mahalanobis": "rg",
    "LbpScale": "lbp", "lbp_multiscale": "lbp",
    "mixture_moments": "confidence", "lambda_schedule": "confidence",
    "confidence_map": "confidence", "operator_prior": "confidence",
    "PipelineConfig": "pipeline", "analyze": "pipeline", "run_pipeline": "pipeline",
}
__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
