"""Ultrasound confidence maps and confidence-aware segmentation tooling"""

from importlib.metadata import version

from . import (
    config, exceptions, logs, grids, sparse, confidence, montecarlo, losses,
    phantom, segmenter, metrics, formats, pipelines,
)
from .confidence import ConfidenceMap, RwParams, compute_confidence_map, compute_volume_confidence
from .grids import Image2D, LabelMap, ProbMap, Volume3D

__version__ = version("confmaplib")

# Defaults, overridable through CONFMAP_ environment variables
default_settings = config.Settings()


__all__ = [
    "__version__",
    "config",
    "default_settings",
    "exceptions",
    "logs",
    "grids",
    "Image2D",
    "Volume3D",
    "LabelMap",
    "ProbMap",
    "sparse",
    "confidence",
    "ConfidenceMap",
    "RwParams",
    "compute_confidence_map",
    "compute_volume_confidence",
    "montecarlo",
    "losses",
    "phantom",
    "segmenter",
    "metrics",
    "formats",
    "pipelines",
]
