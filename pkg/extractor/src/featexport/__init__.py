"""Offline feature export: pretrained backbones -> FMAP files."""

from .backbones import REGISTRY, BackboneSpec, BackboneUnavailable, get_spec
from .export import export_features
from .fmap import FmapError, read_fmap, validate_fmap, write_fmap

__all__ = [
    "REGISTRY",
    "BackboneSpec",
    "BackboneUnavailable",
    "get_spec",
    "export_features",
    "FmapError",
    "read_fmap",
    "validate_fmap",
    "write_fmap",
]
