"""Run a backbone over every frame of a scene and write FMAP files.

Consumes the scene only through its public manifest.json and produces
files in the documented FMAP layout; the segmentation engine never
imports this package.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .backbones import BackboneSpec, ExtractorFn, get_spec, load_extractor
from .fmap import validate_fmap, write_fmap


def load_frame_rgb(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return img / 255.0


def export_features(
    manifest_path,
    backbone: str | BackboneSpec,
    out_dir=None,
    extractor: ExtractorFn | None = None,
    update_manifest: bool = True,
) -> list[Path]:
    """One FMAP per frame; optionally rewrite the manifest to point at
    them. Pass ``extractor`` to supply the network yourself (tests use a
    deterministic fake); otherwise the named backbone is loaded.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    spec = get_spec(backbone) if isinstance(backbone, str) else backbone
    if extractor is None:
        extractor = load_extractor(spec.name)
    out_dir = Path(out_dir) if out_dir else root / f"features_{spec.name}"
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for row in manifest["frames"]:
        rgb = load_frame_rgb(root / row["rgb"])
        feats = extractor(rgb)
        fh, fw = spec.feature_shape(rgb.shape[0], rgb.shape[1])
        if feats.shape != (fh, fw, spec.channels):
            raise ValueError(
                f"frame {row['id']}: extractor returned {feats.shape}, "
                f"expected {(fh, fw, spec.channels)}"
            )
        path = out_dir / f"{row['id']:04d}.fmap"
        write_fmap(path, feats)
        validate_fmap(path)
        row["features"] = str(path.relative_to(root))
        written.append(path)

    if update_manifest:
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return written
