"""Backbone registry: which networks we can export features from, their
patch geometry, and lazy weight loading.

Weights load only when a backbone is actually instantiated, so the
exporter (and its tests) work without torch or network access; a missing
backbone fails with a clear message and leaves scenes usable with
synthetic features.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class BackboneUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    stride: int
    channels: int  # M recorded into the FMAP header
    resize_policy: str = "floor_multiple"  # shrink dims to a stride multiple

    def feature_shape(self, height: int, width: int) -> tuple[int, int]:
        in_h, in_w = self.input_shape(height, width)
        return in_h // self.stride, in_w // self.stride

    def input_shape(self, height: int, width: int) -> tuple[int, int]:
        """Backbone-native input size for a frame; recorded so that
        nearest-neighbor lookup against the original pixels stays valid."""
        if self.resize_policy != "floor_multiple":
            raise ValueError(f"unknown resize policy {self.resize_policy!r}")
        return (
            max(self.stride, (height // self.stride) * self.stride),
            max(self.stride, (width // self.stride) * self.stride),
        )


#: extractor callable: (H, W, 3) float32 in [0,1] -> (H_f, W_f, M) float32
ExtractorFn = Callable[[np.ndarray], np.ndarray]

REGISTRY: dict[str, BackboneSpec] = {
    # self-distilled ViT, stride-8 patches, 384-d tokens
    "dino_vits8": BackboneSpec("dino_vits8", stride=8, channels=384),
    # dilated ResNet-50 FCN trained for segmentation, stride-8 trunk
    "fcn_resnet50": BackboneSpec("fcn_resnet50", stride=8, channels=2048),
}


def get_spec(name: str) -> BackboneSpec:
    try:
        return REGISTRY[name]
    except KeyError:
        raise BackboneUnavailable(
            f"unknown backbone {name!r}; available: {sorted(REGISTRY)}"
        ) from None


def load_extractor(name: str, facet: str = "tokens") -> ExtractorFn:
    """Instantiate a real backbone. Needs torch(+vision) and downloadable
    weights; failure raises BackboneUnavailable with the reason."""
    spec = get_spec(name)
    try:
        import torch
    except ImportError as e:
        raise BackboneUnavailable(f"torch is not installed: {e}") from e

    if name == "dino_vits8":
        try:
            model = torch.hub.load("facebookresearch/dino:main", "dino_vits8")
        except Exception as e:
            raise BackboneUnavailable(
                f"could not load dino_vits8 weights ({e}); "
                "the engine stays usable with synthetic features"
            ) from e
        model.eval()

        def extract(rgb: np.ndarray) -> np.ndarray:
            h, w = spec.input_shape(rgb.shape[0], rgb.shape[1])
            x = _prepare(torch, rgb, h, w)
            with torch.no_grad():
                # final-block spatial tokens, dropping the class token
                feats = model.get_intermediate_layers(x, n=1)[0][:, 1:, :]
            fh, fw = h // spec.stride, w // spec.stride
            return feats[0].reshape(fh, fw, spec.channels).numpy().astype(np.float32)

        return extract

    if name == "fcn_resnet50":
        try:
            from torchvision.models.segmentation import (
                FCN_ResNet50_Weights,
                fcn_resnet50,
            )

            model = fcn_resnet50(weights=FCN_ResNet50_Weights.DEFAULT)
        except Exception as e:
            raise BackboneUnavailable(
                f"could not load fcn_resnet50 weights ({e}); "
                "the engine stays usable with synthetic features"
            ) from e
        model.eval()

        def extract(rgb: np.ndarray) -> np.ndarray:
            h, w = spec.input_shape(rgb.shape[0], rgb.shape[1])
            x = _prepare(torch, rgb, h, w)
            with torch.no_grad():
                feats = model.backbone(x)["out"]  # (1, 2048, H/8, W/8)
            return feats[0].permute(1, 2, 0).numpy().astype(np.float32)

        return extract

    raise BackboneUnavailable(f"no loader for {name!r}")


def _prepare(torch, rgb: np.ndarray, h: int, w: int):
    import torch.nn.functional as F

    x = torch.from_numpy(np.ascontiguousarray(rgb, dtype=np.float32))
    x = x.permute(2, 0, 1)[None]
    if x.shape[-2:] != (h, w):
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    return (x - mean) / std
