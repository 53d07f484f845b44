"""Volumetric scribble propagation: a semantic radiance field that distills
pretrained image features and turns sparse pixel annotations into dense
2D/3D segmentations, headlessly or behind a live annotation service."""

__version__ = "0.1.0"
