"""The spatial field: encoded position -> geometry trunk -> density and a
trunk activation; a color head conditioned on the encoded view direction;
a feature head producing the distilled 64-d vector; and a semantic
classifier that consumes that feature vector.

Semantic logits and features depend on position only; the view direction
feeds the color head exclusively.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .encoding import VIEW_FREQUENCIES, HashGridConfig, PositionEncoder, freq_encode

SEMANTIC_HIDDEN = 64


@dataclass(frozen=True)
class FieldConfig:
    encoder_mode: str = "hybrid"  # freq | hashgrid | hybrid
    num_classes: int = 2
    feature_dim: int = 64
    trunk_width: int | None = None  # defaults depend on encoder mode
    trunk_depth: int | None = None
    view_frequencies: int = VIEW_FREQUENCIES
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    seed: int = 0

    def resolved(self) -> "FieldConfig":
        if self.num_classes < 1:
            raise nn.ConfigurationError("need at least one class")
        width, depth = self.trunk_width, self.trunk_depth
        if width is None:
            width = 128 if self.encoder_mode == "freq" else 64
        if depth is None:
            depth = 4 if self.encoder_mode == "freq" else 2
        return replace(self, trunk_width=width, trunk_depth=depth)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["grid"] = HashGridConfig(
            **{**d["grid"], "hash_primes": tuple(d["grid"]["hash_primes"])}
        )
        return cls(**d)


@dataclass
class FieldOutputs:
    """Per-point field quantities for one query batch."""

    sigma: np.ndarray  # (B,) >= 0
    rgb: np.ndarray  # (B, 3) in [0, 1]
    features: np.ndarray | None  # (B, D)
    logits: np.ndarray | None  # (B, C)


@dataclass
class FieldCache:
    encoder_cache: object
    trunk: nn.MlpCache
    density: nn.MlpCache
    color: nn.MlpCache | None
    feature: nn.MlpCache | None
    semantic: nn.MlpCache | None
    num_points: int


class SemanticField:
    """Jointly trained radiance + semantics + feature field."""

    def __init__(self, config: FieldConfig, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        self.config = cfg = config.resolved()
        self.dtype = dtype
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.encoder = PositionEncoder(cfg.encoder_mode, cfg.grid, rng, dtype=dtype)
        enc_dim = self.encoder.output_dim
        w, d = cfg.trunk_width, cfg.trunk_depth
        self.trunk = nn.Mlp.create([enc_dim] + [w] * d, rng, output_activation="relu",
                                   dtype=dtype)
        self.density_head = nn.Mlp.create([w, 1], rng, output_activation="softplus",
                                          dtype=dtype)
        view_dim = 2 * 3 * cfg.view_frequencies
        self.color_mlp = nn.Mlp.create([w + view_dim, w, 3], rng,
                                       output_activation="sigmoid", dtype=dtype)
        self.feature_mlp = nn.Mlp.create([w, w, cfg.feature_dim], rng, dtype=dtype)
        self.semantic_mlp = nn.Mlp.create([cfg.feature_dim, SEMANTIC_HIDDEN, cfg.num_classes],
                                          rng, dtype=dtype)

    @property
    def num_classes(self) -> int:
        return self.semantic_mlp.out_dim

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def parameters(self) -> dict[str, np.ndarray]:
        params = dict(self.encoder.parameters())
        params.update(self.trunk.parameters("trunk"))
        params.update(self.density_head.parameters("density"))
        params.update(self.color_mlp.parameters("color"))
        params.update(self.feature_mlp.parameters("feature"))
        params.update(self.semantic_mlp.parameters("semantic"))
        return params

    def grid_parameter_names(self) -> set[str]:
        return set(self.encoder.parameters())

    def encode_view_dirs(self, view_dirs: np.ndarray) -> np.ndarray:
        return freq_encode(
            np.atleast_2d(view_dirs).astype(self.dtype, copy=False),
            self.config.view_frequencies,
        )

    def query(
        self,
        points: np.ndarray,
        view_dirs: np.ndarray | None = None,
        heads: tuple = ("color", "semantic", "feature"),
        view_dirs_encoded: np.ndarray | None = None,
    ) -> tuple[FieldOutputs, FieldCache]:
        """Evaluate the field at a batch of points / unit view directions.

        ``heads`` trims work for phases that do not need every output;
        requesting "semantic" implies the feature trunk it reads from.
        Callers rendering many samples per ray may pass the per-sample
        direction encoding directly (``encode_view_dirs`` once per ray).
        """
        points = np.atleast_2d(points)
        if not np.isfinite(points).all():
            raise ValueError("non-finite query inputs")
        enc, enc_cache = self.encoder.encode(points)
        h, trunk_cache = self.trunk.forward(enc)
        sigma, density_cache = self.density_head.forward(h)

        rgb = color_cache = None
        if "color" in heads:
            if view_dirs_encoded is None:
                if view_dirs is None:
                    raise nn.UsageError("color head needs view directions")
                view_dirs = np.atleast_2d(view_dirs)
                if not np.isfinite(view_dirs).all():
                    raise ValueError("non-finite query inputs")
                view_dirs_encoded = self.encode_view_dirs(view_dirs)
            dir_enc = view_dirs_encoded.astype(h.dtype, copy=False)
            rgb, color_cache = self.color_mlp.forward(np.concatenate([h, dir_enc], axis=-1))

        features = feature_cache = None
        logits = semantic_cache = None
        if "feature" in heads or "semantic" in heads:
            features, feature_cache = self.feature_mlp.forward(h)
            if "semantic" in heads:
                logits, semantic_cache = self.semantic_mlp.forward(features)

        cache = FieldCache(enc_cache, trunk_cache, density_cache, color_cache,
                           feature_cache, semantic_cache, points.shape[0])
        return FieldOutputs(sigma[:, 0], rgb, features, logits), cache

    def query_backward(
        self,
        cache: FieldCache,
        d_sigma: np.ndarray | None = None,
        d_rgb: np.ndarray | None = None,
        d_features: np.ndarray | None = None,
        d_logits: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Joint backpropagation from any subset of the four outputs down
        to every parameter group (no gradients are blocked between heads
        and the trunk)."""
        n = cache.num_points
        w = self.trunk.out_dim
        dtype = self.trunk.layers[0].weights.dtype
        grads: dict[str, np.ndarray] = {}
        d_h = np.zeros((n, w), dtype=dtype)

        if (d_logits is not None or d_features is not None) and cache.feature is None:
            raise nn.UsageError("feature head was not evaluated in forward")
        d_feat_total = None
        if d_logits is not None:
            if cache.semantic is None:
                raise nn.UsageError("semantic head was not evaluated in forward")
            sem_grads, d_feat_total = self.semantic_mlp.backward(cache.semantic, d_logits)
            grads.update(self.semantic_mlp.grad_dict(sem_grads, "semantic"))
        if d_features is not None:
            d_feat_total = d_features if d_feat_total is None else d_feat_total + d_features
        if d_feat_total is not None:
            feat_grads, dh = self.feature_mlp.backward(cache.feature, d_feat_total)
            grads.update(self.feature_mlp.grad_dict(feat_grads, "feature"))
            d_h += dh
        if d_rgb is not None:
            if cache.color is None:
                raise nn.UsageError("color head was not evaluated in forward")
            color_grads, d_in = self.color_mlp.backward(cache.color, d_rgb)
            grads.update(self.color_mlp.grad_dict(color_grads, "color"))
            d_h += d_in[:, :w]  # view-direction part has no parameters
        if d_sigma is not None:
            dens_grads, dh = self.density_head.backward(cache.density, d_sigma[:, None])
            grads.update(self.density_head.grad_dict(dens_grads, "density"))
            d_h += dh

        trunk_grads, d_enc = self.trunk.backward(cache.trunk, d_h)
        grads.update(self.trunk.grad_dict(trunk_grads, "trunk"))
        grads.update(self.encoder.encode_backward(cache.encoder_cache, d_enc))

        # heads that were evaluated but received no upstream still own zero
        # gradients so the optimizer sees a complete dict
        for name, p in self.parameters().items():
            if name not in grads:
                grads[name] = np.zeros_like(p)
        return grads

    def add_class(self) -> int:
        """Grow the semantic classifier by one zero-initialized logit row.

        Returns the new class id. Zero init means the new class starts
        with uniform-ish probability without disturbing existing logits.
        """
        last = self.semantic_mlp.layers[-1]
        new_w = np.vstack([last.weights, np.zeros((1, last.in_dim), dtype=last.weights.dtype)])
        new_b = np.concatenate([last.bias, np.zeros(1, dtype=last.bias.dtype)])
        self.semantic_mlp.layers[-1] = nn.DenseLayer(new_w, new_b, last.activation)
        return self.num_classes - 1
