"""Dense image-feature machinery: the FMAP container, the offline MLP
autoencoder that compresses M-dim extractor outputs to the 64-d distilled
space, per-pixel target lookup, PCA color maps, and a synthetic feature
generator used in tests instead of a pretrained extractor.

FMAP layout: magic "FMAP", u32 version (=1), u32 H, u32 W, u32 M, then
H*W*M little-endian float32, row-major pixels with the channel fastest.
The same container stores encoded-target caches (D in place of M).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import nn

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class FeatureMapFormatError(ValueError):
    """Malformed FMAP file; message carries the failing byte offset."""


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, M) float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise nn.ConfigurationError("feature map must be (H, W, M) with positive dims")
        if not np.isfinite(self.data).all():
            raise nn.ConfigurationError("feature map contains non-finite values")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]


def save_feature_map(path, fmap: FeatureMap | np.ndarray) -> None:
    data = fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap, dtype=np.float32)
    h, w, m = data.shape
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, h, w, m))
        f.write(payload)


def load_feature_map(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureMapFormatError(f"truncated header: file ends at byte {len(raw)}")
    magic, version, h, w, m = _HEADER.unpack_from(raw)
    if magic != FMAP_MAGIC:
        raise FeatureMapFormatError("bad magic at byte 0")
    if version != FMAP_VERSION:
        raise FeatureMapFormatError(f"unsupported version {version} at byte 4")
    expected = _HEADER.size + 4 * h * w * m
    if len(raw) != expected:
        raise FeatureMapFormatError(
            f"payload ends at byte {len(raw)}, expected {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, m)
    return FeatureMap(data.copy())


@dataclass
class FeatureAutoencoder:
    """Encoder/decoder pair mapping M-dim image features to the distilled
    D-dim space. Trained offline, frozen during scene fitting."""

    encoder: nn.Mlp
    decoder: nn.Mlp
    sparsity_weight: float = 0.0

    @property
    def input_dim(self):
        return self.encoder.in_dim

    @property
    def latent_dim(self):
        return self.encoder.out_dim

    def encode(self, vectors: np.ndarray) -> np.ndarray:
        out, _ = self.encoder.forward(np.atleast_2d(vectors))
        return out

    def decode(self, latents: np.ndarray) -> np.ndarray:
        out, _ = self.decoder.forward(np.atleast_2d(latents))
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        p = self.encoder.parameters("ae_encoder")
        p.update(self.decoder.parameters("ae_decoder"))
        return p


def train_autoencoder(
    samples: np.ndarray,
    latent_dim: int = 64,
    sparsity_weight: float = 1e-3,
    iterations: int = 10000,
    batch_size: int = 256,
    hidden: int = 256,
    learning_rate: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> FeatureAutoencoder:
    """Fit the autoencoder on feature vectors pooled across frames.

    Minimizes ||dec(enc(v)) - v||_2 + sparsity_weight * ||enc(v)||_1,
    averaged over the batch, with Adam.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    samples = np.asarray(samples, dtype=np.float32)
    m = samples.shape[-1]
    if m < latent_dim:
        raise nn.ConfigurationError(
            f"feature dim {m} is below the latent dim {latent_dim}; "
            "the autoencoder assumes a reduction"
        )
    enc = nn.Mlp.create([m, hidden, latent_dim], rng)
    dec = nn.Mlp.create([latent_dim, hidden, m], rng)
    params = enc.parameters("enc")
    params.update(dec.parameters("dec"))
    state = nn.AdamState(learning_rate=learning_rate)
    eps = 1e-12
    for _ in range(iterations):
        batch = samples[rng.integers(0, len(samples), size=batch_size)]
        z, enc_cache = enc.forward(batch)
        recon, dec_cache = dec.forward(z)
        r = recon - batch
        norms = np.sqrt(np.sum(r * r, axis=-1, keepdims=True)) + eps
        d_recon = (r / norms) / batch_size
        dec_grads, dz = dec.backward(dec_cache, d_recon)
        if sparsity_weight:
            dz = dz + (sparsity_weight / batch_size) * np.sign(z)
        enc_grads, _ = enc.backward(enc_cache, dz)
        grads = enc.grad_dict(enc_grads, "enc")
        grads.update(dec.grad_dict(dec_grads, "dec"))
        nn.adam_step(params, grads, state)
    return FeatureAutoencoder(enc, dec, sparsity_weight)


def autoencoder_loss(ae: FeatureAutoencoder, samples: np.ndarray) -> float:
    z = ae.encode(samples)
    recon = ae.decode(z)
    r = recon - samples
    return float(
        np.mean(np.sqrt(np.sum(r * r, axis=-1)))
        + ae.sparsity_weight * np.mean(np.sum(np.abs(z), axis=-1))
    )


def encode_targets(fmap: FeatureMap, ae: FeatureAutoencoder) -> np.ndarray:
    """Per-pixel encoder application: (H, W, M) -> (H, W, D)."""
    if fmap.dim != ae.input_dim:
        raise nn.ConfigurationError(
            f"feature map dim {fmap.dim} does not match the autoencoder "
            f"input dim {ae.input_dim}"
        )
    flat = fmap.data.reshape(-1, fmap.dim)
    out = ae.encode(flat)
    return out.reshape(fmap.height, fmap.width, ae.latent_dim)


def lookup_feature_indices(xs, ys, image_w, image_h, map_w, map_h):
    """Nearest-neighbor map cell for image pixels: floor-scaled, clamped."""
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    mx = np.minimum((xs * map_w) // image_w, map_w - 1)
    my = np.minimum((ys * map_h) // image_h, map_h - 1)
    return mx.astype(np.int64), my.astype(np.int64)


def lookup_feature(target_map: np.ndarray, pixel, image_size) -> np.ndarray:
    """Feature target for one image pixel (u, v) in an (H_i, W_i) image."""
    u, v = pixel
    image_h, image_w = image_size
    mx, my = lookup_feature_indices(
        np.asarray(u), np.asarray(v), image_w, image_h,
        target_map.shape[1], target_map.shape[0],
    )
    return target_map[my, mx]


@dataclass
class PcaProjector:
    mean: np.ndarray  # (K,)
    components: np.ndarray  # (3, K), orthonormal rows

    def project(self, vectors: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(vectors) - self.mean) @ self.components.T


def fit_pca(vectors: np.ndarray, rng=None, max_samples: int = 10000) -> PcaProjector | None:
    """Top-3 principal directions of a (possibly subsampled) vector set.

    Returns None when the covariance is degenerate (fewer than 3 distinct
    vectors, or effectively constant data).
    """
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, vectors.shape[-1])
    if max_samples and len(v) > max_samples:
        rng = rng if rng is not None else np.random.default_rng(0)
        v = v[rng.choice(len(v), size=max_samples, replace=False)]
    mean = v.mean(axis=0)
    centered = v - mean
    if np.allclose(centered, 0, atol=1e-12):
        return None
    # economical SVD; right singular vectors are the principal directions
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((3, v.shape[1]))
    k = min(3, vt.shape[0])
    comps[:k] = vt[:k]
    return PcaProjector(mean, comps)


def pca_rgb(feature_map: np.ndarray, projector: PcaProjector | None = None,
            rng=None) -> np.ndarray:
    """Map a (H, W, K) vector field to an RGB image via its top-3 principal
    components, min-max normalized per channel. Degenerate inputs produce
    a constant mid-gray image."""
    fm = np.asarray(feature_map)
    h, w, _ = fm.shape
    proj = projector if projector is not None else fit_pca(fm, rng=rng)
    if proj is None:
        return np.full((h, w, 3), 0.5, dtype=np.float32)
    coords = proj.project(fm.reshape(-1, fm.shape[-1])).reshape(h, w, 3)
    out = np.empty((h, w, 3), dtype=np.float32)
    for c in range(3):
        lo, hi = coords[..., c].min(), coords[..., c].max()
        if hi - lo < 1e-12:
            out[..., c] = 0.5
        else:
            out[..., c] = (coords[..., c] - lo) / (hi - lo)
    return out


def synth_features(
    class_map: np.ndarray,
    dim: int,
    class_embeddings: np.ndarray,
    noise_sigma: float = 0.0,
    smoothing_radius: int = 0,
    rng: np.random.Generator | None = None,
) -> FeatureMap:
    """Oracle feature maps for synthetic scenes: per-pixel class embedding
    plus Gaussian noise, box-smoothed. Deterministic per rng seed."""
    class_map = np.asarray(class_map)
    emb = np.asarray(class_embeddings, dtype=np.float32)
    if emb.shape[1] != dim:
        raise nn.ConfigurationError("embedding dim mismatch")
    if class_map.min() < 0 or class_map.max() >= len(emb):
        raise ValueError("class map references a missing embedding")
    data = emb[class_map]
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        data = data + rng.normal(0, noise_sigma, size=data.shape).astype(np.float32)
    if smoothing_radius > 0:
        size = 2 * smoothing_radius + 1
        data = uniform_filter(data, size=(size, size, 1), mode="nearest")
    return FeatureMap(data)


def make_class_embeddings(num_classes: int, dim: int, separation: float = 1.0,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    """Well-separated random unit embeddings scaled to the given separation."""
    rng = rng if rng is not None else np.random.default_rng(0)
    vecs = rng.normal(size=(num_classes, dim))
    q, _ = np.linalg.qr(vecs.T)
    return (q[:, :num_classes].T * separation).astype(np.float32)
