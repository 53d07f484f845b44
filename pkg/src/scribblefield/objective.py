"""Per-ray losses, their weighted combination, and the class-balanced
pixel sampler.

Loss conventions: photometric is the squared L2 norm over channels, depth
is L1 on the integrated ray distance, semantics is softmax cross-entropy
over logits that were volumetrically integrated *before* the softmax, and
the feature term is L1 against the encoded target. Rays without a depth,
class, or feature target contribute exactly zero loss and zero gradient
for that term.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import ConfigurationError
from .rendering import RayBundle, generate_rays


@dataclass(frozen=True)
class LossWeights:
    depth: float = 0.05
    semantic: float = 1.0
    feature: float = 0.5

    def __post_init__(self):
        for v in (self.depth, self.semantic, self.feature):
            if not (np.isfinite(v) and v >= 0):
                raise ConfigurationError("loss weights must be finite and nonnegative")

    def to_dict(self) -> dict:
        return {"depth": self.depth, "semantic": self.semantic, "feature": self.feature}


def loss_rgb(pred, target) -> np.ndarray | float:
    """Squared Euclidean distance between predicted and observed color."""
    pred, target = np.asarray(pred), np.asarray(target)
    out = np.sum((pred - target) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def loss_depth(pred, target, valid=None) -> np.ndarray | float:
    """L1 on ray distance; exactly zero where no depth is defined."""
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    out = np.abs(pred - target)
    if valid is not None:
        out = np.where(valid, out, 0.0)
    return float(out) if out.ndim == 0 else out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss_semantic(logits, class_id) -> np.ndarray | float:
    """Cross entropy of softmax over the integrated logits.

    ``class_id`` may be -1 (or None) for unannotated rays, which score 0.
    """
    if class_id is None:
        return 0.0
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    scalar = np.ndim(class_id) == 0
    ids = np.atleast_1d(np.asarray(class_id))
    if np.any(ids >= logits.shape[-1]):
        raise ValueError(f"class id out of range for {logits.shape[-1]} classes")
    valid = ids >= 0
    safe = np.where(valid, ids, 0)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = np.where(valid, -log_probs[np.arange(len(ids)), safe], 0.0)
    return float(out[0]) if scalar else out


def loss_feature(pred, target) -> np.ndarray | float:
    """L1 distance between the rendered feature and the encoded target."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape[-1] != target.shape[-1]:
        raise ConfigurationError(
            f"feature dims differ: {pred.shape[-1]} vs {target.shape[-1]}"
        )
    out = np.sum(np.abs(pred - target), axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class RayBatch:
    """Sampled pixels with rays and per-ray supervision targets."""

    frame_ids: np.ndarray  # (B,)
    pixels: np.ndarray  # (B, 2) integer x, y
    rays: RayBundle
    color: np.ndarray  # (B, 3); every ray has a color target
    depth: np.ndarray  # (B,) ray distance; meaningful where depth_valid
    depth_valid: np.ndarray  # (B,) bool
    class_ids: np.ndarray  # (B,) int, -1 where unannotated
    feature_targets: np.ndarray | None  # (B, D) encoded targets, or None

    def __len__(self):
        return len(self.frame_ids)


@dataclass
class LossBreakdown:
    total: float
    rgb: float
    depth: float
    semantic: float
    feature: float

    def to_dict(self) -> dict:
        return {
            "loss": self.total,
            "loss_rgb": self.rgb,
            "loss_depth": self.depth,
            "loss_semantic": self.semantic,
            "loss_feature": self.feature,
        }


def loss_total(
    color_pred: np.ndarray,
    depth_pred: np.ndarray,
    logits_pred: np.ndarray | None,
    feature_pred: np.ndarray | None,
    batch: RayBatch,
    weights: LossWeights,
) -> LossBreakdown:
    """Mean over rays of rgb + weighted depth/semantic/feature terms."""
    b = len(batch)
    rgb_terms = loss_rgb(color_pred, batch.color)
    depth_terms = loss_depth(depth_pred, batch.depth, batch.depth_valid)
    if logits_pred is not None and np.any(batch.class_ids >= 0):
        sem_terms = loss_semantic(logits_pred, batch.class_ids)
    else:
        sem_terms = np.zeros(b)
    if feature_pred is not None and batch.feature_targets is not None:
        feat_terms = loss_feature(feature_pred, batch.feature_targets)
    else:
        feat_terms = np.zeros(b)
    rgb_m = float(np.mean(rgb_terms))
    depth_m = float(np.mean(depth_terms))
    sem_m = float(np.mean(sem_terms))
    feat_m = float(np.mean(feat_terms))
    total = rgb_m + weights.depth * depth_m + weights.semantic * sem_m + weights.feature * feat_m
    return LossBreakdown(total, rgb_m, depth_m, sem_m, feat_m)


def loss_gradients(
    color_pred: np.ndarray,
    depth_pred: np.ndarray,
    logits_pred: np.ndarray | None,
    feature_pred: np.ndarray | None,
    batch: RayBatch,
    weights: LossWeights,
):
    """Gradients of ``loss_total`` w.r.t. the four integrated quantities.

    Absent targets produce exactly zero gradient rows.
    """
    b = len(batch)
    d_color = (2.0 / b) * (color_pred - batch.color)
    sign = np.sign(depth_pred - batch.depth)
    d_depth = (weights.depth / b) * np.where(batch.depth_valid, sign, 0.0)
    d_logits = None
    if logits_pred is not None:
        d_logits = np.zeros_like(logits_pred)
        labeled = batch.class_ids >= 0
        if weights.semantic > 0 and np.any(labeled):
            probs = softmax(logits_pred[labeled])
            onehot = np.zeros_like(probs)
            onehot[np.arange(len(probs)), batch.class_ids[labeled]] = 1.0
            d_logits[labeled] = (weights.semantic / b) * (probs - onehot)
    d_features = None
    if feature_pred is not None:
        if batch.feature_targets is not None and weights.feature > 0:
            d_features = (weights.feature / b) * np.sign(
                feature_pred - batch.feature_targets
            ).astype(feature_pred.dtype)
        else:
            d_features = np.zeros_like(feature_pred)
    return d_color.astype(color_pred.dtype), d_depth, d_logits, d_features


@dataclass
class Stroke:
    id: int
    frame: int
    class_id: int
    pixels: np.ndarray  # (P, 2) integer x, y


class AnnotationSet:
    """Sparse pixel labels accumulated from strokes; latest stroke wins.

    Mutations bump a monotone revision counter so samplers and services
    can cache resolved label maps.
    """

    def __init__(self, num_classes_fn=None):
        self._strokes: dict[int, Stroke] = {}
        self._next_id = 1
        self.revision = 0
        self._num_classes_fn = num_classes_fn
        self._resolved_cache: tuple[int, dict] | None = None

    def __len__(self):
        return len(self._strokes)

    @property
    def strokes(self) -> list[Stroke]:
        return list(self._strokes.values())

    def add_stroke(self, frame: int, class_id: int, pixels, stroke_id=None) -> int:
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.int64))
        if pixels.size == 0:
            raise ValueError("stroke has no pixels")
        if class_id < 0:
            raise ValueError("invalid class id")
        if self._num_classes_fn is not None and class_id >= self._num_classes_fn():
            raise ValueError(f"unknown class id {class_id}")
        sid = self._next_id if stroke_id is None else stroke_id
        self._next_id = max(self._next_id, sid) + 1
        self._strokes[sid] = Stroke(sid, frame, class_id, pixels)
        self.revision += 1
        return sid

    def delete_stroke(self, stroke_id: int) -> None:
        if stroke_id not in self._strokes:
            raise KeyError(f"unknown stroke id {stroke_id}")
        del self._strokes[stroke_id]
        self.revision += 1

    def resolved(self) -> dict[int, dict[tuple[int, int], int]]:
        """Per-frame pixel -> class maps with later strokes overriding."""
        if self._resolved_cache is not None and self._resolved_cache[0] == self.revision:
            return self._resolved_cache[1]
        frames: dict[int, dict] = {}
        for stroke in self._strokes.values():  # insertion order = stroke order
            m = frames.setdefault(stroke.frame, {})
            for x, y in stroke.pixels:
                m[(int(x), int(y))] = stroke.class_id
        self._resolved_cache = (self.revision, frames)
        return frames

    def labeled_pixel_count(self) -> int:
        return sum(len(m) for m in self.resolved().values())

    def pixels_by_class(self) -> dict[int, np.ndarray]:
        """class id -> array of (frame, x, y) rows, in deterministic order."""
        buckets: dict[int, list] = {}
        for frame, m in sorted(self.resolved().items()):
            for (x, y), cid in sorted(m.items()):
                buckets.setdefault(cid, []).append((frame, x, y))
        return {cid: np.asarray(rows, dtype=np.int64) for cid, rows in sorted(buckets.items())}

    def class_of(self, frame: int, x: int, y: int) -> int | None:
        return self.resolved().get(frame, {}).get((x, y))


def sample_ray_batch(
    dataset,
    annotations: AnnotationSet | None,
    batch_size: int,
    rng: np.random.Generator,
) -> RayBatch:
    """Draw a supervision batch: half uniform over all pixels of all
    frames (pooled), half by first picking an annotated class uniformly
    and then one of its pixels uniformly. Falls back to a fully uniform
    batch when no annotations exist.
    """
    if batch_size < 2:
        raise ConfigurationError("batch size must be at least 2")
    by_class = annotations.pixels_by_class() if annotations is not None else {}
    n_uniform = batch_size if not by_class else (batch_size + 1) // 2
    n_balanced = batch_size - n_uniform

    frames = dataset.frames
    sizes = np.array([f.rgb.shape[0] * f.rgb.shape[1] for f in frames], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = rng.integers(0, offsets[-1], size=n_uniform)
    frame_idx = np.searchsorted(offsets, flat, side="right") - 1
    local = flat - offsets[frame_idx]
    widths = np.array([f.rgb.shape[1] for f in frames], dtype=np.int64)
    ys = local // widths[frame_idx]
    xs = local % widths[frame_idx]
    rows = [np.stack([frame_idx, xs, ys], axis=-1)]

    if n_balanced:
        class_ids = sorted(by_class)
        picks = rng.integers(0, len(class_ids), size=n_balanced)
        balanced = np.empty((n_balanced, 3), dtype=np.int64)
        for i, p in enumerate(picks):
            pool = by_class[class_ids[p]]
            balanced[i] = pool[rng.integers(0, len(pool))]
        rows.append(balanced)
    chosen = np.concatenate(rows, axis=0)
    return rays_for_pixels(dataset, chosen[:, 0], chosen[:, 1], chosen[:, 2], annotations)


def rays_for_pixels(dataset, frame_idx, xs, ys, annotations=None) -> RayBatch:
    """Assemble a RayBatch for explicit (frame, x, y) triples."""
    frame_idx = np.asarray(frame_idx, dtype=np.int64)
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    b = len(frame_idx)
    resolved = annotations.resolved() if annotations is not None else {}

    color = np.empty((b, 3), dtype=np.float32)
    depth = np.zeros(b, dtype=np.float64)
    depth_valid = np.zeros(b, dtype=bool)
    class_ids = np.full(b, -1, dtype=np.int64)
    feat_dim = dataset.feature_target_dim
    feats = np.zeros((b, feat_dim), dtype=np.float32) if feat_dim else None

    origins = np.empty((b, 3))
    dirs = np.empty((b, 3))
    for fi in np.unique(frame_idx):
        sel = frame_idx == fi
        frame = dataset.frames[fi]
        x, y = xs[sel], ys[sel]
        color[sel] = frame.rgb[y, x]
        if frame.depth is not None:
            depth[sel] = frame.depth[y, x]
            depth_valid[sel] = frame.depth_valid[y, x]
        labels = resolved.get(frame.id, {})
        if labels:
            class_ids[sel] = [labels.get((int(px), int(py)), -1) for px, py in zip(x, y)]
        if feats is not None and frame.feature_targets is not None:
            feats[sel] = lookup_rows(frame.feature_targets, x, y, frame.rgb.shape)
        px = np.stack([x, y], axis=-1).astype(np.float64) + 0.5
        bundle = generate_rays(frame.camera, px, dataset.near, dataset.far)
        origins[sel] = bundle.origins
        dirs[sel] = bundle.directions

    rays = RayBundle(origins, dirs, np.full(b, dataset.near), np.full(b, dataset.far))
    pixels = np.stack([xs, ys], axis=-1)
    return RayBatch(frame_idx, pixels, rays, color, depth, depth_valid, class_ids, feats)


def lookup_rows(target_map: np.ndarray, xs, ys, image_shape) -> np.ndarray:
    """Nearest-neighbor lookup of feature targets for image pixels."""
    from .features import lookup_feature_indices

    mx, my = lookup_feature_indices(xs, ys, image_shape[1], image_shape[0],
                                    target_map.shape[1], target_map.shape[0])
    return target_map[my, mx]
