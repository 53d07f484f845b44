"""The training loop over the combined ray loss, full-frame rendering,
IoU evaluation, and the simulated human-in-the-loop protocol.

Training is fully deterministic given (scene, config, seed): one seeded
generator drives pixel sampling, stratified ray sampling and parameter
init, and the optimization step itself is single-threaded. Full-frame
rendering may fan out over threads; tiles write disjoint slices so the
result is identical for any tile size or worker count.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from . import nn
from .features import encode_targets, load_feature_map, train_autoencoder
from .field import FieldConfig, SemanticField
from .objective import (
    AnnotationSet,
    LossWeights,
    RayBatch,
    loss_gradients,
    loss_total,
    sample_ray_batch,
    softmax,
)
from .rendering import RayBundle, composite, composite_backward, generate_rays, sample_along_ray
from .scene import (
    Checkpoint,
    SceneDataset,
    check_config_compatible,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good state."""

    def __init__(self, iteration: int, checkpoint: Checkpoint):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 1024
    seed: int = 0
    weights: LossWeights = dataclass_field(default_factory=LossWeights)
    field: FieldConfig = dataclass_field(default_factory=FieldConfig)
    num_samples: int = 64
    stratified: bool = True
    tile_size: int = 64
    lr_mlp: float = 1e-3
    lr_grid: float = 1e-2
    metrics_every: int = 50
    train_frames: tuple | None = None  # frame ids to optimize on; None = all
    ae_iterations: int = 10000
    ae_sparsity: float = 1e-3
    ae_batch_size: int = 256
    ae_sample_budget: int = 2**17
    ae_seed: int = 0  # offline preprocessing seed, independent of the run seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RayRender:
    color: np.ndarray  # (B, 3)
    depth: np.ndarray  # (B,)
    logits: np.ndarray | None  # (B, C)
    features: np.ndarray | None  # (B, D)
    weights: np.ndarray  # (B, N)
    opacity: np.ndarray  # (B,)


@dataclass
class _RenderCache:
    samples: object
    sigma: np.ndarray
    values: np.ndarray
    comp: object
    field_cache: object
    slices: dict


def render_rays(
    field: SemanticField,
    rays: RayBundle,
    num_samples: int,
    stratified: bool = False,
    rng: np.random.Generator | None = None,
    heads: tuple = ("color", "semantic", "feature"),
) -> tuple[RayRender, _RenderCache]:
    """Sample, query the field, and integrate every requested quantity.

    Depth integrates the sample distance itself, so it comes for free with
    any head selection.
    """
    samples = sample_along_ray(rays, num_samples, stratified, rng, dtype=field.dtype)
    b, n = samples.t.shape
    pts = samples.points.reshape(-1, 3)
    dir_enc = None
    if "color" in heads:
        dir_enc = np.repeat(field.encode_view_dirs(rays.directions), n, axis=0)
    out, fcache = field.query(pts, heads=heads, view_dirs_encoded=dir_enc)

    parts = []
    slices: dict[str, slice] = {}
    cursor = 0

    def add(name, arr):
        nonlocal cursor
        k = arr.shape[-1]
        slices[name] = slice(cursor, cursor + k)
        parts.append(arr)
        cursor += k

    if out.rgb is not None:
        add("color", out.rgb.reshape(b, n, 3))
    add("depth", samples.t[..., None])
    if out.logits is not None:
        add("logits", out.logits.reshape(b, n, -1))
    if out.features is not None:
        add("features", out.features.reshape(b, n, -1))
    values = np.concatenate(parts, axis=-1)
    sigma = out.sigma.reshape(b, n)
    comp = composite(sigma, values, samples.delta)

    render = RayRender(
        color=comp.values[:, slices["color"]] if "color" in slices else None,
        depth=comp.values[:, slices["depth"]][:, 0],
        logits=comp.values[:, slices["logits"]] if "logits" in slices else None,
        features=comp.values[:, slices["features"]] if "features" in slices else None,
        weights=comp.weights,
        opacity=comp.weights.sum(axis=-1),
    )
    return render, _RenderCache(samples, sigma, values, comp, fcache, slices)


def render_rays_backward(
    field: SemanticField,
    cache: _RenderCache,
    d_color: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
    d_logits: np.ndarray | None = None,
    d_features: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Backpropagate integrated-quantity gradients to every parameter."""
    b, n = cache.sigma.shape
    k = cache.values.shape[-1]
    upstream = np.zeros((b, k), dtype=cache.values.dtype)
    if d_color is not None:
        upstream[:, cache.slices["color"]] = d_color
    if d_depth is not None:
        upstream[:, cache.slices["depth"]] = d_depth[:, None]
    if d_logits is not None:
        upstream[:, cache.slices["logits"]] = d_logits
    if d_features is not None:
        upstream[:, cache.slices["features"]] = d_features
    d_sigma, d_values = composite_backward(
        upstream, cache.sigma, cache.values, cache.samples.delta, cache.comp
    )
    kwargs = {"d_sigma": d_sigma.reshape(-1)}
    if "color" in cache.slices and d_color is not None:
        kwargs["d_rgb"] = d_values[..., cache.slices["color"]].reshape(b * n, -1)
    if "logits" in cache.slices and d_logits is not None:
        kwargs["d_logits"] = d_values[..., cache.slices["logits"]].reshape(b * n, -1)
    if "features" in cache.slices and d_features is not None:
        kwargs["d_features"] = d_values[..., cache.slices["features"]].reshape(b * n, -1)
    return field.query_backward(cache.field_cache, **kwargs)


def prepare_feature_targets(dataset: SceneDataset, config: TrainConfig,
                            cache_dir=None) -> None:
    """Fit (or load) the frozen autoencoder and cache per-frame encoded
    target maps; populates ``frame.feature_targets``.

    Caches live under the scene's ``cache/`` directory keyed by the
    autoencoder settings, so repeated runs and parallel experiment arms
    reuse one fit.
    """
    from .scene import load_checkpoint as _load_ckpt, save_checkpoint as _save_ckpt

    if not dataset.has_raw_features():
        raise nn.ConfigurationError(
            "feature loss requested but the scene has no feature maps"
        )
    latent = config.field.feature_dim
    cache_dir = Path(cache_dir) if cache_dir else dataset.root / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    ae_meta = {
        "latent_dim": latent,
        "iterations": config.ae_iterations,
        "sparsity": config.ae_sparsity,
        "batch_size": config.ae_batch_size,
        "sample_budget": config.ae_sample_budget,
        "seed": config.ae_seed,
    }
    tag = "_".join(str(v) for v in ae_meta.values())
    ae_path = cache_dir / f"autoencoder_{tag}.ckpt"

    maps = {}
    for f in dataset.frames:
        if f.feature_path is not None:
            maps[f.id] = load_feature_map(f.feature_path)
    m = next(iter(maps.values())).dim

    if ae_path.exists():
        ck = _load_ckpt(ae_path)
        ae = _rebuild_autoencoder(ck.params, m, latent, config.ae_sparsity)
    else:
        rng = np.random.default_rng(config.ae_seed)
        pooled = np.concatenate([fm.data.reshape(-1, m) for fm in maps.values()])
        if len(pooled) > config.ae_sample_budget:
            pooled = pooled[rng.choice(len(pooled), config.ae_sample_budget, replace=False)]
        ae = train_autoencoder(
            pooled,
            latent_dim=latent,
            sparsity_weight=config.ae_sparsity,
            iterations=config.ae_iterations,
            batch_size=config.ae_batch_size,
            rng=rng,
        )
        _save_ckpt(ae_path, Checkpoint(ae.parameters(), {}, 0, ae_meta))

    for f in dataset.frames:
        if f.id not in maps:
            continue
        target_path = cache_dir / f"targets_{tag}_{f.id:04d}.fmap"
        if target_path.exists():
            f.feature_targets = load_feature_map(target_path).data
        else:
            f.feature_targets = encode_targets(maps[f.id], ae)
            from .features import save_feature_map

            save_feature_map(target_path, f.feature_targets)


def _rebuild_autoencoder(params: dict, m: int, latent: int, sparsity: float):
    from .features import FeatureAutoencoder

    hidden = params["ae_encoder.b0"].shape[0]
    enc = nn.Mlp.create([m, hidden, latent], np.random.default_rng(0))
    dec = nn.Mlp.create([latent, hidden, m], np.random.default_rng(0))
    ae = FeatureAutoencoder(enc, dec, sparsity)
    for name, arr in ae.parameters().items():
        arr[...] = params[name]
    return ae


class Trainer:
    """Owns the field parameters and optimizer state for one session."""

    def __init__(
        self,
        dataset: SceneDataset,
        annotations: AnnotationSet,
        config: TrainConfig,
        checkpoint: Checkpoint | None = None,
        feature_cache_dir=None,
    ):
        self.dataset = dataset
        self.annotations = annotations
        self.config = config
        self.train_view = (
            dataset.subset(config.train_frames) if config.train_frames else dataset
        )
        n_classes = max(len(dataset.classes), 1)
        if checkpoint is not None:
            n_classes = max(n_classes, checkpoint.config.get("num_classes", 0))
        field_cfg = dataclasses.replace(
            config.field, num_classes=n_classes, seed=config.seed
        )
        self.field = SemanticField(field_cfg)
        self.rng = np.random.default_rng(config.seed)
        self.iteration = 0
        self.metrics: list[dict] = []
        self._needs_features = config.weights.feature > 0 and dataset.has_raw_features()
        if self._needs_features and dataset.feature_target_dim == 0:
            prepare_feature_targets(dataset, config, feature_cache_dir)

        self._adam_mlp = nn.AdamState(learning_rate=config.lr_mlp)
        self._adam_grid = nn.AdamState(learning_rate=config.lr_grid)
        self._grid_names = self.field.grid_parameter_names()
        if checkpoint is not None:
            self.restore(checkpoint)
        self._last_good = self.make_checkpoint()

    # -- parameter bookkeeping -------------------------------------------

    def parameter_names(self) -> set[str]:
        return set(self.field.parameters())

    def _split_params(self):
        params = self.field.parameters()
        grid = {k: v for k, v in params.items() if k in self._grid_names}
        mlp = {k: v for k, v in params.items() if k not in self._grid_names}
        return grid, mlp

    def config_echo(self) -> dict:
        echo = self.config.to_dict()
        echo["num_classes"] = self.field.num_classes
        echo["field"]["num_classes"] = self.field.num_classes
        return echo

    def add_class(self) -> int:
        """Grow the semantic head and its optimizer moments together."""
        new_id = self.field.add_class()
        last = len(self.field.semantic_mlp.layers) - 1
        for key in (f"semantic.w{last}", f"semantic.b{last}"):
            for moments in (self._adam_mlp.first_moment, self._adam_mlp.second_moment):
                if key in moments:
                    m = moments[key]
                    pad = np.zeros((1, *m.shape[1:]), dtype=m.dtype)
                    moments[key] = np.concatenate([m, pad], axis=0)
        return new_id

    def make_checkpoint(self) -> Checkpoint:
        params = {k: v.copy() for k, v in self.field.parameters().items()}
        adam = {}
        for name, st in (("grid", self._adam_grid), ("mlp", self._adam_mlp)):
            adam[name] = {
                "learning_rate": st.learning_rate,
                "beta1": st.beta1,
                "beta2": st.beta2,
                "epsilon": st.epsilon,
                "step_count": st.step_count,
                "moments": {
                    "first": {k: v.copy() for k, v in st.first_moment.items()},
                    "second": {k: v.copy() for k, v in st.second_moment.items()},
                },
            }
        return Checkpoint(params, adam, self.iteration, self.config_echo(),
                          self.annotations.revision)

    def restore(self, ckpt: Checkpoint) -> None:
        check_config_compatible(ckpt, self.config_echo())
        params = self.field.parameters()
        for name, arr in ckpt.params.items():
            params[name][...] = arr
        for opt_name, st in (("grid", self._adam_grid), ("mlp", self._adam_mlp)):
            meta = ckpt.adam[opt_name]
            st.learning_rate = meta["learning_rate"]
            st.beta1, st.beta2 = meta["beta1"], meta["beta2"]
            st.epsilon = meta["epsilon"]
            st.step_count = meta["step_count"]
            st.first_moment = {k: v.copy() for k, v in meta["moments"]["first"].items()}
            st.second_moment = {k: v.copy() for k, v in meta["moments"]["second"].items()}
        self.iteration = ckpt.iteration

    def snapshot_params(self) -> dict[str, np.ndarray]:
        """Read-only copy safe to share across rendering threads."""
        snap = {}
        for k, v in self.field.parameters().items():
            c = v.copy()
            c.flags.writeable = False
            snap[k] = c
        return snap

    # -- optimization ----------------------------------------------------

    def _heads(self) -> tuple:
        heads = ["color"]
        if self.config.weights.semantic > 0 and len(self.annotations) > 0:
            heads.append("semantic")
        if self._needs_features:
            heads.append("feature")
        return tuple(heads)

    def step(self) -> dict:
        cfg = self.config
        batch = sample_ray_batch(self.train_view, self.annotations, cfg.batch_size, self.rng)
        rendered, cache = render_rays(
            self.field, batch.rays, cfg.num_samples, cfg.stratified, self.rng,
            heads=self._heads(),
        )
        breakdown = loss_total(
            rendered.color, rendered.depth, rendered.logits, rendered.features,
            batch, cfg.weights,
        )
        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(self.iteration, self._last_good)
        d_color, d_depth, d_logits, d_features = loss_gradients(
            rendered.color, rendered.depth, rendered.logits, rendered.features,
            batch, cfg.weights,
        )
        grads = render_rays_backward(self.field, cache, d_color, d_depth,
                                     d_logits, d_features)
        grid_params, mlp_params = self._split_params()
        nn.adam_step(grid_params, {k: grads[k] for k in grid_params}, self._adam_grid)
        nn.adam_step(mlp_params, {k: grads[k] for k in mlp_params}, self._adam_mlp)
        self.iteration += 1

        row = breakdown.to_dict()
        row["iteration"] = self.iteration
        row["labels"] = self.annotations.labeled_pixel_count()
        # batch PSNR from the photometric term (squared norm over 3 channels)
        row["psnr"] = float(-10.0 * np.log10(max(breakdown.rgb / 3.0, 1e-12)))
        return row

    def run(self, iterations: int, callback=None) -> None:
        for _ in range(iterations):
            t0 = time.perf_counter()
            row = self.step()
            if self.iteration % self.config.metrics_every == 0 or not self.metrics:
                row["seconds"] = time.perf_counter() - t0
                self.metrics.append(row)
                self._last_good = self.make_checkpoint()
            if callback is not None:
                callback(self, row)

    # -- rendering -------------------------------------------------------

    def render_frame(self, camera, heads=("color", "semantic"), num_samples=None,
                     tile_size=None, max_workers=None) -> "FrameRender":
        return render_frame(
            self.field, camera, self.dataset.near, self.dataset.far,
            num_samples or self.config.num_samples, heads=heads,
            tile_size=tile_size or self.config.tile_size, max_workers=max_workers,
        )


@dataclass
class FrameRender:
    rgb: np.ndarray | None  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    class_map: np.ndarray | None  # (H, W) argmax over softmax of logits
    class_probs: np.ndarray | None  # (H, W, C)
    features: np.ndarray | None  # (H, W, D)
    opacity: np.ndarray  # (H, W)


def render_frame(
    field: SemanticField,
    camera,
    near: float,
    far: float,
    num_samples: int,
    heads: tuple = ("color", "semantic"),
    tile_size: int = 64,
    max_workers: int | None = None,
) -> FrameRender:
    """Deterministic tiled full-frame render from a parameter snapshot."""
    h, w = camera.height, camera.width
    rgb = np.zeros((h, w, 3), dtype=np.float32) if "color" in heads else None
    depth = np.zeros((h, w), dtype=np.float32)
    opacity = np.zeros((h, w), dtype=np.float32)
    c = field.num_classes
    probs = np.zeros((h, w, c), dtype=np.float32) if "semantic" in heads else None
    feats = (
        np.zeros((h, w, field.feature_dim), dtype=np.float32) if "feature" in heads else None
    )

    tiles = []
    for y0 in range(0, h, tile_size):
        for x0 in range(0, w, tile_size):
            tiles.append((y0, min(y0 + tile_size, h), x0, min(x0 + tile_size, w)))

    def run_tile(tile):
        y0, y1, x0, x1 = tile
        xs, ys = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        px = np.stack([xs.reshape(-1) + 0.5, ys.reshape(-1) + 0.5], axis=-1)
        rays = generate_rays(camera, px, near, far)
        rendered, _ = render_rays(field, rays, num_samples, stratified=False, heads=heads)
        shape = (y1 - y0, x1 - x0)
        if rgb is not None:
            rgb[y0:y1, x0:x1] = rendered.color.reshape(*shape, 3)
        depth[y0:y1, x0:x1] = rendered.depth.reshape(shape)
        opacity[y0:y1, x0:x1] = rendered.opacity.reshape(shape)
        if probs is not None:
            probs[y0:y1, x0:x1] = softmax(rendered.logits).reshape(*shape, c)
        if feats is not None:
            feats[y0:y1, x0:x1] = rendered.features.reshape(*shape, -1)

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            list(pool.map(run_tile, tiles))
    else:
        for tile in tiles:
            run_tile(tile)

    class_map = probs.argmax(axis=-1) if probs is not None else None
    return FrameRender(rgb, depth, class_map, probs, feats, opacity)


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    return float(-10.0 * np.log10(max(mse, 1e-12)))


def evaluate_iou(pred_maps, ref_maps, class_ids) -> tuple[dict[int, float], float]:
    """Per-class intersection-over-union and its mean.

    Classes absent from both prediction and reference are skipped in the
    mean; a class present on one side only scores 0.
    """
    per_class: dict[int, float] = {}
    preds = [np.asarray(p) for p in pred_maps]
    refs = [np.asarray(r) for r in ref_maps]
    for p, r in zip(preds, refs):
        if p.shape != r.shape:
            raise ValueError(f"prediction shape {p.shape} != reference {r.shape}")
    for c in class_ids:
        inter = sum(int(np.sum((p == c) & (r == c))) for p, r in zip(preds, refs))
        union = sum(int(np.sum((p == c) | (r == c))) for p, r in zip(preds, refs))
        if union == 0:
            continue
        per_class[c] = inter / union
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, miou


def train(
    dataset: SceneDataset,
    annotations: AnnotationSet | None,
    config: TrainConfig,
    checkpoint: Checkpoint | None = None,
    callback=None,
    feature_cache_dir=None,
) -> tuple[Checkpoint, list[dict]]:
    """One-shot fit: build a trainer, run, return (checkpoint, metrics)."""
    annotations = annotations if annotations is not None else dataset.new_annotation_set()
    trainer = Trainer(dataset, annotations, config, checkpoint, feature_cache_dir)
    trainer.run(config.iterations, callback=callback)
    return trainer.make_checkpoint(), trainer.metrics


def load_trainer(dataset: SceneDataset, annotations: AnnotationSet,
                 checkpoint_path, config: TrainConfig) -> Trainer:
    ckpt = load_checkpoint(checkpoint_path)
    return Trainer(dataset, annotations, config, checkpoint=ckpt)


# -- human-in-the-loop simulation ----------------------------------------


@dataclass(frozen=True)
class HitlConfig:
    pretrain_iterations: int = 2000
    clicks_per_round: int = 5
    steps_per_round: int = 250
    rounds: int = 10
    eval_frames: tuple | None = None  # defaults to the scene's eval split
    seed: int = 0

    def __post_init__(self):
        if self.clicks_per_round < 1:
            raise nn.ConfigurationError("need at least one click per round")


@dataclass
class HitlResult:
    rounds: list[dict]
    checkpoint: Checkpoint
    success: bool  # ran out of misclassified pixels before the round cap


def run_hitl(dataset: SceneDataset, hitl: HitlConfig, config: TrainConfig,
             feature_cache_dir=None) -> HitlResult:
    """Simulated annotator: pretrain without labels, then repeatedly click
    a fixed number of misclassified pixels, train a fixed step budget, and
    log agreement with ground truth."""
    eval_ids = list(hitl.eval_frames) if hitl.eval_frames else dataset.split_ids("eval")
    if not eval_ids:
        raise nn.ConfigurationError("no evaluation frames available")
    for fid in eval_ids:
        if dataset.frame_by_id(fid).labels is None:
            raise nn.ConfigurationError(f"frame {fid} has no ground-truth labels")

    annotations = dataset.new_annotation_set()
    trainer = Trainer(dataset, annotations, config, feature_cache_dir=feature_cache_dir)
    click_rng = np.random.default_rng(hitl.seed)
    class_ids = list(range(len(dataset.classes)))

    rows: list[dict] = []
    last_preds: dict[int, np.ndarray] = {}

    def evaluate(round_idx: int, seconds: float, success: bool) -> dict:
        preds, refs = [], []
        for fid in eval_ids:
            frame = dataset.frame_by_id(fid)
            r = trainer.render_frame(frame.camera, heads=("semantic",))
            last_preds[fid] = r.class_map
            preds.append(r.class_map)
            refs.append(frame.labels)
        per_class, miou = evaluate_iou(preds, refs, class_ids)
        last = trainer.metrics[-1] if trainer.metrics else {}
        row = {
            "round": round_idx,
            "labels": annotations.labeled_pixel_count(),
            "iou_per_class": {str(c): v for c, v in per_class.items()},
            "miou": miou,
            "losses": {
                k: last.get(k) for k in
                ("loss", "loss_rgb", "loss_depth", "loss_semantic", "loss_feature")
            },
            "success": success,
            "seconds": seconds,
        }
        rows.append(row)
        return row

    t0 = time.perf_counter()
    trainer.run(hitl.pretrain_iterations)
    evaluate(0, time.perf_counter() - t0, False)

    success = False
    for round_idx in range(1, hitl.rounds + 1):
        t0 = time.perf_counter()
        # the model has not changed since the last evaluation, so its
        # rendered predictions double as the click candidates
        candidates = _misclassified_pixels(dataset, eval_ids, annotations, last_preds)
        if len(candidates) == 0:
            success = True
            break
        k = min(hitl.clicks_per_round, len(candidates))
        picks = click_rng.choice(len(candidates), size=k, replace=False)
        for idx in np.sort(picks):
            fid, x, y = candidates[idx]
            frame = dataset.frame_by_id(int(fid))
            annotations.add_stroke(int(fid), int(frame.labels[int(y), int(x)]),
                                   [(int(x), int(y))])
        trainer.run(hitl.steps_per_round)
        exhausted = k < hitl.clicks_per_round
        evaluate(round_idx, time.perf_counter() - t0, exhausted)
        if exhausted:
            success = True
            break

    return HitlResult(rows, trainer.make_checkpoint(), success)


def _misclassified_pixels(dataset: SceneDataset, eval_ids, annotations: AnnotationSet,
                          predictions: dict[int, np.ndarray]) -> np.ndarray:
    """(frame, x, y) rows where the rendered argmax disagrees with ground
    truth, excluding pixels that already carry a label."""
    rows = []
    labeled = annotations.resolved()
    for fid in eval_ids:
        frame = dataset.frame_by_id(fid)
        wrong = predictions[fid] != frame.labels
        ys, xs = np.nonzero(wrong)
        taken = labeled.get(fid, {})
        for x, y in zip(xs, ys):
            if (int(x), int(y)) not in taken:
                rows.append((fid, int(x), int(y)))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


# -- metrics persistence ---------------------------------------------------


def write_metrics(rows: list[dict], jsonl_path, csv_path=None) -> None:
    """Metrics as JSONL (one row per line) plus a flat CSV mirror."""
    jsonl_path = Path(jsonl_path)
    with open(jsonl_path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    if csv_path is None:
        csv_path = jsonl_path.with_suffix(".csv")
    flat_rows = [_flatten(row) for row in rows]
    fields: list[str] = []
    for row in flat_rows:
        for k in row:
            if k not in fields:
                fields.append(k)
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(flat_rows)


def _flatten(row: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in row.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


def canonical_metrics(path) -> str:
    """Metrics file content with volatile timing fields removed, for
    bit-identical determinism comparisons."""
    lines = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        row.pop("seconds", None)
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines)
