"""Analytic RGB-D scene generation for tests and desk-scale experiments.

Primitives (sphere, box, ground plane) are intersected in closed form to
produce Lambertian color, exact z-depth, and exact class ids per pixel;
oracle feature maps come from per-class embeddings plus noise. The world
frame is z-up; cameras orbit a look-at point.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .features import make_class_embeddings, save_feature_map, synth_features
from .rendering import Camera
from .scene import (
    ClassTable,
    SceneTransform,
    _default_palette,
    normalize_scene,
    save_depth_mm,
    save_rgb,
    write_indexed_png,
)

BACKGROUND_CLASS = 0


@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    class_id: int
    albedo: tuple[float, float, float]

    def intersect(self, origins, dirs):
        oc = origins - np.asarray(self.center)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        hit = disc > 0
        sqrt_disc = np.sqrt(np.where(hit, disc, 0))
        t = -b - sqrt_disc
        t2 = -b + sqrt_disc
        t = np.where(t > 1e-6, t, t2)
        t = np.where(hit & (t > 1e-6), t, np.inf)
        pts = origins + t[:, None] * dirs
        normals = (pts - np.asarray(self.center)) / self.radius
        return t, normals


@dataclass
class Box:
    low: tuple[float, float, float]
    high: tuple[float, float, float]
    class_id: int
    albedo: tuple[float, float, float]

    def intersect(self, origins, dirs):
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
        tmin = np.minimum(t0, t1).max(axis=-1)
        tmax = np.maximum(t0, t1).min(axis=-1)
        hit = (tmax > np.maximum(tmin, 1e-6))
        t = np.where(hit, np.where(tmin > 1e-6, tmin, tmax), np.inf)
        pts = origins + t[:, None] * dirs
        # face normal: the axis where the hit point touches a slab
        center = (lo + hi) / 2
        half = (hi - lo) / 2
        rel = (pts - center) / half
        axis = np.argmax(np.abs(rel), axis=-1)
        normals = np.zeros_like(pts)
        normals[np.arange(len(pts)), axis] = np.sign(rel[np.arange(len(pts)), axis])
        return t, normals


@dataclass
class GroundPlane:
    z: float
    extent: float
    class_id: int
    albedo: tuple[float, float, float]

    def intersect(self, origins, dirs):
        dz = dirs[:, 2]
        t = np.where(np.abs(dz) > 1e-12, (self.z - origins[:, 2]) / dz, np.inf)
        pts = origins + t[:, None] * dirs
        inside = (np.abs(pts[:, 0]) <= self.extent) & (np.abs(pts[:, 1]) <= self.extent)
        t = np.where((t > 1e-6) & inside, t, np.inf)
        normals = np.zeros_like(pts)
        normals[:, 2] = 1.0
        return t, normals


@dataclass
class OrbitSpec:
    num_train: int = 12
    num_eval: int = 4
    radius: float = 1.9
    height: float = 1.3
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.15)


@dataclass
class SyntheticSceneSpec:
    primitives: list = dataclass_field(default_factory=list)
    orbit: OrbitSpec = dataclass_field(default_factory=OrbitSpec)
    image_size: tuple[int, int] = (48, 48)  # (W, H)
    fov_deg: float = 55.0
    class_names: list[str] = dataclass_field(default_factory=list)
    background_albedo: tuple[float, float, float] = (0.75, 0.82, 0.9)
    light_dir: tuple[float, float, float] = (-0.35, 0.25, -0.9)
    ambient: float = 0.35
    feature_dim: int = 96
    feature_scale: float = 0.5  # feature map resolution relative to the image
    feature_noise: float = 0.08
    feature_smoothing: int = 1
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return 1 + max((p.class_id for p in self.primitives), default=0)


def standard_scene_spec(seed: int = 0, image_size=(48, 48), orbit: OrbitSpec | None = None
                        ) -> SyntheticSceneSpec:
    """The default desk-scale scene: ground plane, a sphere and a box."""
    return SyntheticSceneSpec(
        primitives=[
            # a large stage keeps empty-space pixels rare, like indoor RGB-D
            GroundPlane(0.0, 4.0, 1, (0.55, 0.5, 0.45)),
            Sphere((-0.38, 0.05, 0.3), 0.3, 2, (0.75, 0.2, 0.2)),
            Box((0.12, -0.42, 0.0), (0.68, 0.14, 0.44), 3, (0.2, 0.4, 0.8)),
        ],
        orbit=orbit or OrbitSpec(),
        image_size=image_size,
        class_names=["background", "floor", "ball", "crate"],
        seed=seed,
    )


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world for the x-right / y-down / +z-forward convention."""
    eye, target, up = map(np.asarray, (eye, target, up))
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = eye
    return pose


def orbit_cameras(spec: SyntheticSceneSpec) -> tuple[list[Camera], list[Camera]]:
    """Train and eval cameras on the orbit; eval azimuths interleave."""
    w, h = spec.image_size
    focal = w / (2.0 * np.tan(np.radians(spec.fov_deg) / 2.0))
    orbit = spec.orbit

    def cam_at(azimuth: float) -> Camera:
        eye = np.array([
            orbit.radius * np.cos(azimuth),
            orbit.radius * np.sin(azimuth),
            orbit.height,
        ])
        pose = look_at_pose(eye, orbit.look_at)
        return Camera(focal, focal, w / 2.0, h / 2.0, w, h, pose)

    train = [cam_at(2 * np.pi * i / orbit.num_train) for i in range(orbit.num_train)]
    evals = [
        cam_at(2 * np.pi * (i + 0.5) / orbit.num_eval) for i in range(orbit.num_eval)
    ]
    return train, evals


@dataclass
class RenderedView:
    camera: Camera
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    depth_z: np.ndarray  # (H, W) metric z-depth, 0 where no hit
    labels: np.ndarray  # (H, W) class ids


def render_view(spec: SyntheticSceneSpec, camera: Camera) -> RenderedView:
    w, h = camera.width, camera.height
    xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dirs_cam = np.stack(
        [(xs - camera.cx) / camera.fx, (ys - camera.cy) / camera.fy, np.ones_like(xs)],
        axis=-1,
    ).reshape(-1, 3)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape)

    best_t = np.full(len(dirs), np.inf)
    labels = np.full(len(dirs), BACKGROUND_CLASS, dtype=np.int64)
    albedo = np.tile(np.asarray(spec.background_albedo), (len(dirs), 1))
    normals = np.zeros_like(dirs)
    for prim in spec.primitives:
        t, n = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        labels[closer] = prim.class_id
        albedo[closer] = prim.albedo
        normals[closer] = n[closer]

    light = -np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, None)
    shade = spec.ambient + (1.0 - spec.ambient) * lambert
    hit = np.isfinite(best_t)
    rgb = np.where(hit[:, None], albedo * shade[:, None], albedo)

    # metric z-depth along the camera axis (the sensor convention)
    dz_cam = dirs_cam / np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    depth_z = np.where(hit, best_t * dz_cam[:, 2], 0.0)
    return RenderedView(
        camera,
        rgb.reshape(h, w, 3),
        depth_z.reshape(h, w),
        labels.reshape(h, w),
    )


def generate_synthetic_scene(spec: SyntheticSceneSpec, out_dir) -> Path:
    """Render the spec and write a complete on-disk scene; returns the
    manifest path. Evaluation views are flagged in the manifest and carry
    ground-truth label maps like the training views."""
    out = Path(out_dir)
    for sub in ("rgb", "depth", "labels", "features"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    train_cams, eval_cams = orbit_cameras(spec)
    views = [render_view(spec, c) for c in train_cams + eval_cams]
    split = ["train"] * len(train_cams) + ["eval"] * len(eval_cams)

    names = spec.class_names or [f"class_{i}" for i in range(spec.num_classes)]
    classes = ClassTable.from_json(
        [
            {"id": i, "name": names[i], "color": _default_palette(spec.num_classes)[i]}
            for i in range(spec.num_classes)
        ]
    )
    embeddings = make_class_embeddings(spec.num_classes, spec.feature_dim,
                                       separation=1.0, rng=rng)

    frames_json = []
    for i, view in enumerate(views):
        save_rgb(out / "rgb" / f"{i:04d}.png", view.rgb)
        save_depth_mm(out / "depth" / f"{i:04d}.png", view.depth_z)
        write_indexed_png(out / "labels" / f"{i:04d}.png", view.labels, classes)
        fw = max(1, int(round(view.camera.width * spec.feature_scale)))
        fh = max(1, int(round(view.camera.height * spec.feature_scale)))
        sy = (np.arange(fh) * view.camera.height) // fh
        sx = (np.arange(fw) * view.camera.width) // fw
        small_labels = view.labels[np.ix_(sy, sx)]
        fmap = synth_features(small_labels, spec.feature_dim, embeddings,
                              noise_sigma=spec.feature_noise,
                              smoothing_radius=spec.feature_smoothing, rng=rng)
        save_feature_map(out / "features" / f"{i:04d}.fmap", fmap)
        frames_json.append(
            {
                "id": i,
                "split": split[i],
                "rgb": f"rgb/{i:04d}.png",
                "depth": f"depth/{i:04d}.png",
                "labels": f"labels/{i:04d}.png",
                "features": f"features/{i:04d}.fmap",
                "camera": view.camera.to_dict(),
            }
        )

    transform = normalize_scene([v.camera for v in views], [v.depth_z for v in views])
    # near/far from scaled depth percentiles, padded 10% each way
    dists = np.concatenate(
        [
            (v.depth_z * v.camera.pixel_direction_norms())[v.depth_z > 0]
            for v in views
        ]
    ) * transform.scale
    lo, hi = np.percentile(dists, [1, 99])
    manifest = {
        "frames": frames_json,
        "classes": classes.to_json(),
        "normalization": transform.to_json(),
        "near": float(max(1e-3, lo * 0.9)),
        "far": float(hi * 1.1),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def spec_from_json(d: dict) -> SyntheticSceneSpec:
    """Build a scene spec from the JSON form used by the command line."""
    prims = []
    for p in d.get("primitives", []):
        kind = p["kind"]
        if kind == "sphere":
            prims.append(Sphere(tuple(p["center"]), p["radius"], p["class_id"],
                                tuple(p["albedo"])))
        elif kind == "box":
            prims.append(Box(tuple(p["low"]), tuple(p["high"]), p["class_id"],
                             tuple(p["albedo"])))
        elif kind == "plane":
            prims.append(GroundPlane(p["z"], p["extent"], p["class_id"],
                                     tuple(p["albedo"])))
        else:
            raise ValueError(f"unknown primitive kind {kind!r}")
    kwargs = {}
    if "orbit" in d:
        kwargs["orbit"] = OrbitSpec(**d["orbit"])
    for key in ("image_size", "fov_deg", "class_names", "feature_dim", "feature_scale",
                "feature_noise", "feature_smoothing", "seed", "ambient", "light_dir"):
        if key in d:
            kwargs[key] = tuple(d[key]) if key in ("image_size", "light_dir") else d[key]
    if not prims:
        base = standard_scene_spec()
        prims = base.primitives
        kwargs.setdefault("class_names", base.class_names)
    return SyntheticSceneSpec(primitives=prims, **kwargs)
