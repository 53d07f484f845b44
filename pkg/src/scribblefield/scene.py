"""Scene manifests, RGB-D loading, normalization into the unit cube,
annotation persistence, checkpoints, and segmentation export.

On-disk conventions: RGB is 8-bit PNG; depth is 16-bit PNG in millimeters
with 0 marking a missing measurement (converted to distance along the
unit ray at load); poses are row-major 4x4 camera-to-world with x right,
y down, +z forward. Manifest paths are relative so scenes relocate.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import nn
from .objective import AnnotationSet
from .rendering import Camera

CHECKPOINT_MAGIC = b"SFCP"
CHECKPOINT_VERSION = 1


class SceneLoadError(ValueError):
    pass


class CheckpointConfigMismatch(ValueError):
    def __init__(self, diffs: dict):
        self.diffs = diffs
        lines = "; ".join(f"{k}: checkpoint={a!r} requested={b!r}" for k, (a, b) in diffs.items())
        super().__init__(f"checkpoint config does not match: {lines}")


@dataclass
class ClassEntry:
    id: int
    name: str
    color: tuple[int, int, int]


class ClassTable:
    def __init__(self, entries: list[ClassEntry]):
        self.entries = list(entries)
        ids = [e.id for e in self.entries]
        if ids != list(range(len(ids))):
            raise SceneLoadError("class ids must be 0..C-1 in order")

    def __len__(self):
        return len(self.entries)

    def add(self, name: str, color=None) -> ClassEntry:
        if color is None:
            color = _default_palette(len(self.entries) + 1)[-1]
        e = ClassEntry(len(self.entries), name, tuple(color))
        self.entries.append(e)
        return e

    def to_json(self) -> list[dict]:
        return [{"id": e.id, "name": e.name, "color": list(e.color)} for e in self.entries]

    @classmethod
    def from_json(cls, rows: list[dict]) -> "ClassTable":
        return cls([ClassEntry(r["id"], r["name"], tuple(r["color"])) for r in rows])


def _default_palette(n: int) -> list[tuple[int, int, int]]:
    base = [
        (90, 90, 90), (230, 60, 60), (60, 130, 230), (70, 200, 90), (240, 190, 40),
        (180, 80, 220), (70, 210, 210), (240, 120, 40), (150, 110, 70), (200, 200, 200),
    ]
    out = [base[i % len(base)] for i in range(n)]
    return out


@dataclass
class SceneTransform:
    """Similarity transform into the [-1,1] cube: x -> (x - offset) * scale."""

    scale: float
    offset: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.offset) * self.scale

    def to_json(self) -> dict:
        return {"scale": self.scale, "offset": list(map(float, self.offset))}

    @classmethod
    def from_json(cls, d: dict) -> "SceneTransform":
        return cls(float(d["scale"]), np.asarray(d["offset"], dtype=np.float64))


@dataclass
class Frame:
    id: int
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray | None  # (H, W) ray distance in normalized units
    depth_valid: np.ndarray | None
    camera: Camera  # normalized
    raw_camera: Camera  # as stored in the manifest (world units)
    feature_path: Path | None = None
    labels: np.ndarray | None = None  # (H, W) ground-truth class ids
    feature_targets: np.ndarray | None = None  # (Hf, Wf, D) encoded targets
    raw_features: object = None  # FeatureMap, populated on demand
    split: str = "train"


class SceneDataset:
    def __init__(self, root: Path, frames: list[Frame], classes: ClassTable,
                 transform: SceneTransform, near: float, far: float):
        self.root = Path(root)
        self.frames = frames
        self.classes = classes
        self.transform = transform
        self.near = near
        self.far = far

    @property
    def feature_target_dim(self) -> int:
        for f in self.frames:
            if f.feature_targets is not None:
                return f.feature_targets.shape[-1]
        return 0

    @property
    def total_pixels(self) -> int:
        return sum(f.rgb.shape[0] * f.rgb.shape[1] for f in self.frames)

    def has_raw_features(self) -> bool:
        return any(f.feature_path is not None for f in self.frames)

    def new_annotation_set(self) -> AnnotationSet:
        return AnnotationSet(num_classes_fn=lambda: len(self.classes))

    def frame_by_id(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.id == frame_id:
                return f
        raise KeyError(f"unknown frame id {frame_id}")

    def subset(self, frame_ids) -> "SceneDataset":
        """A view restricted to the given frame ids (shared arrays)."""
        wanted = set(frame_ids)
        frames = [f for f in self.frames if f.id in wanted]
        if not frames:
            raise SceneLoadError("subset selects no frames")
        return SceneDataset(self.root, frames, self.classes, self.transform,
                            self.near, self.far)

    def split_ids(self, split: str) -> list[int]:
        ids = [f.id for f in self.frames if f.split == split]
        return ids


def backproject_depth(camera: Camera, depth_z: np.ndarray, stride: int = 4) -> np.ndarray:
    """World points from a metric z-depth image (0 = missing)."""
    h, w = depth_z.shape
    ys, xs = np.mgrid[0:h:stride, 0:w:stride]
    z = depth_z[ys, xs]
    good = z > 0
    xs, ys, z = xs[good] + 0.5, ys[good] + 0.5, z[good]
    cam_pts = np.stack(
        [(xs - camera.cx) / camera.fx * z, (ys - camera.cy) / camera.fy * z, z], axis=-1
    )
    return cam_pts @ camera.rotation.T + camera.center


def normalize_scene(cameras: list[Camera], depth_images: list[np.ndarray] | None = None,
                    margin: float = 0.1) -> SceneTransform:
    """Similarity transform mapping camera centers plus the 1st-99th
    percentile of backprojected depth into the cube with a margin.

    Degenerate geometry (no spread) falls back to unit scale.
    """
    if not cameras:
        raise SceneLoadError("need at least one camera")
    pts = [np.stack([c.center for c in cameras])]
    if depth_images:
        for cam, depth in zip(cameras, depth_images):
            if depth is None or not np.any(depth > 0):
                continue
            p = backproject_depth(cam, depth)
            if len(p):
                lo, hi = np.percentile(p, [1, 99], axis=0)
                pts.append(np.clip(p, lo, hi))
    allpts = np.concatenate(pts, axis=0)
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    center = (lo + hi) / 2
    half = float(np.max(hi - lo) / 2)
    if half < 1e-9:
        return SceneTransform(1.0, center)
    return SceneTransform((1.0 - margin) / half, center)


def load_rgb(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return img / 255.0


def save_rgb(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_depth_mm(path) -> np.ndarray:
    """Raw 16-bit depth in meters; 0 stays 0 (missing)."""
    img = np.asarray(Image.open(path))
    if img.dtype != np.uint16:
        raise SceneLoadError(f"{path}: depth must be 16-bit PNG")
    return img.astype(np.float64) / 1000.0

def save_depth_mm(path, depth_m: np.ndarray) -> None:
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_labels(path) -> np.ndarray:
    img = Image.open(path)
    return np.asarray(img.convert("P") if img.mode == "P" else img, dtype=np.int64)


def load_scene(manifest_path, load_features: bool = False) -> SceneDataset:
    """Load a scene manifest; depth becomes distance along the unit ray in
    normalized scene units, cameras are normalized, sources untouched."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SceneLoadError(f"cannot read manifest: {e}") from e
    rows = manifest.get("frames", [])
    if not rows:
        raise SceneLoadError("empty scene: manifest lists no frames")
    classes = ClassTable.from_json(manifest.get("classes", []))

    raw_cams, depth_zs, loaded = [], [], []
    for row in rows:
        fid = row["id"]
        cam = Camera.from_dict(row["camera"])
        rgb_path = root / row["rgb"]
        if not rgb_path.exists():
            raise SceneLoadError(f"frame {fid}: missing rgb file {rgb_path}")
        rgb = load_rgb(rgb_path)
        if rgb.shape[:2] != (cam.height, cam.width):
            raise SceneLoadError(f"frame {fid}: rgb size {rgb.shape[:2]} does not match camera")
        depth_z = None
        if row.get("depth"):
            dp = root / row["depth"]
            if not dp.exists():
                raise SceneLoadError(f"frame {fid}: missing depth file {dp}")
            depth_z = load_depth_mm(dp)
            if depth_z.shape != rgb.shape[:2]:
                raise SceneLoadError(f"frame {fid}: depth size differs from rgb")
        labels = None
        if row.get("labels"):
            labels = load_labels(root / row["labels"])
        loaded.append((fid, row, cam, rgb, depth_z, labels))
        raw_cams.append(cam)
        depth_zs.append(depth_z)

    if "normalization" in manifest:
        transform = SceneTransform.from_json(manifest["normalization"])
    else:
        transform = normalize_scene(raw_cams, depth_zs)

    frames = []
    for fid, row, cam, rgb, depth_z, labels in loaded:
        norm_cam = cam.transformed(transform.scale, transform.offset)
        depth_t = valid = None
        if depth_z is not None:
            valid = depth_z > 0
            depth_t = depth_z * cam.pixel_direction_norms() * transform.scale
            depth_t[~valid] = 0.0
        fpath = root / row["features"] if row.get("features") else None
        if fpath is not None and not fpath.exists():
            raise SceneLoadError(f"frame {fid}: missing feature file {fpath}")
        frames.append(Frame(fid, rgb, depth_t, valid, norm_cam, cam, fpath, labels,
                            split=row.get("split", "train")))

    near, far = manifest.get("near"), manifest.get("far")
    if near is None or far is None:
        near, far = derive_near_far(frames)
    ds = SceneDataset(root, frames, classes, transform, float(near), float(far))
    if load_features:
        for f in ds.frames:
            if f.feature_path is not None:
                from .features import load_feature_map

                f.raw_features = load_feature_map(f.feature_path)
    return ds


def derive_near_far(frames: list[Frame], pad: float = 0.1) -> tuple[float, float]:
    """Near/far from the 1st/99th percentiles of observed ray distance,
    padded by 10% each way (fallback: the cube diagonal)."""
    dists = [f.depth[f.depth_valid] for f in frames if f.depth is not None]
    dists = np.concatenate([d for d in dists if d.size]) if dists else np.array([])
    if dists.size == 0:
        return 0.05, 2.0 * np.sqrt(3.0)
    lo, hi = np.percentile(dists, [1, 99])
    near = max(1e-3, lo * (1 - pad))
    far = hi * (1 + pad)
    return float(near), float(far)


def save_annotations(path, annotations: AnnotationSet) -> None:
    """One stroke per JSONL line: id, frame, class, pixel list."""
    with open(path, "w") as f:
        for s in annotations.strokes:
            f.write(json.dumps({
                "id": s.id,
                "frame": s.frame,
                "class_id": s.class_id,
                "pixels": s.pixels.tolist(),
            }) + "\n")


def load_annotations(path, num_classes: int | None = None) -> AnnotationSet:
    ann = AnnotationSet(None if num_classes is None else (lambda: num_classes))
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            ann.add_stroke(row["frame"], row["class_id"], row["pixels"], stroke_id=row["id"])
    return ann


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: dict[str, dict]  # optimizer name -> {hypers, step_count, moments}
    iteration: int
    config: dict
    annotation_revision: int = 0


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Single binary blob: magic, version, length-prefixed JSON header,
    then the raw little-endian array payloads in header order."""
    arrays: list[tuple[str, np.ndarray]] = [(f"param:{k}", v) for k, v in ckpt.params.items()]
    adam_meta = {}
    for opt_name, st in ckpt.adam.items():
        adam_meta[opt_name] = {k: v for k, v in st.items() if k != "moments"}
        for kind in ("first", "second"):
            for pname, arr in st["moments"][kind].items():
                arrays.append((f"adam:{opt_name}:{kind}:{pname}", arr))
    header = {
        "iteration": ckpt.iteration,
        "annotation_revision": ckpt.annotation_revision,
        "config": ckpt.config,
        "adam": adam_meta,
        "arrays": [
            {"name": n, "shape": list(a.shape), "dtype": str(a.dtype)} for n, a in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise SceneLoadError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise SceneLoadError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    offset = 12 + hlen
    params: dict[str, np.ndarray] = {}
    moments: dict[str, dict] = {
        name: {"first": {}, "second": {}} for name in header["adam"]
    }
    for meta in header["arrays"]:
        dt = np.dtype(meta["dtype"]).newbyteorder("<")
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
        offset += arr.nbytes
        arr = arr.reshape(meta["shape"]).astype(np.dtype(meta["dtype"]), copy=True)
        name = meta["name"]
        if name.startswith("param:"):
            params[name[len("param:"):]] = arr
        else:
            _, opt_name, kind, pname = name.split(":", 3)
            moments[opt_name][kind][pname] = arr
    adam = {}
    for opt_name, meta in header["adam"].items():
        adam[opt_name] = dict(meta)
        adam[opt_name]["moments"] = moments[opt_name]
    return Checkpoint(params, adam, header["iteration"], header["config"],
                      header["annotation_revision"])


def check_config_compatible(ckpt: Checkpoint, config: dict) -> None:
    """Refuse resume when config echoes differ; the error lists the diff."""
    diffs = {}

    def walk(a, b, prefix=""):
        keys = set(a) | set(b)
        for k in sorted(keys):
            pa, pb = a.get(k), b.get(k)
            name = f"{prefix}{k}"
            if isinstance(pa, dict) and isinstance(pb, dict):
                walk(pa, pb, name + ".")
            elif _json_normalize(pa) != _json_normalize(pb):
                diffs[name] = (pa, pb)

    walk(ckpt.config, config)
    if diffs:
        raise CheckpointConfigMismatch(diffs)


def _json_normalize(v):
    return json.loads(json.dumps(v))


def export_segmentation(class_maps: dict[int, np.ndarray], classes: ClassTable,
                        out_dir) -> list[Path]:
    """Indexed-color PNG per frame plus a palette.json naming the classes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for fid, cm in sorted(class_maps.items()):
        p = out_dir / f"frame_{fid:04d}.png"
        write_indexed_png(p, cm, classes)
        paths.append(p)
    palette = out_dir / "palette.json"
    palette.write_text(json.dumps(classes.to_json(), indent=2, sort_keys=True))
    paths.append(palette)
    return paths


def write_indexed_png(path, class_map: np.ndarray, classes: ClassTable) -> None:
    cm = np.asarray(class_map)
    if cm.min() < 0 or cm.max() >= max(len(classes), 1):
        raise ValueError("class map references an id outside the class table")
    img = Image.fromarray(cm.astype(np.uint8), mode="P")
    flat = []
    for e in classes.entries:
        flat.extend(e.color)
    img.putpalette(flat)
    img.save(path)


def load_indexed_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)
