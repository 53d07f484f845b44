"""HTTP + server-push service hosting a live training session.

One background worker owns the mutable field parameters; requests talk to
it through a command queue and read immutable parameter snapshots, so no
render ever observes a half-updated model. Segmentation overlays are
re-rendered from fresh snapshots at a fixed optimization-step cadence and
announced on the event stream.
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import queue
import threading
from dataclasses import dataclass, field as dataclass_field

import anyio.to_thread
import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import Response, StreamingResponse
from PIL import Image

from .features import pca_rgb
from .field import SemanticField
from .objective import AnnotationSet
from .scene import SceneDataset
from .training import FrameRender, Trainer, TrainConfig, render_frame

log = logging.getLogger(__name__)


def rasterize_stroke(points, radius: int, width: int, height: int) -> np.ndarray:
    """Integer line walk along the polyline, dilated by a Euclidean disc
    of the brush radius, clipped to bounds; returns (P, 2) unique x, y."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] < 1 or points.shape[1] != 2:
        raise ValueError("stroke needs at least one (x, y) point")
    base: set[tuple[int, int]] = set()
    rounded = np.rint(points).astype(np.int64)
    for (x0, y0), (x1, y1) in zip(rounded[:-1], rounded[1:]):
        base.update(_line_walk(x0, y0, x1, y1))
    if len(rounded) == 1:
        base.add((int(rounded[0, 0]), int(rounded[0, 1])))
    disc = [
        (dx, dy)
        for dx in range(-radius, radius + 1)
        for dy in range(-radius, radius + 1)
        if dx * dx + dy * dy <= radius * radius
    ]
    out = set()
    for x, y in base:
        for dx, dy in disc:
            px, py = x + dx, y + dy
            if 0 <= px < width and 0 <= py < height:
                out.add((px, py))
    if not out:
        raise ValueError("stroke rasterizes to zero in-bounds pixels")
    return np.asarray(sorted(out), dtype=np.int64)


def _line_walk(x0, y0, x1, y1):
    """All integer pixels on the segment (inclusive), one per step."""
    steps = int(max(abs(x1 - x0), abs(y1 - y0)))
    if steps == 0:
        return [(int(x0), int(y0))]
    xs = np.rint(np.linspace(x0, x1, steps + 1)).astype(int)
    ys = np.rint(np.linspace(y0, y1, steps + 1)).astype(int)
    return list(zip(xs.tolist(), ys.tolist()))


@dataclass
class _Subscriber:
    events: "queue.Queue[dict]" = dataclass_field(default_factory=lambda: queue.Queue(256))

    def push(self, event: dict) -> None:
        # latest-wins per (type, frame): drop the stale duplicate if full
        try:
            self.events.put_nowait(event)
        except queue.Full:
            try:
                self.events.get_nowait()
            except queue.Empty:
                pass
            self.events.put_nowait(event)


class Session:
    """A live training session: trainer thread, snapshots, event fan-out."""

    def __init__(
        self,
        dataset: SceneDataset,
        config: TrainConfig,
        checkpoint=None,
        refresh_every: int = 250,
        autostart: bool = False,
    ):
        self.dataset = dataset
        self.config = config
        self.refresh_every = refresh_every
        self.annotations: AnnotationSet = dataset.new_annotation_set()
        self.trainer = Trainer(dataset, self.annotations, config, checkpoint=checkpoint)
        self.running = autostart
        self.fault: str | None = None
        self._commands: "queue.Queue" = queue.Queue()
        self._subscribers: list[_Subscriber] = []
        self._lock = threading.Lock()
        self._render_lock = threading.Lock()
        self._wake = threading.Event()
        self._stop = False
        self._steps_since_refresh = 0
        self._pending_refresh = False

        self.snapshot: dict[str, np.ndarray] = self.trainer.snapshot_params()
        self.snapshot_iteration = 0
        self.seg_versions: dict[int, int] = {f.id: 0 for f in dataset.frames}
        self._render_cache: dict[tuple, FrameRender] = {}
        self._render_field: SemanticField | None = None
        self._render_field_key: tuple | None = None
        self._interesting: set[int] = set()
        self._last_losses: dict = {}
        self._thread = threading.Thread(target=self._loop, name="trainer", daemon=True)
        self._thread.start()

    # -- worker ------------------------------------------------------------

    def _loop(self):
        while not self._stop:
            self._drain_commands()
            if self._stop:
                break
            if not self.running:
                if self._pending_refresh:
                    self._refresh()
                self._wake.wait(timeout=0.05)
                self._wake.clear()
                continue
            try:
                row = self.trainer.step()
                self._last_losses = {
                    k: row[k]
                    for k in ("loss", "loss_rgb", "loss_depth", "loss_semantic",
                              "loss_feature")
                }
            except Exception as e:  # trainer fault: pause, keep serving
                log.exception("training fault")
                self.fault = str(e)
                self.running = False
                self._emit({"type": "status", **self.status()})
                continue
            self._steps_since_refresh += 1
            if self._steps_since_refresh >= self.refresh_every:
                self._refresh()
            elif self.trainer.iteration % 25 == 0:
                self._emit({"type": "status", **self.status()})

    def _drain_commands(self):
        while True:
            try:
                fn = self._commands.get_nowait()
            except queue.Empty:
                return
            fn()

    def _refresh(self):
        self.snapshot = self.trainer.snapshot_params()
        self.snapshot_iteration = self.trainer.iteration
        self._steps_since_refresh = 0
        self._pending_refresh = False
        with self._lock:
            frames = set(self._interesting)
        for fid in sorted(frames):
            self.seg_versions[fid] = self.seg_versions.get(fid, 0) + 1
            self._emit({
                "type": "segmentation-updated",
                "frame": fid,
                "version": self.seg_versions[fid],
            })
        self._emit({"type": "status", **self.status()})

    # -- called from request threads ----------------------------------------

    def submit(self, fn, wait: bool = True):
        """Run a mutation on the trainer thread; totally ordered with steps."""
        if wait:
            done = threading.Event()
            box = {}

            def wrapped():
                try:
                    box["result"] = fn()
                except Exception as e:  # surface to the caller
                    box["error"] = e
                finally:
                    done.set()

            self._commands.put(wrapped)
            self._wake.set()
            done.wait(timeout=30)
            if "error" in box:
                raise box["error"]
            return box.get("result")
        self._commands.put(fn)
        self._wake.set()
        return None

    def add_stroke(self, frame_id: int, class_id: int, points, radius: int) -> int:
        frame = self.dataset.frame_by_id(frame_id)
        h, w = frame.rgb.shape[:2]
        pixels = rasterize_stroke(points, radius, w, h)

        def apply():
            sid = self.annotations.add_stroke(frame_id, class_id, pixels)
            self._note_annotation(frame_id)
            return sid

        return self.submit(apply)

    def delete_stroke(self, stroke_id: int) -> None:
        def apply():
            frames = {s.frame for s in self.annotations.strokes if s.id == stroke_id}
            self.annotations.delete_stroke(stroke_id)
            for fid in frames:
                self._note_annotation(fid)

        self.submit(apply)

    def add_class(self, name: str, color=None) -> dict:
        def apply():
            entry = self.dataset.classes.add(name, color)
            self.trainer.add_class()
            return {"id": entry.id, "name": entry.name, "color": list(entry.color)}

        return self.submit(apply)

    def _note_annotation(self, frame_id: int) -> None:
        # a new label restarts the refresh window so the next overlay has
        # trained on it for a full cycle
        with self._lock:
            self._interesting.add(frame_id)
        self._steps_since_refresh = 0
        self._pending_refresh = True

    def mark_viewed(self, frame_id: int) -> None:
        with self._lock:
            self._interesting.add(frame_id)

    def set_running(self, running: bool) -> None:
        def apply():
            self.running = running
            self.fault = None if running else self.fault

        self.submit(apply)

    def status(self) -> dict:
        return {
            "iteration": self.trainer.iteration,
            "training": self.running,
            "labels": self.annotations.labeled_pixel_count(),
            "annotation_revision": self.annotations.revision,
            "losses": self._last_losses,
            "fault": self.fault,
        }

    def subscribe(self) -> _Subscriber:
        sub = _Subscriber()
        self._subscribers.append(sub)
        return sub

    def unsubscribe(self, sub: _Subscriber) -> None:
        if sub in self._subscribers:
            self._subscribers.remove(sub)

    def _emit(self, event: dict) -> None:
        for sub in list(self._subscribers):
            sub.push(event)

    def render(self, frame_id: int, heads: tuple) -> FrameRender:
        """Render from the latest snapshot, cached per snapshot version.

        Serialized: concurrent requests share one scratch field, and a
        render must never see its parameters half-replaced.
        """
        self.mark_viewed(frame_id)
        with self._render_lock:
            key = (frame_id, self.snapshot_iteration, heads)
            cached = self._render_cache.get(key)
            if cached is not None:
                return cached
            frame = self.dataset.frame_by_id(frame_id)
            snap_field = self._field_from_snapshot()
            out = render_frame(
                snap_field, frame.camera, self.dataset.near, self.dataset.far,
                self.config.num_samples, heads=heads, tile_size=self.config.tile_size,
            )
            self._render_cache = {k: v for k, v in self._render_cache.items()
                                  if k[1] == self.snapshot_iteration}
            self._render_cache[key] = out
            return out

    def _field_from_snapshot(self) -> SemanticField:
        snap = self.snapshot
        num_classes = snap["semantic.b1"].shape[0]
        key = (id(snap), num_classes)
        if self._render_field_key == key:
            return self._render_field
        if self._render_field is None or self._render_field.num_classes != num_classes:
            cfg = dataclasses.replace(self.trainer.field.config, num_classes=num_classes)
            self._render_field = SemanticField(cfg)
        for name, arr in self._render_field.parameters().items():
            arr[...] = snap[name]
        self._render_field_key = key
        return self._render_field

    def shutdown(self):
        self._stop = True
        self._wake.set()
        self._thread.join(timeout=10)


def _png_response(img8: np.ndarray, mode: str = "RGB") -> Response:
    im = Image.fromarray(img8, mode=mode)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return Response(buf.getvalue(), media_type="image/png")


def _indexed_png_response(class_map: np.ndarray, classes) -> Response:
    im = Image.fromarray(class_map.astype(np.uint8), mode="P")
    flat = []
    for e in classes.entries:
        flat.extend(e.color)
    im.putpalette(flat)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return Response(buf.getvalue(), media_type="image/png")


def create_app(session: Session, frontend_dir=None) -> FastAPI:
    app = FastAPI(title="scribblefield annotation service")
    ds = session.dataset

    def get_frame(frame_id: int):
        try:
            return ds.frame_by_id(frame_id)
        except KeyError:
            raise HTTPException(404, f"unknown frame {frame_id}")

    @app.get("/api/scene")
    def scene_info():
        return {
            "frames": [
                {
                    "id": f.id,
                    "width": int(f.rgb.shape[1]),
                    "height": int(f.rgb.shape[0]),
                    "split": f.split,
                }
                for f in ds.frames
            ],
            "classes": ds.classes.to_json(),
        }

    @app.get("/api/status")
    def status():
        return session.status()

    @app.get("/api/frames/{frame_id}/rgb")
    def frame_rgb(frame_id: int, view: str = "source"):
        frame = get_frame(frame_id)
        if view == "rendered":
            r = session.render(frame_id, ("color",))
            img = np.clip(r.rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)
        else:
            img = np.clip(frame.rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)
        return _png_response(img)

    @app.get("/api/frames/{frame_id}/depth")
    def frame_depth(frame_id: int):
        get_frame(frame_id)
        r = session.render(frame_id, ("color",))
        d = r.depth
        span = float(d.max() - d.min()) or 1.0
        img = ((d - d.min()) / span * 255.0).astype(np.uint8)
        return _png_response(img, mode="L")

    @app.get("/api/frames/{frame_id}/segmentation")
    def frame_segmentation(frame_id: int):
        get_frame(frame_id)
        r = session.render(frame_id, ("semantic",))
        return _indexed_png_response(r.class_map, ds.classes)

    @app.get("/api/frames/{frame_id}/features")
    def frame_features(frame_id: int):
        get_frame(frame_id)
        r = session.render(frame_id, ("semantic", "feature"))
        rgb = pca_rgb(r.features)
        img = np.clip(rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)
        return _png_response(img)

    @app.get("/api/annotations")
    def list_annotations():
        return [
            {"id": s.id, "frame": s.frame, "class_id": s.class_id,
             "pixels": s.pixels.tolist()}
            for s in session.annotations.strokes
        ]

    @app.post("/api/annotations")
    def post_annotation(payload: dict):
        for key in ("frame", "class_id", "points"):
            if key not in payload:
                raise HTTPException(422, f"missing field {key!r}")
        frame_id = payload["frame"]
        class_id = payload["class_id"]
        radius = int(payload.get("radius", 0))
        get_frame(frame_id)
        if not (0 <= class_id < len(ds.classes)):
            raise HTTPException(422, f"unknown class {class_id}")
        if radius < 0 or radius > 64:
            raise HTTPException(422, "brush radius out of range")
        try:
            sid = session.add_stroke(frame_id, class_id, payload["points"], radius)
        except ValueError as e:
            raise HTTPException(422, str(e))
        return {"id": sid, "revision": session.annotations.revision}

    @app.delete("/api/annotations/{stroke_id}")
    def delete_annotation(stroke_id: int):
        try:
            session.delete_stroke(stroke_id)
        except KeyError as e:
            raise HTTPException(404, str(e))
        return {"revision": session.annotations.revision}

    @app.post("/api/classes")
    def post_class(payload: dict):
        if "name" not in payload or not str(payload["name"]).strip():
            raise HTTPException(422, "class needs a name")
        return session.add_class(str(payload["name"]), payload.get("color"))

    @app.post("/api/training/start")
    def start_training():
        session.set_running(True)
        return session.status()

    @app.post("/api/training/pause")
    def pause_training():
        session.set_running(False)
        return session.status()

    @app.get("/api/events")
    async def events(request: Request):
        sub = session.subscribe()

        def pop():
            try:
                return sub.events.get(timeout=0.25)
            except queue.Empty:
                return None

        async def stream():
            try:
                yield _sse({"type": "status", **session.status()})
                idle = 0
                while not await request.is_disconnected():
                    event = await anyio.to_thread.run_sync(pop)
                    if event is not None:
                        idle = 0
                        yield _sse(event)
                    else:
                        idle += 1
                        if idle >= 60:  # ~15 s without events
                            idle = 0
                            yield ": keepalive\n\n"
            finally:
                session.unsubscribe(sub)

        return StreamingResponse(stream(), media_type="text/event-stream")

    if frontend_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app


def _sse(event: dict) -> str:
    return f"event: {event.get('type', 'message')}\ndata: {json.dumps(event)}\n\n"
