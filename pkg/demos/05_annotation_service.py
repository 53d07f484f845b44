"""Drive the annotation service the way the browser UI does.

Starts the HTTP service on a live training session, posts a scribble,
starts training, waits for a segmentation refresh, and saves the overlay
that a user would see. Everything here goes through the public API only.
"""
import tempfile
import threading
import time
from pathlib import Path

import httpx
import uvicorn

from scribblefield.field import FieldConfig
from scribblefield.objective import LossWeights
from scribblefield.scene import load_scene
from scribblefield.service import Session, create_app
from scribblefield.synthetic import generate_synthetic_scene, standard_scene_spec
from scribblefield.training import TrainConfig

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(parents=True, exist_ok=True)

dataset = load_scene(generate_synthetic_scene(standard_scene_spec(image_size=(32, 32)),
                                              tempfile.mkdtemp()))
config = TrainConfig(batch_size=256, num_samples=32,
                     weights=LossWeights(0.05, 1.0, 0.0), seed=0)
session = Session(dataset, config, refresh_every=100)
server = uvicorn.Server(uvicorn.Config(create_app(session), host="127.0.0.1",
                                       port=8791, log_level="warning"))
thread = threading.Thread(target=server.run, daemon=True)
thread.start()
while not server.started:
    time.sleep(0.05)

base = "http://127.0.0.1:8791"
with httpx.Client(base_url=base, timeout=30) as client:
    scene = client.get("/api/scene").json()
    print(f"scene has {len(scene['frames'])} frames, classes:",
          [c["name"] for c in scene["classes"]])

    stroke = client.post("/api/annotations", json={
        "frame": 0, "class_id": 2, "points": [[8, 20], [14, 20]], "radius": 1,
    }).json()
    print(f"posted stroke {stroke['id']} (revision {stroke['revision']})")

    client.post("/api/training/start")
    target_version = 1
    deadline = time.time() + 120
    while time.time() < deadline:
        if session.seg_versions.get(0, 0) >= target_version:
            break
        time.sleep(0.25)
    status = client.get("/api/status").json()
    print(f"iteration {status['iteration']}, labels {status['labels']}")

    overlay = client.get("/api/frames/0/segmentation")
    (out_dir / "service_overlay.png").write_bytes(overlay.content)
    print(f"saved {out_dir/'service_overlay.png'}")
    client.post("/api/training/pause")

server.should_exit = True
thread.join(timeout=5)
session.shutdown()
print("service stopped")
