import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from featexport import (
    BackboneSpec,
    BackboneUnavailable,
    FmapError,
    export_features,
    get_spec,
    read_fmap,
    validate_fmap,
    write_fmap,
)
from featexport.cli import main


def fake_extractor(spec: BackboneSpec):
    """Deterministic stand-in: average-pool each stride x stride block and
    project to the backbone's channel count with a fixed matrix."""
    rng = np.random.default_rng(42)
    proj = rng.normal(size=(3, spec.channels)).astype(np.float32)

    def extract(rgb: np.ndarray) -> np.ndarray:
        h, w = spec.input_shape(rgb.shape[0], rgb.shape[1])
        x = rgb[:h, :w]
        s = spec.stride
        pooled = x.reshape(h // s, s, w // s, s, 3).mean(axis=(1, 3))
        return (pooled @ proj).astype(np.float32)

    return extract


@pytest.fixture
def scene(tmp_path):
    rng = np.random.default_rng(0)
    (tmp_path / "rgb").mkdir()
    frames = []
    for i in range(3):
        img = (rng.random((480, 640, 3)) * 255).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / "rgb" / f"{i:04d}.png")
        frames.append({"id": i, "rgb": f"rgb/{i:04d}.png",
                       "camera": {"fx": 500, "fy": 500, "cx": 320, "cy": 240,
                                  "width": 640, "height": 480,
                                  "camera_to_world": np.eye(4).tolist()}})
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"frames": frames, "classes": []}))
    return manifest


class TestGeometry:
    def test_vit_stride8_on_vga_gives_60x80(self):
        spec = get_spec("dino_vits8")
        assert spec.feature_shape(480, 640) == (60, 80)
        assert spec.channels == 384

    def test_fcn_geometry(self):
        spec = get_spec("fcn_resnet50")
        assert spec.feature_shape(480, 640) == (60, 80)
        assert spec.channels == 2048

    def test_non_multiple_sizes_floor(self):
        spec = get_spec("dino_vits8")
        assert spec.input_shape(100, 205) == (96, 200)
        assert spec.feature_shape(100, 205) == (12, 25)

    def test_unknown_backbone_fails_clearly(self):
        with pytest.raises(BackboneUnavailable, match="available"):
            get_spec("nope")


class TestExport:
    def test_writes_one_fmap_per_frame_with_valid_headers(self, scene):
        spec = get_spec("dino_vits8")
        written = export_features(scene, spec, extractor=fake_extractor(spec))
        assert len(written) == 3
        for p in written:
            info = validate_fmap(p)
            assert (info["height"], info["width"], info["dim"]) == (60, 80, 384)

    def test_payload_is_little_endian_f32(self, scene):
        spec = get_spec("dino_vits8")
        written = export_features(scene, spec, extractor=fake_extractor(spec))
        raw = written[0].read_bytes()
        data = np.frombuffer(raw, dtype="<f4", offset=20)
        assert data.size == 60 * 80 * 384
        back = read_fmap(written[0])
        assert back.dtype == np.float32

    def test_manifest_updated_with_relative_paths(self, scene):
        spec = get_spec("dino_vits8")
        export_features(scene, spec, extractor=fake_extractor(spec))
        manifest = json.loads(scene.read_text())
        for row in manifest["frames"]:
            assert row["features"].startswith("features_dino_vits8/")
            assert (scene.parent / row["features"]).exists()

    def test_rerun_is_idempotent(self, scene):
        spec = get_spec("dino_vits8")
        a = export_features(scene, spec, extractor=fake_extractor(spec))
        first = [p.read_bytes() for p in a]
        b = export_features(scene, spec, extractor=fake_extractor(spec))
        assert [p.read_bytes() for p in b] == first

    def test_wrong_extractor_shape_rejected(self, scene):
        spec = get_spec("dino_vits8")

        def bad(rgb):
            return np.zeros((10, 10, 384), dtype=np.float32)

        with pytest.raises(ValueError, match="expected"):
            export_features(scene, spec, extractor=bad)


class TestValidator:
    def test_truncated_file_reports_offset(self, tmp_path):
        p = tmp_path / "x.fmap"
        write_fmap(p, np.zeros((2, 2, 3), dtype=np.float32))
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FmapError, match="byte"):
            validate_fmap(p)

    def test_cli_validate(self, tmp_path, capsys):
        good = tmp_path / "good.fmap"
        write_fmap(good, np.zeros((2, 3, 4), dtype=np.float32))
        bad = tmp_path / "bad.fmap"
        bad.write_bytes(b"JUNKJUNKJUNK")
        rc = main(["validate", str(good), str(bad)])
        out = capsys.readouterr().out
        assert rc == 1
        assert "ok (2x3x4)" in out and "INVALID" in out
