import numpy as np
import pytest

from scribblefield.scene import load_scene
from scribblefield.synthetic import (
    GroundPlane,
    OrbitSpec,
    Sphere,
    SyntheticSceneSpec,
    generate_synthetic_scene,
    look_at_pose,
    orbit_cameras,
    render_view,
    spec_from_json,
    standard_scene_spec,
)


def ray_sphere_distance(origin, direction, center, radius):
    """Independent closed-form quadratic, solved one ray at a time."""
    oc = np.asarray(origin) - np.asarray(center)
    b = 2.0 * np.dot(oc, direction)
    c = np.dot(oc, oc) - radius**2
    disc = b * b - 4 * c
    if disc < 0:
        return np.inf
    lo = (-b - np.sqrt(disc)) / 2
    hi = (-b + np.sqrt(disc)) / 2
    if lo > 1e-6:
        return lo
    return hi if hi > 1e-6 else np.inf


class TestRenderView:
    def _sphere_view(self):
        spec = SyntheticSceneSpec(
            primitives=[Sphere((0.0, 0.0, 0.0), 0.6, 1, (0.8, 0.2, 0.2))],
            orbit=OrbitSpec(num_train=1, num_eval=0, radius=1.5, height=0.0,
                            look_at=(0, 0, 0)),
            image_size=(32, 32),
            class_names=["background", "ball"],
        )
        cams, _ = orbit_cameras(spec)
        return spec, cams[0]

    def test_depth_matches_analytic_sphere_distance(self):
        spec, cam = self._sphere_view()
        view = render_view(spec, cam)
        h, w = view.depth_z.shape
        xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        dirs_cam = np.stack(
            [(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1
        ).reshape(-1, 3)
        norms = np.linalg.norm(dirs_cam, axis=-1)
        dirs = (dirs_cam / norms[:, None]) @ cam.rotation.T
        hit = view.labels.reshape(-1) == 1
        assert hit.sum() > 100
        for i in np.flatnonzero(hit)[::37]:
            t = ray_sphere_distance(cam.center, dirs[i], (0, 0, 0), 0.6)
            z = t / norms[i]  # convert unit-ray distance to z-depth
            assert view.depth_z.reshape(-1)[i] == pytest.approx(z, abs=1e-5)

    def test_class_map_only_uses_declared_ids(self):
        spec = standard_scene_spec(image_size=(24, 24))
        cams, _ = orbit_cameras(spec)
        view = render_view(spec, cams[0])
        assert set(np.unique(view.labels)) <= set(range(spec.num_classes))

    def test_background_has_zero_depth(self):
        spec, cam = self._sphere_view()
        view = render_view(spec, cam)
        bg = view.labels == 0
        assert np.all(view.depth_z[bg] == 0)

    def test_mirrored_azimuths_render_mirrored_images(self):
        # x -> -x symmetric scene with a vertical light: a camera at
        # azimuth theta and one at pi - theta see mirror images
        spec = SyntheticSceneSpec(
            primitives=[
                GroundPlane(0.0, 1.5, 1, (0.5, 0.5, 0.5)),
                Sphere((0.0, 0.2, 0.3), 0.25, 2, (0.8, 0.3, 0.2)),
            ],
            image_size=(32, 32),
            class_names=["background", "floor", "ball"],
            light_dir=(0.0, 0.0, -1.0),
        )
        w, h = spec.image_size
        focal = w / (2.0 * np.tan(np.radians(spec.fov_deg) / 2.0))
        from scribblefield.rendering import Camera

        def cam(azimuth):
            eye = np.array([1.8 * np.cos(azimuth), 1.8 * np.sin(azimuth), 1.1])
            return Camera(focal, focal, w / 2, h / 2, w, h,
                          look_at_pose(eye, (0, 0, 0.2)))

        theta = 0.7
        a = render_view(spec, cam(theta))
        b = render_view(spec, cam(np.pi - theta))
        np.testing.assert_allclose(a.rgb, b.rgb[:, ::-1], atol=1e-9)
        np.testing.assert_array_equal(a.labels, b.labels[:, ::-1])
        np.testing.assert_allclose(a.depth_z, b.depth_z[:, ::-1], atol=1e-9)


class TestGenerateScene:
    def test_scene_loads_and_has_expected_shape(self, tmp_path):
        spec = standard_scene_spec(image_size=(24, 24))
        manifest = generate_synthetic_scene(spec, tmp_path)
        ds = load_scene(manifest)
        assert len(ds.frames) == spec.orbit.num_train + spec.orbit.num_eval
        assert len(ds.classes) == spec.num_classes
        assert ds.near < ds.far
        f = ds.frames[0]
        assert f.rgb.shape == (24, 24, 3)
        assert f.labels is not None and f.labels.shape == (24, 24)
        assert f.feature_path is not None and f.feature_path.exists()

    def test_generation_is_deterministic(self, tmp_path):
        spec = standard_scene_spec(image_size=(16, 16))
        a = generate_synthetic_scene(spec, tmp_path / "a")
        b = generate_synthetic_scene(spec, tmp_path / "b")
        assert a.read_text() == b.read_text()
        assert (a.parent / "rgb" / "0000.png").read_bytes() == (
            b.parent / "rgb" / "0000.png"
        ).read_bytes()
        assert (a.parent / "features" / "0003.fmap").read_bytes() == (
            b.parent / "features" / "0003.fmap"
        ).read_bytes()

    def test_spec_from_json_round_trip(self, tmp_path):
        d = {
            "primitives": [
                {"kind": "plane", "z": 0.0, "extent": 1.2, "class_id": 1,
                 "albedo": [0.5, 0.5, 0.5]},
                {"kind": "sphere", "center": [0, 0, 0.3], "radius": 0.25,
                 "class_id": 2, "albedo": [0.8, 0.1, 0.1]},
                {"kind": "box", "low": [0.2, 0.2, 0.0], "high": [0.5, 0.5, 0.3],
                 "class_id": 3, "albedo": [0.1, 0.1, 0.8]},
            ],
            "orbit": {"num_train": 3, "num_eval": 1},
            "image_size": [16, 16],
            "seed": 5,
        }
        spec = spec_from_json(d)
        assert spec.num_classes == 4
        manifest = generate_synthetic_scene(spec, tmp_path)
        ds = load_scene(manifest)
        assert len(ds.frames) == 4
