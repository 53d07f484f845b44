"""Ray generation, stratified sampling, and volumetric integration.

Camera convention: x right, y down, the camera looks along +z, poses are
camera-to-world. The compositor integrates any per-sample quantity with
the same weights: color, depth (value = sample distance), semantic logits
and feature vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConfigurationError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray  # (4, 4), row-major

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64)
        if self.camera_to_world.shape != (4, 4):
            raise ConfigurationError("pose must be a 4x4 camera-to-world matrix")
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigurationError("focal lengths must be positive")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5) or not np.isclose(
            np.linalg.det(r), 1.0, atol=1e-5
        ):
            raise ConfigurationError("pose rotation must be orthonormal with det +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    def transformed(self, scale: float, offset: np.ndarray) -> "Camera":
        """The same camera with its center mapped by x -> (x - offset) * scale."""
        pose = self.camera_to_world.copy()
        pose[:3, 3] = (pose[:3, 3] - np.asarray(offset)) * scale
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def pixel_direction_norms(self) -> np.ndarray:
        """Per-pixel norm of the camera-space direction ((u-cx)/fx, (v-cy)/fy, 1)
        at pixel centers; converts z-depth to distance along the unit ray."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        return np.sqrt(gx**2 + gy**2 + 1.0)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "camera_to_world": self.camera_to_world.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
            np.asarray(d["camera_to_world"], dtype=np.float64),
        )


@dataclass
class RayBundle:
    """A batch of rays; directions are unit-norm world vectors."""

    origins: np.ndarray  # (B, 3)
    directions: np.ndarray  # (B, 3)
    near: np.ndarray  # (B,)
    far: np.ndarray  # (B,)

    def __len__(self):
        return self.origins.shape[0]


def generate_rays(camera: Camera, pixels: np.ndarray, near: float, far: float) -> RayBundle:
    """Rays through the given float pixel coordinates (x, y).

    Callers that want rays through pixel centers pass integer coordinates
    plus 0.5.
    """
    if not (near >= 0 and near < far):
        raise ConfigurationError("need 0 <= near < far")
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    dirs_cam = np.stack(
        [
            (px[:, 0] - camera.cx) / camera.fx,
            (px[:, 1] - camera.cy) / camera.fy,
            np.ones(px.shape[0]),
        ],
        axis=-1,
    )
    dirs_world = dirs_cam @ camera.rotation.T
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs_world.shape).copy()
    n = np.full(len(px), near)
    f = np.full(len(px), far)
    return RayBundle(origins, dirs_world, n, f)


@dataclass
class RaySamples:
    """Sorted sample distances, spacings, and sample points for a ray batch."""

    t: np.ndarray  # (B, N)
    delta: np.ndarray  # (B, N); delta[i] = t[i+1]-t[i], last = far - t[-1]
    points: np.ndarray  # (B, N, 3)


def sample_along_ray(
    rays: RayBundle,
    num_samples: int,
    stratified: bool = False,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> RaySamples:
    """One sample per uniform bin over [near, far]; bin centers when not
    stratified, uniform within each bin otherwise."""
    if num_samples < 1:
        raise ConfigurationError("need at least one sample")
    b = len(rays)
    near = rays.near[:, None]
    span = (rays.far - rays.near)[:, None] / num_samples
    edges = near + span * np.arange(num_samples)[None, :]
    if stratified:
        if rng is None:
            raise ConfigurationError("stratified sampling needs an rng")
        t = edges + span * rng.random(size=(b, num_samples))
    else:
        t = edges + 0.5 * span
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = rays.far - t[:, -1]
    points = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return RaySamples(t.astype(dtype), delta.astype(dtype), points.astype(dtype))


@dataclass
class CompositeResult:
    values: np.ndarray  # (B, K) integrated quantities
    weights: np.ndarray  # (B, N) in [0, 1]
    transmittance: np.ndarray  # (B, N), nonincreasing, starts at 1


def composite(sigma: np.ndarray, values: np.ndarray, delta: np.ndarray) -> CompositeResult:
    """Integrate per-sample values along rays.

    weights w_i = T_i (1 - exp(-sigma_i delta_i)) with the transmittance
    T_i = exp(-sum_{j<i} sigma_j delta_j); the result is sum_i w_i v_i.
    """
    sigma = np.atleast_2d(sigma)
    delta = np.atleast_2d(delta)
    tau = sigma * delta
    accum = np.cumsum(tau, axis=-1)
    transmittance = np.ones_like(tau)
    transmittance[:, 1:] = np.exp(-accum[:, :-1])
    alpha = -np.expm1(-tau)
    weights = transmittance * alpha
    out = np.einsum("bn,bnk->bk", weights, values)
    return CompositeResult(out, weights, transmittance)


def composite_backward(
    upstream: np.ndarray,
    sigma: np.ndarray,
    values: np.ndarray,
    delta: np.ndarray,
    result: CompositeResult,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of the integration w.r.t. densities and values.

    d(out)/d(v_i) is just w_i. The density gradient couples each sample to
    everything behind it through the transmittance:
    d(out)/d(tau_i) = A_i g_i - sum_{j>i} w_j g_j, where g_j = upstream . v_j
    and A_i = T_i exp(-tau_i) is the transmittance after sample i.
    """
    upstream = np.atleast_2d(upstream)
    sigma = np.atleast_2d(sigma)
    delta = np.atleast_2d(delta)
    w = result.weights
    d_values = w[..., None] * upstream[:, None, :]
    g = np.einsum("bk,bnk->bn", upstream, values)
    after = result.transmittance * np.exp(-sigma * delta)
    wg = w * g
    # suffix sum over j > i
    tail = np.cumsum(wg[:, ::-1], axis=-1)[:, ::-1] - wg
    d_tau = after * g - tail
    d_sigma = d_tau * delta
    return d_sigma, d_values
