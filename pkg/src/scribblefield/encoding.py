"""Positional encodings for the field input.

Three modes: sinusoidal frequency encoding, a learnable multiresolution
hash grid with trilinear interpolation, and their concatenation ("hybrid").
The hybrid mode keeps a short low-frequency sinusoidal tail (L=2) so the
model can reason about coarse spatial location while the grid carries the
local detail.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import ConfigurationError

log = logging.getLogger(__name__)

try:  # jitted interpolation kernels; the numpy path below is the fallback
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*a, **k):
        def wrap(f):
            return f

        return wrap


@njit(cache=True)
def _interp_level(unit, res, side, dense, p0, p1, p2, mask, table, out, idx_out, w_out):
    """Trilinear gather for one grid level.

    Fills ``out`` (B, F) with interpolated entries and records the 8 corner
    rows/weights per point for the backward scatter.
    """
    n = unit.shape[0]
    f = table.shape[1]
    for i in range(n):
        fx = unit[i, 0] * res
        fy = unit[i, 1] * res
        fz = unit[i, 2] * res
        bx = int(fx)
        by = int(fy)
        bz = int(fz)
        if bx > res - 1:
            bx = res - 1
        if by > res - 1:
            by = res - 1
        if bz > res - 1:
            bz = res - 1
        tx = fx - bx
        ty = fy - by
        tz = fz - bz
        for k in range(8):
            cx = bx + (k & 1)
            cy = by + ((k >> 1) & 1)
            cz = bz + ((k >> 2) & 1)
            if dense:
                row = (cz * side + cy) * side + cx
            else:
                h = (np.uint64(cx) * p0) ^ (np.uint64(cy) * p1) ^ (np.uint64(cz) * p2)
                row = np.int64(h & mask)
            w = (tx if k & 1 else 1.0 - tx)
            w *= ty if (k >> 1) & 1 else 1.0 - ty
            w *= tz if (k >> 2) & 1 else 1.0 - tz
            idx_out[k, i] = row
            w_out[k, i] = w
            for c in range(f):
                out[i, c] += table[row, c] * w


@njit(cache=True)
def _scatter_level(idx, weights, upstream, grad):
    """Accumulate d(output)/d(table) for one level: grad[row] += w * up."""
    n = idx.shape[1]
    f = upstream.shape[1]
    for i in range(n):
        for k in range(8):
            row = idx[k, i]
            w = weights[k, i]
            for c in range(f):
                grad[row, c] += w * upstream[i, c]

#: frequency count for 3-d positions when no grid is used
POSITION_FREQUENCIES = 10
#: frequency count for viewing directions
VIEW_FREQUENCIES = 4
#: low-frequency tail concatenated with grid features in hybrid mode
HYBRID_TAIL_FREQUENCIES = 2

DEFAULT_HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class FrequencyEncodingConfig:
    num_frequencies: int = POSITION_FREQUENCIES

    def output_dim(self, num_coords: int) -> int:
        return 2 * num_coords * self.num_frequencies


def freq_encode(y: np.ndarray, num_frequencies: int) -> np.ndarray:
    """Sinusoidal encoding of coordinates nominally in [-1, 1].

    Output layout, per coordinate: [sin(2^0 pi y), cos(2^0 pi y), ...,
    sin(2^(L-1) pi y), cos(2^(L-1) pi y)]; coordinates are concatenated in
    order. Out-of-range inputs are tolerated (plain extrapolation).
    """
    if num_frequencies < 1:
        raise ConfigurationError("need at least one frequency")
    y = np.asarray(y)
    scales = (2.0 ** np.arange(num_frequencies)).astype(y.dtype) * np.pi
    # (..., k, L)
    angles = y[..., :, None] * scales
    parts = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (..., k, L, 2)
    return parts.reshape(*y.shape[:-1], y.shape[-1] * 2 * num_frequencies)


@dataclass(frozen=True)
class HashGridConfig:
    num_levels: int = 8
    base_resolution: int = 8
    growth_factor: float = 1.6
    features_per_entry: int = 2
    table_size: int = 2**16
    hash_primes: tuple[int, int, int] = DEFAULT_HASH_PRIMES

    def __post_init__(self):
        if self.table_size & (self.table_size - 1) != 0:
            raise ConfigurationError("table_size must be a power of two")
        if self.growth_factor <= 1.0:
            raise ConfigurationError("growth_factor must exceed 1")

    def level_resolution(self, level: int) -> int:
        return int(round(self.base_resolution * self.growth_factor**level))

    @property
    def output_dim(self) -> int:
        return self.num_levels * self.features_per_entry


def vertex_index(config: HashGridConfig, level: int, coords: np.ndarray) -> np.ndarray:
    """Table index for integer vertex coordinates at one grid level.

    Dense row-major indexing whenever the level's full vertex lattice fits
    in the table; otherwise coordinates are multiplied by fixed primes,
    XOR-ed, and reduced modulo the (power-of-two) table size.
    """
    coords = np.asarray(coords)
    res = config.level_resolution(level)
    side = res + 1
    if side**3 <= config.table_size:
        c = coords.astype(np.int64)
        idx = (c[..., 2] * side + c[..., 1]) * side + c[..., 0]
    else:
        c = coords.astype(np.uint64)
        p0, p1, p2 = (np.uint64(p) for p in config.hash_primes)
        h = (c[..., 0] * p0) ^ (c[..., 1] * p1) ^ (c[..., 2] * p2)
        idx = (h & np.uint64(config.table_size - 1)).astype(np.int64)
    return idx


# corner offsets of a unit cell, shape (8, 3); corner b has bit k of axis k
_CORNERS = np.array(
    [[(b >> 0) & 1, (b >> 1) & 1, (b >> 2) & 1] for b in range(8)], dtype=np.int64
)


@dataclass
class GridEncodeCache:
    indices: list  # per level (8, B) int64 table rows, one row per corner
    weights: list  # per level (8, B) trilinear weights
    dtype: np.dtype


class HashGrid:
    """Learnable multiresolution feature grid over the [-1, 1]^3 cube."""

    def __init__(
        self,
        config: HashGridConfig | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        init_scale: float = 1e-4,
    ):
        self.config = config or HashGridConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        t, f = self.config.table_size, self.config.features_per_entry
        self.tables = [
            rng.uniform(-init_scale, init_scale, size=(t, f)).astype(dtype)
            for _ in range(self.config.num_levels)
        ]

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def parameters(self, prefix: str = "grid") -> dict[str, np.ndarray]:
        return {f"{prefix}.level{i}": t for i, t in enumerate(self.tables)}

    def _corner_indices(self, level: int, base: np.ndarray) -> np.ndarray:
        """Table rows for the 8 cell corners, shape (8, B); matches
        ``vertex_index`` entry for entry."""
        cfg = self.config
        res = cfg.level_resolution(level)
        side = res + 1
        out = np.empty((8, base.shape[0]), dtype=np.int64)
        if side**3 <= cfg.table_size:
            for b in range(8):
                bx, by, bz = _CORNERS[b]
                out[b] = ((base[:, 2] + bz) * side + (base[:, 1] + by)) * side + (
                    base[:, 0] + bx
                )
        else:
            p0, p1, p2 = (np.uint64(p) for p in cfg.hash_primes)
            mask = np.uint64(cfg.table_size - 1)
            c = base.astype(np.uint64)
            for b in range(8):
                bx, by, bz = (np.uint64(v) for v in _CORNERS[b])
                h = ((c[:, 0] + bx) * p0) ^ ((c[:, 1] + by) * p1) ^ ((c[:, 2] + bz) * p2)
                out[b] = (h & mask).astype(np.int64)
        return out

    def encode(self, points: np.ndarray) -> tuple[np.ndarray, GridEncodeCache]:
        """Trilinearly interpolated features, concatenated over levels.

        Points outside the cube are clamped to its surface (counted and
        logged, never fatal). The output is exactly linear in the stored
        table entries.
        """
        pts = np.atleast_2d(np.asarray(points))
        dtype = self.tables[0].dtype
        outside = int(np.count_nonzero(np.any(np.abs(pts) > 1.0, axis=-1)))
        if outside:
            log.debug("clamping %d points to the scene cube", outside)
        pts = np.clip(pts, -1.0, 1.0).astype(dtype, copy=False)

        cfg = self.config
        n = pts.shape[0]
        f = cfg.features_per_entry
        feats = np.zeros((n, cfg.output_dim), dtype=dtype)
        cache = GridEncodeCache([], [], dtype)
        unit = np.ascontiguousarray((pts + dtype.type(1.0)) * dtype.type(0.5))  # [0, 1]
        for level in range(cfg.num_levels):
            res = cfg.level_resolution(level)
            side = res + 1
            dense = side**3 <= cfg.table_size
            idx = np.empty((8, n), dtype=np.int64)
            weights = np.empty((8, n), dtype=dtype)
            out = np.zeros((n, f), dtype=dtype)
            if HAVE_NUMBA:
                p0, p1, p2 = (np.uint64(p) for p in cfg.hash_primes)
                _interp_level(unit, res, side, dense, p0, p1, p2,
                              np.uint64(cfg.table_size - 1), self.tables[level],
                              out, idx, weights)
            else:
                self._interp_level_numpy(level, unit, idx, weights, out)
            feats[:, level * f : (level + 1) * f] = out
            cache.indices.append(idx)
            cache.weights.append(weights)
        return feats, cache

    def _interp_level_numpy(self, level, unit, idx, weights, out):
        cfg = self.config
        dtype = self.tables[0].dtype
        res = cfg.level_resolution(level)
        u = unit * dtype.type(res)
        base_f = np.minimum(np.floor(u), dtype.type(res - 1))
        base = base_f.astype(np.int64)
        frac = u - base_f
        idx[...] = self._corner_indices(level, base)
        axis_w = [(dtype.type(1.0) - frac[:, a], frac[:, a]) for a in range(3)]
        table = self.tables[level]
        for b in range(8):
            bx, by, bz = _CORNERS[b]
            w = axis_w[0][bx] * axis_w[1][by] * axis_w[2][bz]
            weights[b] = w
            out += table[idx[b]] * w[:, None]

    def encode_backward(
        self, cache: GridEncodeCache, upstream: np.ndarray
    ) -> list[np.ndarray]:
        """Gradients w.r.t. the table entries (one array per level)."""
        cfg = self.config
        f = cfg.features_per_entry
        upstream = np.atleast_2d(upstream)
        grads = []
        for level in range(cfg.num_levels):
            up = np.ascontiguousarray(upstream[:, level * f : (level + 1) * f])
            g = np.zeros_like(self.tables[level])
            if HAVE_NUMBA:
                _scatter_level(cache.indices[level], cache.weights[level], up, g)
            else:
                idx = cache.indices[level].reshape(-1)
                w = cache.weights[level]
                for c in range(f):
                    contrib = (w * up[:, c][None, :]).reshape(-1)
                    g[:, c] = np.bincount(idx, weights=contrib, minlength=cfg.table_size)
            grads.append(g)
        return grads


class PositionEncoder:
    """Uniform interface over the three position-encoding modes."""

    MODES = ("freq", "hashgrid", "hybrid")

    def __init__(
        self,
        mode: str = "hybrid",
        grid_config: HashGridConfig | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        position_frequencies: int = POSITION_FREQUENCIES,
    ):
        if mode not in self.MODES:
            raise ConfigurationError(f"unknown encoder mode {mode!r}")
        self.mode = mode
        self.position_frequencies = position_frequencies
        self.grid = (
            HashGrid(grid_config, rng, dtype=dtype) if mode in ("hashgrid", "hybrid") else None
        )
        if mode == "freq":
            self._freq_l = position_frequencies
        elif mode == "hybrid":
            self._freq_l = HYBRID_TAIL_FREQUENCIES
        else:
            self._freq_l = 0

    @property
    def output_dim(self) -> int:
        dim = 0
        if self.grid is not None:
            dim += self.grid.output_dim
        dim += 2 * 3 * self._freq_l
        return dim

    def encode(self, points: np.ndarray):
        points = np.atleast_2d(points)
        if self.grid is None:
            return freq_encode(points, self._freq_l), None
        grid_feats, cache = self.grid.encode(points)
        if self._freq_l == 0:
            return grid_feats, cache
        tail = freq_encode(np.clip(points, -1.0, 1.0), self._freq_l).astype(
            grid_feats.dtype, copy=False
        )
        return np.concatenate([grid_feats, tail], axis=-1), cache

    def encode_backward(self, cache, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients only; the sinusoidal part has none."""
        if self.grid is None:
            return {}
        upstream = np.atleast_2d(upstream)[:, : self.grid.output_dim]
        grads = self.grid.encode_backward(cache, upstream)
        return {f"encoder.level{i}": g for i, g in enumerate(grads)}

    def parameters(self) -> dict[str, np.ndarray]:
        if self.grid is None:
            return {}
        return self.grid.parameters("encoder")


def hybrid_encode(points: np.ndarray, grid: HashGrid) -> np.ndarray:
    """Grid features concatenated with the L=2 sinusoidal tail."""
    points = np.atleast_2d(points)
    feats, _ = grid.encode(points)
    tail = freq_encode(np.clip(points, -1.0, 1.0), HYBRID_TAIL_FREQUENCIES)
    return np.concatenate([feats, tail.astype(feats.dtype, copy=False)], axis=-1)
