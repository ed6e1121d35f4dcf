"""Signed distance grids: 2D fields from leaf masks, 3D fields from scans."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateError, ValidationError

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class Mask2D:
    """Binary leaf mask. Row ``i`` / column ``j`` has its centre at
    ``((j + 0.5) * pixel_scale, (i + 0.5) * pixel_scale)`` in UV units."""

    bits: np.ndarray
    pixel_scale: float = 0.0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValidationError("mask must be 2-dimensional")
        if self.pixel_scale <= 0:
            self.pixel_scale = 1.0 / max(self.bits.shape)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def validate(self) -> "Mask2D":
        n = self.area
        if n == 0 or n == self.bits.size:
            raise DegenerateError("mask needs both foreground and background pixels")
        return self

    def pixel_centers(self) -> np.ndarray:
        ii, jj = np.nonzero(np.ones_like(self.bits))
        return np.stack([(jj + 0.5) * self.pixel_scale, (ii + 0.5) * self.pixel_scale], axis=1)


def cleanup_mask(mask: Mask2D) -> Mask2D:
    """Make a mask meshable: keep the largest 4-connected component, fill
    holes, close bow-tie pinches, and keep only pixels covered by the largest
    edge-connected set of fully occupied 2x2 blocks (so the triangulated mask
    is a single disk)."""
    bits = mask.bits.copy()
    for _ in range(32):
        prev = bits
        bits = _largest(bits)
        bits = ndimage.binary_fill_holes(bits, structure=FOUR_CONNECTED)
        bits = _fill_pinches(bits)
        full = bits[:-1, :-1] & bits[1:, :-1] & bits[:-1, 1:] & bits[1:, 1:]
        bits = _cover(_largest(full), bits.shape)
        if np.array_equal(bits, prev):
            break
    return Mask2D(bits, mask.pixel_scale)


def _largest(bits: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(bits, structure=FOUR_CONNECTED)
    if n <= 1:
        return bits.copy()
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def _fill_pinches(bits: np.ndarray) -> np.ndarray:
    """Complete a block wherever two full blocks meet at a single pixel."""
    bits = bits.copy()
    for _ in range(bits.size):
        full = bits[:-1, :-1] & bits[1:, :-1] & bits[:-1, 1:] & bits[1:, 1:]
        diag = full[:-1, :-1] & full[1:, 1:] & ~full[:-1, 1:] & ~full[1:, :-1]
        anti = full[:-1, 1:] & full[1:, :-1] & ~full[:-1, :-1] & ~full[1:, 1:]
        if not (diag.any() or anti.any()):
            break
        for i, j in zip(*np.nonzero(diag)):
            bits[i:i + 2, j + 1:j + 3] = True
        for i, j in zip(*np.nonzero(anti)):
            bits[i:i + 2, j:j + 2] = True
    return bits


def _cover(full: np.ndarray, shape) -> np.ndarray:
    """Pixels belonging to at least one of the given 2x2 blocks."""
    cov = np.zeros(shape, dtype=bool)
    cov[:-1, :-1] |= full
    cov[1:, :-1] |= full
    cov[:-1, 1:] |= full
    cov[1:, 1:] |= full
    return cov


# ---- 2D distance transform ------------------------------------------------

def _jfa_nearest(seeds: np.ndarray) -> np.ndarray:
    """Jump flooding: approximate nearest seed coordinate for every cell."""
    h, w = seeds.shape
    nearest = np.full((h, w, 2), -1, dtype=np.int64)
    ii, jj = np.nonzero(seeds)
    nearest[ii, jj, 0] = ii
    nearest[ii, jj, 1] = jj
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]

    def dist2(near):
        d = (near[..., 0] - rows) ** 2 + (near[..., 1] - cols) ** 2
        return np.where(near[..., 0] < 0, np.iinfo(np.int64).max, d)

    steps = []
    k = 1 << max(0, (max(h, w) - 1).bit_length() - 1)
    while k >= 1:
        steps.append(k)
        k //= 2
    steps += [2, 1]  # extra refinement passes (JFA+2)
    best = dist2(nearest)
    for step in steps:
        for dy in (-step, 0, step):
            for dx in (-step, 0, step):
                if dy == 0 and dx == 0:
                    continue
                cand = np.full_like(nearest, -1)
                ys = slice(max(0, -dy), min(h, h - dy))
                xs = slice(max(0, -dx), min(w, w - dx))
                ys_src = slice(max(0, dy), min(h, h + dy))
                xs_src = slice(max(0, dx), min(w, w + dx))
                cand[ys, xs] = nearest[ys_src, xs_src]
                d = dist2(cand)
                better = d < best
                nearest[better] = cand[better]
                best = np.where(better, d, best)
    return nearest


@dataclass
class SdfGrid2D:
    """Signed distances (UV units, positive inside) at the mask's pixel centres."""

    d: np.ndarray
    pixel_scale: float
    normalized: bool = False
    max_distance: float = 1.0

    @property
    def height(self) -> int:
        return self.d.shape[0]

    @property
    def width(self) -> int:
        return self.d.shape[1]

    def interpolate(self, uv: np.ndarray) -> np.ndarray:
        """Bilinear interpolation; points beyond the outer centres are clamped."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        fx = np.clip(uv[:, 0] / self.pixel_scale - 0.5, 0.0, self.width - 1.0)
        fy = np.clip(uv[:, 1] / self.pixel_scale - 0.5, 0.0, self.height - 1.0)
        x0 = np.minimum(np.floor(fx).astype(np.int64), self.width - 2)
        y0 = np.minimum(np.floor(fy).astype(np.int64), self.height - 2)
        x0 = np.maximum(x0, 0)
        y0 = np.maximum(y0, 0)
        tx = fx - x0
        ty = fy - y0
        d = self.d
        x1 = np.minimum(x0 + 1, self.width - 1)
        y1 = np.minimum(y0 + 1, self.height - 1)
        return ((1 - tx) * (1 - ty) * d[y0, x0] + tx * (1 - ty) * d[y0, x1]
                + (1 - tx) * ty * d[y1, x0] + tx * ty * d[y1, x1])


def jump_flood_sdf(mask: Mask2D, normalize: bool = False) -> SdfGrid2D:
    """Signed distance of every cell to the nearest cell of the other class.

    Inside cells hold the distance to the nearest background cell, outside
    cells minus the distance to the nearest foreground cell, so the zero
    crossing lies halfway between neighbours of opposite sign.
    """
    mask.validate()
    bits = mask.bits
    h, w = bits.shape
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    to_fg = _jfa_nearest(bits)
    to_bg = _jfa_nearest(~bits)
    d_fg = np.hypot(to_fg[..., 0] - rows, to_fg[..., 1] - cols)
    d_bg = np.hypot(to_bg[..., 0] - rows, to_bg[..., 1] - cols)
    d = np.where(bits, d_bg, -d_fg) * mask.pixel_scale
    max_d = float(np.abs(d).max())
    if normalize:
        d = d / max_d
    return SdfGrid2D(d, mask.pixel_scale, normalized=normalize, max_distance=max_d)


def truncate_sdf(d, delta: float):
    if delta <= 0:
        raise ValidationError("truncation delta must be positive")
    return np.minimum(delta, np.maximum(-delta, d))


def sdf_to_soft_mask(d, k: float) -> np.ndarray:
    """Logistic occupancy ``1 / (1 + exp(-k d))`` (numerically stable)."""
    x = k * np.asarray(d, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def threshold_mask(soft: np.ndarray) -> np.ndarray:
    return np.asarray(soft) > 0.5


def sample_training_points(grid: SdfGrid2D, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Half the points jitter inside near-boundary cells (|d| < 2 cells),
    half are uniform over the unit square; ``d`` is bilinear."""
    if n < 1:
        raise ValidationError("need at least one sample")
    rng = np.random.default_rng(seed)
    cell = grid.pixel_scale
    extent = np.array([grid.width, grid.height]) * cell
    n_near = n // 2
    near_rows, near_cols = np.nonzero(np.abs(grid.d) < 2.0 * cell * (1.0 / grid.max_distance if grid.normalized else 1.0))
    pts = []
    if n_near and len(near_rows):
        pick = rng.integers(0, len(near_rows), size=n_near)
        centres = np.stack([(near_cols[pick] + 0.5) * cell, (near_rows[pick] + 0.5) * cell], axis=1)
        pts.append(centres + rng.uniform(-0.5 * cell, 0.5 * cell, size=(n_near, 2)))
    else:
        n_near = 0
    pts.append(rng.uniform(0.0, 1.0, size=(n - n_near, 2)) * extent)
    uv = np.concatenate(pts, axis=0)
    return uv, grid.interpolate(uv)


# ---- 3D grids -------------------------------------------------------------

@dataclass
class SdfGrid3D:
    """Truncated unsigned distance to the observed points, indexed [x, y, z]."""

    values: np.ndarray
    origin: np.ndarray
    voxel_size: float
    delta: float

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def voxel_centers(self) -> np.ndarray:
        d = self.resolution
        idx = (np.arange(d) + 0.5) * self.voxel_size
        gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) + self.origin


def backproject_to_grid(points: np.ndarray, resolution: int, delta_grid: float,
                        center=None, side: float | None = None) -> SdfGrid3D:
    """Voxelise a point set as clamped nearest-point distances.

    The cube defaults to the points' bounding cube with a 10% margin.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValidationError("cannot back-project an empty point set")
    if not np.isfinite(pts).all():
        raise ValidationError("non-finite point coordinates")
    if resolution < 1 or delta_grid <= 0:
        raise ValidationError("resolution and delta_grid must be positive")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if center is None:
        center = 0.5 * (lo + hi)
    if side is None:
        side = max(float((hi - lo).max()) * 1.1, 1e-6)
    center = np.asarray(center, dtype=np.float64)
    voxel = side / resolution
    origin = center - 0.5 * side
    grid = SdfGrid3D(np.zeros((resolution,) * 3), origin, voxel, delta_grid)
    dist, _ = cKDTree(pts).query(grid.voxel_centers())
    grid.values = np.minimum(dist, delta_grid).reshape((resolution,) * 3)
    return grid


def normalize_mask(mask: Mask2D, size: int = 64, fill: float = 0.9) -> Mask2D:
    """Crop to the bounding box and resample (nearest neighbour) so the longer
    side spans ``fill`` of a ``size`` x ``size`` canvas, centred."""
    mask.validate()
    ii, jj = np.nonzero(mask.bits)
    crop = mask.bits[ii.min():ii.max() + 1, jj.min():jj.max() + 1]
    h, w = crop.shape
    scale = fill * size / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    rows = np.minimum((np.arange(nh) + 0.5) / scale, h - 1e-9).astype(np.int64)
    cols = np.minimum((np.arange(nw) + 0.5) / scale, w - 1e-9).astype(np.int64)
    out = np.zeros((size, size), dtype=bool)
    top, left = (size - nh) // 2, (size - nw) // 2
    out[top:top + nh, left:left + nw] = crop[np.ix_(rows, cols)]
    return Mask2D(out, 1.0 / size)
