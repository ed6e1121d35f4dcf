"""Shape latent space: SDF decoder, flat base meshes and latent utilities."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .engine import MlpSpec, ParamSet, Tensor, ad, encoded_dim, forward_mlp, geometric_init
from .engine.mlp import positional_encode, positional_encode_jacobian
from .errors import DegenerateError, DimensionError, ValidationError
from .sdf import Mask2D, cleanup_mask, sdf_to_soft_mask

PREFIX = "shape."
K_NAME = "shape.k"


# ---- base meshes ----------------------------------------------------------

@dataclass
class BaseMesh:
    """Flat triangle mesh on z = 0; ``uv`` coincides with (x, y)."""

    vertices: np.ndarray
    faces: np.ndarray
    contour: np.ndarray
    pixels: np.ndarray = field(default=None, repr=False)  # (N, 2) row, col per vertex
    resolution: int = 0

    @property
    def uv(self) -> np.ndarray:
        return self.vertices[:, :2]

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted (E, 2)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def contour_edges(self) -> np.ndarray:
        c = self.contour
        return np.stack([c, np.roll(c, -1)], axis=1)

    def boundary_corners(self) -> np.ndarray:
        """(apex, a, b) for every face corner sitting on a contour vertex."""
        on = np.zeros(len(self.vertices), dtype=bool)
        on[self.contour] = True
        out = []
        for f in self.faces:
            for r in range(3):
                if on[f[r]]:
                    out.append((f[r], f[(r + 1) % 3], f[(r + 2) % 3]))
        return np.array(out, dtype=np.int64).reshape(-1, 3)

    def neighbors(self) -> list[np.ndarray]:
        """1-ring vertex neighbourhoods."""
        e = self.edges()
        ring: list[list[int]] = [[] for _ in range(len(self.vertices))]
        for a, b in e:
            ring[a].append(b)
            ring[b].append(a)
        return [np.array(sorted(r), dtype=np.int64) for r in ring]

    def area(self, vertices: np.ndarray | None = None) -> float:
        v = self.vertices if vertices is None else vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())

    def occupancy(self) -> np.ndarray:
        """Vertex set as a boolean pixel grid."""
        occ = np.zeros((self.resolution, self.resolution), dtype=bool)
        occ[self.pixels[:, 0], self.pixels[:, 1]] = True
        return occ


def extract_base_mesh(mask: Mask2D) -> BaseMesh:
    """One vertex per foreground pixel centre; every full 2x2 block gives two
    counter-clockwise triangles split along the lower-left/upper-right
    diagonal.  The contour is the outer boundary loop of the mesh."""
    bits = mask.bits
    if bits.sum() < 3:
        raise DegenerateError("mask has fewer than 3 foreground pixels")
    h, w = bits.shape
    index = np.full((h, w), -1, dtype=np.int64)
    ii, jj = np.nonzero(bits)
    index[ii, jj] = np.arange(len(ii))
    s = mask.pixel_scale
    vertices = np.stack([(jj + 0.5) * s, (ii + 0.5) * s, np.zeros(len(ii))], axis=1)
    full = bits[:-1, :-1] & bits[1:, :-1] & bits[:-1, 1:] & bits[1:, 1:]
    bi, bj = np.nonzero(full)
    if len(bi) == 0:
        raise DegenerateError("mask contains no 2x2 foreground block")
    a = index[bi, bj]           # (x0, y0)
    b = index[bi, bj + 1]       # (x1, y0)
    c = index[bi + 1, bj]       # (x0, y1)
    d = index[bi + 1, bj + 1]   # (x1, y1)
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    contour = _outer_loop(faces, vertices)
    return BaseMesh(vertices, faces, contour, np.stack([ii, jj], 1), max(h, w))


def _outer_loop(faces: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    present = {(int(x), int(y)) for x, y in directed}
    nxt: dict[int, list[int]] = {}
    for x, y in sorted(present):
        if (y, x) not in present:
            nxt.setdefault(x, []).append(y)
    loops = []
    unused = {k: list(v) for k, v in nxt.items()}
    for start in sorted(nxt):
        while unused.get(start):
            loop = [start]
            cur = unused[start].pop(0)
            while cur != start:
                loop.append(cur)
                if not unused.get(cur):
                    break
                cur = unused[cur].pop(0)
            loops.append(loop)
    if not loops:
        raise DegenerateError("mesh has no boundary")

    def enclosed(loop):
        p = vertices[loop, :2]
        q = np.roll(p, -1, axis=0)
        return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))

    best = max(loops, key=lambda lp: (enclosed(lp), len(lp)))
    return np.array(best, dtype=np.int64)


# ---- decoder --------------------------------------------------------------

@dataclass(frozen=True)
class ShapeDecoder:
    """Architecture of f_theta_s: ``[PE(uv - 0.5), z_s] -> d``."""

    latent_dim: int = 32
    pe_order: int = 4
    hidden: tuple[int, ...] = (128, 128, 128, 128)
    skip_layer: int = 2
    softplus_beta: float = 100.0

    @property
    def spec(self) -> MlpSpec:
        skips = ((0, self.skip_layer),) if 0 < self.skip_layer < len(self.hidden) else ()
        return MlpSpec(input_dim=encoded_dim(2, self.pe_order) + self.latent_dim,
                       layer_widths=tuple(self.hidden) + (1,), activation="softplus",
                       skip_connections=skips, output_head="raw",
                       softplus_beta=self.softplus_beta)

    def init_params(self, rng: np.random.Generator, k_init: float = 10.0) -> ParamSet:
        ps = geometric_init(self.spec, rng, PREFIX, radius=0.5, coord_dims=2,
                            latent_dims=self.latent_dim)
        ps.add(K_NAME, np.array([k_init]))
        return ps

    def _inputs(self, z: Tensor, uv: np.ndarray) -> Tensor:
        uv = np.asarray(uv, dtype=np.float64)
        z = ad.as_tensor(z)
        if z.ndim == 1:
            z = ad.mul(np.ones((len(uv), 1)), z.reshape(1, -1))
        if z.shape != (len(uv), self.latent_dim):
            raise DimensionError(f"latent batch {z.shape} does not match {len(uv)} points")
        return ad.concat([positional_encode(uv - 0.5, self.pe_order), z], axis=1)

    def forward(self, params: Mapping[str, Tensor], z, uv: np.ndarray) -> Tensor:
        """SDF values (B,) for points ``uv`` (B, 2) and latents ``z`` (B, N) or (N,)."""
        out = forward_mlp(self.spec, params, self._inputs(z, uv), PREFIX)
        return out.reshape(-1)

    def forward_with_gradient(self, params: Mapping[str, Tensor], z, uv: np.ndarray):
        """SDF values (B,) and spatial gradients (2, B), both differentiable."""
        uv = np.asarray(uv, dtype=np.float64)
        x = self._inputs(z, uv)
        jac = positional_encode_jacobian(uv - 0.5, self.pe_order)
        tangents = np.concatenate([jac, np.zeros((len(jac), self.latent_dim))], axis=1)
        out, out_t = forward_mlp(self.spec, params, x, PREFIX, tangents=tangents)
        return out.reshape(-1), out_t.reshape(2, -1)


def pixel_centers(resolution: int) -> np.ndarray:
    """UV coordinates of a resolution x resolution grid, row-major."""
    c = (np.arange(resolution) + 0.5) / resolution
    vv, uu = np.meshgrid(c, c, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


@dataclass
class ShapeSpace:
    """A trained (or initialised) shape decoder with its latent table."""

    decoder: ShapeDecoder
    params: ParamSet
    latents: np.ndarray
    ids: list[str] = field(default_factory=list)

    @property
    def k(self) -> float:
        return float(self.params[K_NAME][0])

    def decode_sdf(self, z, uv) -> np.ndarray:
        z = check_latent(z, self.decoder.latent_dim)
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        return self.decoder.forward(self.params.constants(), z, uv).data

    def decoded_mask(self, z, resolution: int = 64) -> Mask2D:
        if resolution < 2:
            raise ValidationError("resolution must be at least 2")
        d = self.decode_sdf(z, pixel_centers(resolution))
        bits = (sdf_to_soft_mask(d, self.k) > 0.5).reshape(resolution, resolution)
        if not bits.any():
            raise DegenerateError("latent decodes to an empty mask")
        mask = cleanup_mask(Mask2D(bits, 1.0 / resolution))
        if mask.area < 4:
            raise DegenerateError("latent decodes to a degenerate mask")
        return mask

    def decoded_mesh(self, z, resolution: int = 64) -> BaseMesh:
        return extract_base_mesh(self.decoded_mask(z, resolution))

    def latent_std(self) -> float:
        return float(np.std(self.latents)) if self.latents.size else 0.0

    def sample_latent(self, seed) -> np.ndarray:
        return sample_latent(self.latents, seed)

    def latent_of(self, sample_id: str) -> np.ndarray:
        return self.latents[self.ids.index(sample_id)]


def check_latent(z, n: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape != (n,):
        raise DimensionError(f"latent has length {z.size}, expected {n}")
    if not np.isfinite(z).all():
        raise ValidationError("latent is not finite")
    return z


def interpolate_latent(z_a, z_b, t: float) -> np.ndarray:
    """``(1 - t) z_a + t z_b``."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise DimensionError("latent length mismatch")
    if not 0.0 <= t <= 1.0:
        raise ValidationError("t must lie in [0, 1]")
    return (1.0 - t) * z_a + t * z_b


def sample_latent(table: np.ndarray, seed) -> np.ndarray:
    """Draw from N(0, s^2 I), s being the empirical std of a latent table."""
    table = np.asarray(table, dtype=np.float64)
    std = float(np.std(table))
    return np.random.default_rng(seed).normal(0.0, std, size=table.shape[1])


def mask_iou(a, b) -> float:
    a = a.bits if isinstance(a, Mask2D) else np.asarray(a, dtype=bool)
    b = b.bits if isinstance(b, Mask2D) else np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError("masks differ in size")
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0
