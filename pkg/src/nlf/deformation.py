"""Skeleton-free blend skinning driven by control points."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .base_shape import BaseMesh, ShapeSpace, check_latent, interpolate_latent
from .engine import MlpSpec, ParamSet, Tensor, ad, encoded_dim, forward_mlp, init_mlp
from .engine.autodiff import as_tensor
from .engine.mlp import positional_encode
from .errors import ContractError, DegenerateError, DimensionError, ValidationError

SKIN = "skin."
XFORM = "xform."
CONTROL = "control"
PHI = "phi"
IDENTITY7 = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


# ---- control points -----------------------------------------------------------

def lattice_side(k: int) -> int:
    return math.ceil(math.sqrt(k))


def init_control_points(k: int) -> np.ndarray:
    """First ``k`` nodes of a ceil(sqrt(k))^2 lattice at cell centres, z = 0."""
    if not 1 <= k <= 1000:
        raise ValidationError("number of control points must lie in [1, 1000]")
    n = lattice_side(k)
    c = (np.arange(n) + 0.5) / n
    vv, uu = np.meshgrid(c, c, indexing="ij")
    pts = np.stack([uu.ravel(), vv.ravel(), np.zeros(n * n)], axis=1)
    return pts[:k]


# ---- quaternions ----------------------------------------------------------------

def quaternion_to_matrix(q) -> Tensor:
    """Rotation matrices (K, 9), row-major, from quaternions (K, 4) = (w, x, y, z).

    Quaternions are normalised first; a near-zero one is an error.
    """
    q = as_tensor(q)
    if q.ndim != 2 or q.shape[1] != 4:
        raise DimensionError("quaternions must have shape (K, 4)")
    lengths = np.linalg.norm(q.data, axis=1)
    if np.any(lengths < 1e-8):
        raise DegenerateError("quaternion too close to zero")
    q = q / ad.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q[:, i:i + 1] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    entries = [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
               2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
               2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)]
    return ad.concat(entries, axis=1)


def quaternion_rotate(q, v) -> np.ndarray:
    """Rotate vector(s) ``v`` by the normalised quaternion ``q``."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    v = np.asarray(v, dtype=np.float64)
    r = quaternion_to_matrix(q).data.reshape(-1, 3, 3)
    out = np.einsum("kij,kj->ki", r, v.reshape(-1, 3) if v.ndim > 1 else v[None])
    return out[0] if v.ndim == 1 else out


def axis_angle_quaternion(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


# ---- blend skinning ---------------------------------------------------------------

def _batched_matvec(mats: Tensor, vecs) -> Tensor:
    """Rows of (N, 9) row-major matrices times rows of (N, 3) vectors."""
    n = mats.shape[0]
    prod = mats.reshape(n, 3, 3) * ad.as_tensor(vecs).reshape(n, 1, 3)
    return ad.tsum(prod, axis=2)


def lbs_deform(vertices, weights, quats, trans, control, strict: bool = False) -> Tensor:
    """``v_i = sum_k w_ik (R_k (v'_i - c_k) + c_k + t_k)``.

    With ``strict`` the ``+ c_k`` term is dropped (the literal homogeneous
    form, which does not reproduce the base under identity transforms).
    """
    v = vertices if isinstance(vertices, Tensor) else np.asarray(vertices, dtype=np.float64)
    w = as_tensor(weights)
    q, t, c = as_tensor(quats), as_tensor(trans), as_tensor(control)
    n, k = w.shape
    if v.shape != (n, 3) or q.shape != (k, 4) or t.shape != (k, 3) or c.shape != (k, 3):
        raise DimensionError(f"inconsistent LBS shapes: V{v.shape} W{w.shape} q{q.shape} "
                             f"t{t.shape} C{c.shape}")
    if np.abs(w.data.sum(axis=1) - 1.0).max() > 1e-4:
        raise ContractError("skinning weight rows must sum to 1")
    # displacement form: v'_i + sum_k w_ik ((R_k - I)(v'_i - c_k) + t_k); equal to
    # the blend above for stochastic rows and exactly v' under identity transforms
    a = quaternion_to_matrix(q) - np.eye(3).reshape(1, 9)   # (K, 9)
    offset = t - _batched_matvec(a, c)
    if strict:
        offset = offset - c
    return _batched_matvec(w @ a, v) + w @ offset + v


# ---- decoders ------------------------------------------------------------------

@dataclass(frozen=True)
class SkinningDecoder:
    """f_theta_w: ``[PE(uv), z_s] -> softmax over K`` with an optional
    Gaussian locality prior on the logits."""

    latent_dim: int = 32
    n_control: int = 100
    hidden: tuple[int, ...] = (128, 128, 128)
    pe_order: int = 8
    locality: bool = True

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(input_dim=encoded_dim(2, self.pe_order) + self.latent_dim,
                       layer_widths=tuple(self.hidden) + (self.n_control,),
                       activation="leaky_relu", output_head="raw")

    @property
    def bandwidth(self) -> float:
        return 0.75 / lattice_side(self.n_control)

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        return init_mlp(self.spec, rng, SKIN, last_zero=True)

    def forward(self, params: Mapping[str, Tensor], z_s, uv: np.ndarray, control=None) -> Tensor:
        uv = np.asarray(uv, dtype=np.float64)
        z = as_tensor(z_s)
        if z.shape != (self.latent_dim,):
            raise DimensionError(f"shape latent must have length {self.latent_dim}")
        zb = ad.mul(np.ones((len(uv), 1)), z.reshape(1, -1))
        x = ad.concat([positional_encode(uv, self.pe_order), zb], axis=1)
        logits = forward_mlp(self.spec, params, x, SKIN)
        if self.locality:
            if control is None:
                raise ContractError("the locality prior needs control points")
            c = as_tensor(control)
            pts = np.concatenate([uv, np.zeros((len(uv), 1))], axis=1)
            # -|v - c|^2 / (2 s^2) expanded so that it stays differentiable in c
            cc = ad.tsum(c * c, axis=1).reshape(1, -1)
            cross = ad.matmul(pts, c.T)
            d2 = (pts * pts).sum(axis=1, keepdims=True) - cross * 2.0 + cc
            logits = logits - d2 * (0.5 / self.bandwidth ** 2)
        return ad.softmax(logits, axis=1)


@dataclass(frozen=True)
class TransformDecoder:
    """f_theta_d: ``[PE(c_k), z_d] -> (q_k, t_k)``, identity at initialisation."""

    latent_dim: int = 32
    hidden: tuple[int, ...] = (128, 128, 128)
    pe_order: int = 4

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(input_dim=encoded_dim(3, self.pe_order) + self.latent_dim,
                       layer_widths=tuple(self.hidden) + (7,), activation="leaky_relu",
                       output_head="raw")

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        return init_mlp(self.spec, rng, XFORM, last_zero=True, last_bias=IDENTITY7)

    def forward(self, params: Mapping[str, Tensor], z_d, control) -> tuple[Tensor, Tensor]:
        c = as_tensor(control)
        z = as_tensor(z_d)
        if z.shape != (self.latent_dim,):
            raise DimensionError(f"deformation latent must have length {self.latent_dim}")
        zb = ad.mul(np.ones((c.shape[0], 1)), z.reshape(1, -1))
        out = forward_mlp(self.spec, params, ad.concat([positional_encode(c, self.pe_order), zb], 1),
                          XFORM)
        return out[:, 0:4], out[:, 4:7]


@dataclass
class DeformModel:
    """Trained deformation space: decoders, control points, phi and the
    per-pair deformation latents."""

    skin: SkinningDecoder
    xform: TransformDecoder
    params: ParamSet
    latents: np.ndarray
    pair_ids: list[str] = field(default_factory=list)
    base_ids: list[str] = field(default_factory=list)
    strict: bool = False

    @classmethod
    def create(cls, latent_dim_s: int, latent_dim_d: int, n_control: int, hidden: int,
               rng: np.random.Generator, pe_skin: int = 8, pe_xform: int = 4,
               locality: bool = True, strict: bool = False) -> "DeformModel":
        skin = SkinningDecoder(latent_dim_s, n_control, (hidden,) * 3, pe_skin, locality)
        xform = TransformDecoder(latent_dim_d, (hidden,) * 3, pe_xform)
        params = skin.init_params(rng)
        params.update(xform.init_params(rng))
        params.add(CONTROL, init_control_points(n_control))
        params.add(PHI, np.zeros(1))
        return cls(skin, xform, params, np.zeros((0, latent_dim_d)), strict=strict)

    @property
    def n_control(self) -> int:
        return self.skin.n_control

    @property
    def control(self) -> np.ndarray:
        return self.params[CONTROL]

    def deform(self, P: Mapping[str, Tensor], z_s, z_d, base: BaseMesh, vertices=None) -> Tensor:
        """Differentiable deformed vertices for tensors ``P``; ``vertices``
        optionally replaces the base positions (e.g. by a tensor)."""
        w = self.skin.forward(P, z_s, base.uv, P[CONTROL])
        q, t = self.xform.forward(P, z_d, P[CONTROL])
        v = base.vertices if vertices is None else vertices
        return lbs_deform(v, w, q, t, P[CONTROL], strict=self.strict)

    # plain-array conveniences
    def decode_transforms(self, z_d, control=None) -> tuple[np.ndarray, np.ndarray]:
        z_d = check_latent(z_d, self.xform.latent_dim)
        c = self.control if control is None else np.asarray(control, dtype=np.float64)
        q, t = self.xform.forward(self.params.constants(), z_d, c)
        return q.data, t.data

    def decode_skinning_weights(self, z_s, vertices) -> np.ndarray:
        z_s = check_latent(z_s, self.skin.latent_dim)
        uv = np.asarray(vertices, dtype=np.float64)[:, :2]
        return self.skin.forward(self.params.constants(), z_s, uv, self.control).data

    def deform_mesh(self, z_s, z_d, base: BaseMesh) -> np.ndarray:
        z_s = check_latent(z_s, self.skin.latent_dim)
        z_d = check_latent(z_d, self.xform.latent_dim)
        return self.deform(self.params.constants(), z_s, z_d, base).data

    def latent_of(self, pair_id: str) -> np.ndarray:
        return self.latents[self.pair_ids.index(pair_id)]


def generate_mesh(shape: ShapeSpace, deform: DeformModel, z_s, z_d,
                  resolution: int = 64) -> tuple[BaseMesh, np.ndarray]:
    """Base mesh decoded from ``z_s`` and its deformation by ``z_d``."""
    base = shape.decoded_mesh(z_s, resolution)
    return base, deform.deform_mesh(z_s, z_d, base)


def interpolate_deformation(z_a, z_b, t: float) -> np.ndarray:
    """Linear blend of two deformation latents."""
    return interpolate_latent(z_a, z_b, t)
