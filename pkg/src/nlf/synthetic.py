"""Procedural leaves and analytic deformations with stored ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .base_shape import BaseMesh, extract_base_mesh
from .errors import ValidationError
from .sdf import Mask2D, cleanup_mask

DEFORM_KINDS = ("fold", "cup", "twist")


@dataclass
class LeafParams:
    exponent: float = 2.0      # superellipse exponent
    aspect: float = 0.5        # half-width / half-length
    taper: float = 0.0         # egg-shape skew along the blade
    serration: float = 0.0     # relative tooth amplitude
    teeth: int = 16
    notch_depth: float = 0.0   # petiole notch depth (fraction of half-length)
    notch_width: float = 0.15

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Occupancy in leaf-local coordinates; the tip points to +x."""
        theta = np.arctan2(y, x)
        grow = 1.0 + self.serration * np.abs(np.sin(0.5 * self.teeth * theta))
        b = self.aspect * (1.0 + self.taper * x)
        r = np.abs(x) ** self.exponent + np.abs(y / np.maximum(b, 1e-6)) ** self.exponent
        occ = r <= grow ** self.exponent
        if self.notch_depth > 0:
            notch = x < -1.0 + self.notch_depth * (1.0 - np.abs(y) / self.notch_width)
            occ &= ~notch
        return occ


def random_leaf_params(rng: np.random.Generator) -> LeafParams:
    return LeafParams(exponent=rng.uniform(1.6, 3.0), aspect=rng.uniform(0.35, 0.65),
                      taper=rng.uniform(-0.3, 0.3), serration=rng.uniform(0.0, 0.04),
                      teeth=int(rng.integers(10, 25)), notch_depth=rng.uniform(0.0, 0.15),
                      notch_width=rng.uniform(0.1, 0.25))


def render_leaf(params: LeafParams, size: int = 64, fill: float = 0.9) -> Mask2D:
    """Rasterise a leaf in the canonical frame: bounding box centred, longer
    side spanning ``fill`` of the canvas."""
    probe = np.linspace(-1.6, 1.6, 801)
    px, py = np.meshgrid(probe, probe)
    occ = params.inside(px, py)
    xs, ys = px[occ], py[occ]
    lo = np.array([xs.min(), ys.min()])
    hi = np.array([xs.max(), ys.max()])
    span = float((hi - lo).max())
    centre = 0.5 * (lo + hi)
    c = (np.arange(size) + 0.5) / size
    vv, uu = np.meshgrid(c, c, indexing="ij")
    x = (uu - 0.5) / fill * span + centre[0]
    y = (vv - 0.5) / fill * span + centre[1]
    return cleanup_mask(Mask2D(params.inside(x, y), 1.0 / size))


@dataclass
class Deformation:
    kind: str
    amount: float
    axis_y: float = 0.5     # midrib height in UV
    centre_x: float = 0.5

    def apply(self, vertices: np.ndarray) -> np.ndarray:
        v = np.array(vertices, dtype=np.float64)
        x, r = v[:, 0] - self.centre_x, v[:, 1] - self.axis_y
        out = v.copy()
        if self.kind == "none" or self.amount == 0.0:
            return out
        if self.kind == "fold":
            half = 0.5 * self.amount
            out[:, 1] = self.axis_y + r * math.cos(half)
            out[:, 2] = np.abs(r) * math.sin(half)
        elif self.kind == "cup":
            out[:, 2] = self.amount * (x * x + r * r)
        elif self.kind == "twist":
            phi = self.amount * x
            out[:, 1] = self.axis_y + r * np.cos(phi)
            out[:, 2] = r * np.sin(phi)
        else:
            raise ValidationError(f"unknown deformation {self.kind!r}")
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "amount": self.amount, "axis_y": self.axis_y,
                "centre_x": self.centre_x}


def random_deformation(kind: str, rng: np.random.Generator, mesh: BaseMesh) -> Deformation:
    centre = mesh.vertices[:, :2].mean(axis=0)
    amount = {"fold": lambda: math.radians(rng.uniform(20.0, 90.0)),
              "cup": lambda: rng.uniform(0.3, 1.2),
              "twist": lambda: rng.uniform(0.5, 1.5),
              "none": lambda: 0.0}[kind]()
    return Deformation(kind, float(amount), float(centre[1]), float(centre[0]))


@dataclass
class ShapeDataset:
    masks: list[Mask2D]
    ids: list[str]

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("sample ids must be unique")
        if len(self.ids) != len(self.masks):
            raise ValidationError("one id per mask")

    def __len__(self):
        return len(self.masks)

    def mask(self, sample_id: str) -> Mask2D:
        return self.masks[self.ids.index(sample_id)]


@dataclass
class DeformPair:
    pair_id: str
    base_id: str
    cloud: np.ndarray
    truth: dict = field(default_factory=dict)


@dataclass
class DeformDataset:
    pairs: list[DeformPair]

    def __len__(self):
        return len(self.pairs)

    def check(self, shapes: ShapeDataset) -> "DeformDataset":
        for p in self.pairs:
            if p.base_id not in shapes.ids:
                raise ValidationError(f"pair {p.pair_id} references unknown base {p.base_id}")
        return self


def make_pair(pair_id: str, base_id: str, mesh: BaseMesh, deformation: Deformation,
              noise: float = 0.0, rng: np.random.Generator | None = None) -> DeformPair:
    """Deformed copy of the base mesh vertices as the observed cloud."""
    cloud = deformation.apply(mesh.vertices)
    if noise > 0:
        cloud = cloud + (rng or np.random.default_rng(0)).normal(0.0, noise, cloud.shape)
    truth = deformation.to_dict()
    truth["base_id"] = base_id
    return DeformPair(pair_id, base_id, cloud, truth)


def generate_synthetic_dataset(n: int, seed, resolution: int = 64,
                               kinds: tuple[str, ...] = DEFORM_KINDS):
    """``n`` leaves and one deformed pair per leaf, cycling through ``kinds``."""
    if n < 1:
        raise ValidationError("need at least one sample")
    rng = np.random.default_rng(seed)
    masks, ids, pairs = [], [], []
    for i in range(n):
        mask = render_leaf(random_leaf_params(rng), resolution)
        sid = f"leaf{i:04d}"
        masks.append(mask)
        ids.append(sid)
        mesh = extract_base_mesh(mask)
        deformation = random_deformation(kinds[i % len(kinds)], rng, mesh)
        pairs.append(make_pair(f"pair{i:04d}", sid, mesh, deformation))
    return ShapeDataset(masks, ids), DeformDataset(pairs)
