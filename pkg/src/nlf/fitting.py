"""Reconstruction from 3D observations: grid encoders for latent inversion,
direct latent refinement and multi-leaf fitting with an anchor shape."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from . import losses as L
from .base_shape import BaseMesh, ShapeSpace, check_latent
from .config import TrainConfig
from .deformation import DeformModel, generate_mesh
from .engine import ParamSet, Tape, Tensor, ad, adam_update, conv3d, gradient, step_decay
from .errors import ContractError, DegenerateError, DimensionError, ValidationError
from .sdf import SdfGrid3D, backproject_to_grid

log = logging.getLogger(__name__)

# every observation is voxelised in the same cube around the unit UV square
FIT_CUBE_CENTRE = (0.5, 0.5, 0.0)
FIT_CUBE_SIDE = 1.5
MAX_RESETS = 5


def observation_grid(cloud, resolution: int, delta: float) -> SdfGrid3D:
    return backproject_to_grid(cloud, resolution, delta, FIT_CUBE_CENTRE, FIT_CUBE_SIDE)


# ---- encoders ------------------------------------------------------------------------

@dataclass(frozen=True)
class GridEncoder:
    """Stride-2 3x3x3 convolutions (leaky ReLU) then a linear head."""

    resolution: int = 32
    latent_dim: int = 32
    channels: tuple[int, ...] = (8, 16, 32, 64)
    prefix: str = "enc."

    @property
    def final_side(self) -> int:
        side = self.resolution
        for _ in self.channels:
            side = (side - 1) // 2 + 1
        return side

    def init_params(self, rng: np.random.Generator, mean=None) -> ParamSet:
        ps = ParamSet()
        cin = 1
        for i, cout in enumerate(self.channels):
            fan_in = 27 * cin
            ps.add(f"{self.prefix}conv{i}.w", rng.normal(0, math.sqrt(2.0 / fan_in), (3, 3, 3, cin, cout)))
            ps.add(f"{self.prefix}conv{i}.b", np.zeros(cout))
            cin = cout
        flat = self.final_side ** 3 * cin
        ps.add(f"{self.prefix}head.w", rng.normal(0, math.sqrt(1.0 / flat) * 0.1, (flat, self.latent_dim)))
        bias = np.zeros(self.latent_dim) if mean is None else np.asarray(mean, dtype=np.float64)
        ps.add(f"{self.prefix}head.b", bias)
        return ps

    def forward(self, params, grids: np.ndarray, delta: float) -> Tensor:
        """Latents (B, N) for distance grids (B, R, R, R)."""
        g = np.asarray(grids, dtype=np.float64)
        if g.ndim != 4 or g.shape[1:] != (self.resolution,) * 3:
            raise DimensionError(f"encoder expects grids of side {self.resolution}, got {g.shape}")
        h = ad.as_tensor((1.0 - g / delta)[..., None])  # 1 on the surface, 0 far away
        for i in range(len(self.channels)):
            h = conv3d(h, params[f"{self.prefix}conv{i}.w"], params[f"{self.prefix}conv{i}.b"])
            h = ad.leaky_relu(h, 0.01)
        h = h.reshape(h.shape[0], -1)
        return h @ params[f"{self.prefix}head.w"] + params[f"{self.prefix}head.b"]


@dataclass
class Encoders:
    shape: GridEncoder
    deform: GridEncoder
    params: ParamSet
    delta: float
    train_error: float = float("nan")
    heldout_error: float = float("nan")
    baseline_error: float = float("nan")

    @property
    def resolution(self) -> int:
        return self.shape.resolution


@dataclass
class Inversion:
    z_s: np.ndarray
    z_d: np.ndarray
    low_confidence: bool


def invert_latents(grid: SdfGrid3D, encoders: Encoders) -> Inversion:
    """Deterministic encoder pass on one observation grid."""
    values = np.asarray(grid.values, dtype=np.float64)
    if values.shape != (encoders.resolution,) * 3:
        raise DimensionError(f"grid resolution {values.shape[0]} does not match encoder "
                             f"resolution {encoders.resolution}")
    P = encoders.params.constants()
    z_s = encoders.shape.forward(P, values[None], encoders.delta).data[0]
    z_d = encoders.deform.forward(P, values[None], encoders.delta).data[0]
    empty = bool(np.all(values >= grid.delta))
    return Inversion(z_s, z_d, empty)


def sample_in_range(table: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A random point on the segment between two random table rows."""
    i, j = rng.integers(len(table), size=2)
    t = rng.uniform()
    return (1 - t) * table[i] + t * table[j]


@dataclass
class InversionSample:
    grid: np.ndarray
    z_s: np.ndarray
    z_d: np.ndarray


def generated_samples(space: ShapeSpace, model: DeformModel, n: int, cfg: TrainConfig,
                      rng: np.random.Generator) -> list[InversionSample]:
    """Observations produced by the model itself at in-range latents."""
    out = []
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 20 * n + 20:
            raise DegenerateError("could not decode enough in-range samples")
        z_s = sample_in_range(space.latents, rng)
        z_d = sample_in_range(model.latents, rng)
        try:
            _, verts = generate_mesh(space, model, z_s, z_d, cfg.mask_res)
        except DegenerateError:
            continue
        grid = observation_grid(verts, cfg.grid_res, cfg.grid_delta).values
        out.append(InversionSample(grid, z_s, z_d))
    return out


def training_samples(space: ShapeSpace, model: DeformModel, clouds: dict[str, np.ndarray],
                     cfg: TrainConfig) -> list[InversionSample]:
    """Grids of the training pairs' clouds with their latent-table targets."""
    if len(model.latents) == 0 or len(space.latents) == 0:
        raise ContractError("inversion training needs trained latent tables")
    out = []
    for pid, base_id, z_d in zip(model.pair_ids, model.base_ids, model.latents):
        grid = observation_grid(clouds[pid], cfg.grid_res, cfg.grid_delta).values
        out.append(InversionSample(grid, space.latent_of(base_id), z_d))
    return out


def _inv_loss(enc: Encoders, P, grids, zs, zd):
    ps = enc.shape.forward(P, grids, enc.delta)
    pd = enc.deform.forward(P, grids, enc.delta)
    es, ed = ps - zs, pd - zd
    return ad.mean(ad.tsum(es * es, axis=1) + ad.tsum(ed * ed, axis=1))


def inversion_error(enc: Encoders, samples: list[InversionSample]) -> float:
    if not samples:
        return float("nan")
    grids = np.stack([s.grid for s in samples])
    zs = np.stack([s.z_s for s in samples])
    zd = np.stack([s.z_d for s in samples])
    return float(_inv_loss(enc, enc.params.constants(), grids, zs, zd).data)


def train_inversion_encoders(space: ShapeSpace, model: DeformModel, clouds: dict[str, np.ndarray],
                             cfg: TrainConfig, holdout: float = 0.2, callback=None) -> Encoders:
    """Fit both grid encoders to regress latents from observation grids.

    The supervision set is the training pairs plus ``cfg.enc_augment``
    model-generated observations; a seeded ``holdout`` fraction is kept
    aside and its inversion loss reported.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 40]))
    samples = training_samples(space, model, clouds, cfg)
    samples += generated_samples(space, model, cfg.enc_augment, cfg, rng)
    order = rng.permutation(len(samples))
    n_hold = int(round(holdout * len(samples)))
    held = [samples[i] for i in order[:n_hold]]
    train = [samples[i] for i in order[n_hold:]]
    if not train:
        raise ValidationError("no samples left for encoder training")
    zs = np.stack([s.z_s for s in train])
    zd = np.stack([s.z_d for s in train])
    grids = np.stack([s.grid for s in train])
    shape_enc = GridEncoder(cfg.grid_res, space.decoder.latent_dim, prefix="enc_s.")
    deform_enc = GridEncoder(cfg.grid_res, model.xform.latent_dim, prefix="enc_d.")
    params = shape_enc.init_params(rng, zs.mean(axis=0))
    params.update(deform_enc.init_params(rng, zd.mean(axis=0)))
    enc = Encoders(shape_enc, deform_enc, params, cfg.grid_delta)
    batch = 16
    step = 0
    for epoch in range(cfg.enc_epochs):
        lr = step_decay(cfg.enc_lr, epoch, cfg.lr_decay, max(cfg.enc_epochs // 2, 1))
        perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, 41, epoch])).permutation(len(train))
        for start in range(0, len(train), batch):
            idx = np.sort(perm[start:start + batch])
            tape = Tape()
            P = params.watch(tape)
            loss = _inv_loss(enc, P, grids[idx], zs[idx], zd[idx])
            step += 1
            grads = gradient(tape, loss)
            tape.clear()
            adam_update(params, grads, lr, step)
        if callback:
            callback(epoch, float(loss.data))
    enc.train_error = inversion_error(enc, train)
    enc.heldout_error = inversion_error(enc, held)
    all_z = np.concatenate([np.stack([s.z_s for s in samples]), np.stack([s.z_d for s in samples])], 1)
    enc.baseline_error = float(np.mean(np.sum((all_z - all_z.mean(axis=0)) ** 2, axis=1)))
    return enc


# ---- refinement -----------------------------------------------------------------------------

@dataclass
class FitResult:
    z_s: np.ndarray
    z_d: np.ndarray
    base: BaseMesh
    vertices: np.ndarray
    residual: float                  # unsquared chamfer to the observation
    iterations: int
    losses: list[float] = field(default_factory=list)
    best_losses: list[float] = field(default_factory=list)
    resets: int = 0

    @property
    def faces(self) -> np.ndarray:
        return self.base.faces


def _contour_shift(space: ShapeSpace, P_shape, z_s: Tensor, base: BaseMesh) -> Tensor:
    """Vertex offsets whose value is zero and whose derivative moves the
    contour like the zero level set: ``-grad f (f - f0) / |grad f|^2``."""
    idx = base.contour
    f, g = space.decoder.forward_with_gradient(P_shape, z_s, base.uv[idx])
    gd = g.data.T                                     # (B, 2)
    g2 = np.maximum(np.sum(gd * gd, axis=1), 1e-12)
    df = f - f.data                                   # value 0, d/dz = df/dz
    uv = ad.mul(df.reshape(-1, 1), -gd / g2[:, None])
    shift = ad.concat([uv, np.zeros((len(idx), 1))], axis=1)
    pad = ad.concat([np.zeros((1, 3)), shift], axis=0)
    rows = np.zeros(len(base.vertices), dtype=np.int64)
    rows[idx] = np.arange(1, len(idx) + 1)
    return ad.take_rows(pad, rows)


def refine_fit(space: ShapeSpace, model: DeformModel, z_s0, z_d0, cloud, cfg: TrainConfig,
               anchor=None, iters: int | None = None) -> FitResult:
    """Gradient descent on ``(z_s, z_d)`` only; returns the best iterate.

    The base mesh is re-extracted from ``z_s`` every iteration.  A
    degenerate decode halves ``z_s`` and retries; more than five resets
    abort with :class:`DegenerateError`.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or len(cloud) == 0:
        raise ValidationError("observation must be a non-empty (N, 3) cloud")
    z_s0 = check_latent(z_s0, space.decoder.latent_dim)
    z_d0 = check_latent(z_d0, model.xform.latent_dim)
    iters = cfg.fit_iters if iters is None else iters
    latents = ParamSet({"z_s": z_s0, "z_d": z_d0})
    P_shape = space.params.constants()
    P_def = model.params.constants()
    losses, best_losses = [], []
    best = None
    resets = 0
    it = 0
    while it < iters:
        try:
            base = space.decoded_mesh(latents["z_s"], cfg.mask_res)
        except DegenerateError:
            resets += 1
            if resets > MAX_RESETS:
                raise DegenerateError("decoded mesh stayed degenerate after 5 resets")
            latents["z_s"] = latents["z_s"] * 0.5
            log.warning("degenerate decode at iteration %d; shrinking z_s", it)
            continue
        tape = Tape()
        Z = latents.watch(tape)
        verts = base.vertices + _contour_shift(space, P_shape, Z["z_s"], base)
        deformed = model.deform(P_def, Z["z_s"], Z["z_d"], base, vertices=verts)
        loss = L.loss_chamfer(deformed, cloud)
        loss = loss + (L.loss_latent(Z["z_s"], cfg.sigma) + L.loss_latent(Z["z_d"], cfg.sigma)) * cfg.w_lat
        if anchor is not None and cfg.w_anc > 0:
            loss = loss + L.loss_anchor(Z["z_s"], anchor) * cfg.w_anc
        value = float(loss.data)
        if not np.isfinite(value):
            tape.clear()
            break
        losses.append(value)
        if best is None or value < best[0]:
            best = (value, latents["z_s"].copy(), latents["z_d"].copy(), base, deformed.data.copy())
        best_losses.append(best[0])
        grads = gradient(tape, loss)
        tape.clear()
        lr = step_decay(cfg.fit_lr, it, cfg.lr_decay, cfg.fit_decay_interval)
        if cfg.fit_alternate:
            adam_update(latents, grads, lr, it + 1, names=["z_s"] if it % 2 == 0 else ["z_d"])
        else:
            adam_update(latents, grads, lr, it + 1)
        it += 1
    if best is None:
        raise DegenerateError("fitting produced no valid iterate")
    _, z_s, z_d, base, verts = best
    return FitResult(z_s, z_d, base, verts, L.chamfer_l2(verts, cloud), it, losses, best_losses,
                     resets)


def fit_observation(space: ShapeSpace, model: DeformModel, cloud, cfg: TrainConfig,
                    encoders: Encoders | None = None, anchor=None) -> FitResult:
    """Invert (or start from the latent means) and refine."""
    if encoders is not None:
        inv = invert_latents(observation_grid(cloud, encoders.resolution, encoders.delta), encoders)
        z_s, z_d = inv.z_s, inv.z_d
    else:
        z_s, z_d = space.latents.mean(axis=0), model.latents.mean(axis=0)
    return refine_fit(space, model, z_s, z_d, cloud, cfg, anchor=anchor)


# ---- multi-leaf fitting ---------------------------------------------------------------------

def anchor_latent(latents: np.ndarray, k: int = 3, restarts: int = 20, seed=0) -> tuple[int, np.ndarray]:
    """Index of the anchor: the member of the largest K-means cluster that
    is closest to its centroid; the medoid when there are fewer than ``k``
    instances."""
    z = np.asarray(latents, dtype=np.float64)
    if len(z) == 0:
        raise ValidationError("no latents to anchor")
    if len(z) < k:
        dist = np.linalg.norm(z[:, None] - z[None], axis=2).sum(axis=1)
        i = int(np.argmin(dist))
        return i, z[i]
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cent, lab = kmeans2(z, k, minit="++", seed=rng)
        inertia = float(np.sum((z - cent[lab]) ** 2))
        if best is None or inertia < best[0] - 1e-15:
            best = (inertia, cent, lab)
    _, cent, lab = best
    counts = np.bincount(lab, minlength=k)
    big = int(np.argmax(counts))
    members = np.flatnonzero(lab == big)
    i = int(members[np.argmin(np.linalg.norm(z[members] - cent[big], axis=1))])
    return i, z[i]


def fit_multi_leaf(space: ShapeSpace, model: DeformModel, clouds: list, cfg: TrainConfig,
                   encoders: Encoders | None = None, shared: bool = True) -> list[FitResult]:
    """Fit every instance; with ``shared`` the shape latents are pulled
    towards one anchor chosen among the inverted shape codes."""
    if len(clouds) < 1:
        raise ValidationError("need at least one instance")
    if encoders is not None:
        inv = [invert_latents(observation_grid(c, encoders.resolution, encoders.delta), encoders)
               for c in clouds]
        starts = [(i.z_s, i.z_d) for i in inv]
    else:
        starts = [(space.latents.mean(axis=0), model.latents.mean(axis=0))] * len(clouds)
    anchor = None
    if shared:
        _, anchor = anchor_latent(np.stack([s[0] for s in starts]), cfg.kmeans_k,
                                  cfg.kmeans_restarts, cfg.seed)
    return [refine_fit(space, model, zs, zd, c, cfg, anchor=anchor)
            for (zs, zd), c in zip(starts, clouds)]
