"""Training loops: shape space, deformation stages 1 and 2, similar-shape
selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from .base_shape import K_NAME, BaseMesh, ShapeDecoder, ShapeSpace, extract_base_mesh, mask_iou
from .config import TrainConfig
from .deformation import CONTROL, PHI, SKIN, XFORM, DeformModel
from .engine import Tape, Tensor, ad, adam_update, gradient, step_decay
from .errors import NumericalError, ValidationError
from .sdf import SdfGrid2D, jump_flood_sdf, sample_training_points, sdf_to_soft_mask
from .synthetic import DeformDataset, ShapeDataset

log = logging.getLogger(__name__)

SHAPE_LATENTS = "latents.shape"


class TrainingDiverged(NumericalError):
    """Raised when a loss turns non-finite; carries the last finite state."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class History:
    reports: list[L.LossReport] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.reports])

    def plateaued(self, window: int, tol: float) -> bool:
        t = self.totals
        if len(t) < 2 * window:
            return False
        prev = t[-2 * window:-window].mean()
        cur = t[-window:].mean()
        return abs(prev - cur) <= tol * max(abs(prev), 1e-12)


def _rng(cfg: TrainConfig, *salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *salt]))


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    if size <= 0 or size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [np.sort(order[i:i + size]) for i in range(0, n, size)]


# ---- shape space ------------------------------------------------------------

def shape_decoder_from_config(cfg: TrainConfig) -> ShapeDecoder:
    return ShapeDecoder(latent_dim=cfg.latent_dim_s, pe_order=cfg.pe_order_shape,
                        hidden=(cfg.shape_hidden,) * cfg.shape_layers,
                        skip_layer=cfg.shape_layers // 2)


def shape_targets(dataset: ShapeDataset, cfg: TrainConfig) -> list[SdfGrid2D]:
    return [jump_flood_sdf(m, normalize=cfg.sdf_normalize) for m in dataset.masks]


def _truncation(cfg: TrainConfig, grid: SdfGrid2D) -> float:
    """Truncation threshold in the units of the stored field."""
    if grid.normalized and not cfg.normalize_before_truncate:
        # truncate in absolute units first: |d| <= delta maps to delta / max
        return cfg.delta / grid.max_distance
    return cfg.delta


def train_shape_space(dataset: ShapeDataset, cfg: TrainConfig,
                      callback: Callable[[int, L.LossReport], None] | None = None):
    """Auto-decoder training of the shape decoder, ``k`` and all ``z_s``.

    Returns ``(ShapeSpace, History)``.
    """
    if len(dataset) < 1:
        raise ValidationError("shape training needs at least one sample")
    decoder = shape_decoder_from_config(cfg)
    params = decoder.init_params(_rng(cfg, 0), k_init=cfg.k_init)
    init_std = math.sqrt(cfg.latent_init_var)
    params.add(SHAPE_LATENTS, _rng(cfg, 1).normal(0.0, init_std, (len(dataset), cfg.latent_dim_s)))
    grids = shape_targets(dataset, cfg)
    weights = {"sdf": cfg.w_sdf, "sil": cfg.w_sil, "eik": cfg.w_eik, "lat": cfg.w_lat}
    history = History()
    step = 0
    last_good = params.copy()
    for epoch in range(cfg.epochs):
        lr = step_decay(cfg.lr, epoch, cfg.lr_decay, cfg.decay_interval)
        epoch_reports = []
        for batch in _batches(len(dataset), cfg.batch_size, _rng(cfg, 2, epoch)):
            uv, d, owner = [], [], []
            for i in batch:
                p, dv = sample_training_points(grids[i], cfg.samples_per_leaf,
                                               np.random.SeedSequence([cfg.seed, 3, epoch, int(i)]))
                uv.append(p)
                d.append(dv)
                owner.append(np.full(len(p), i))
            uv, d, owner = np.concatenate(uv), np.concatenate(d), np.concatenate(owner)
            delta = _truncation(cfg, grids[batch[0]])
            tape = Tape()
            P = params.watch(tape)
            z = ad.take_rows(P[SHAPE_LATENTS], owner)
            pred, grad = decoder.forward_with_gradient(P, z, uv)
            soft = ad.sigmoid(pred * P[K_NAME])
            terms = {
                "sdf": L.loss_sdf(pred, d, delta),
                "sil": L.loss_silhouette(soft, (d > 0).astype(np.float64)),
                "eik": L.loss_eikonal(grad),
                "lat": L.loss_latent(ad.take_rows(P[SHAPE_LATENTS], batch), cfg.sigma)
                * (1.0 / len(batch)),
            }
            total, report = _checked_total(terms, weights, last_good)
            step += 1
            grads = gradient(tape, total)
            tape.clear()
            adam_update(params, grads, lr, step)
            epoch_reports.append(report)
        report = _mean_report(epoch_reports)
        history.reports.append(report)
        last_good = params.copy()
        if callback:
            callback(epoch, report)
        if history.plateaued(cfg.plateau_window, cfg.plateau_tol):
            history.stopped_early = True
            break
    latents = params.values.pop(SHAPE_LATENTS)
    params.m.pop(SHAPE_LATENTS)
    params.v.pop(SHAPE_LATENTS)
    return ShapeSpace(decoder, params, latents, list(dataset.ids)), history


def _checked_total(terms, weights, last_good):
    try:
        return L.weighted_total(terms, weights)
    except NumericalError as exc:
        raise TrainingDiverged(str(exc), last_good) from exc


def _mean_report(reports: list[L.LossReport]) -> L.LossReport:
    if len(reports) == 1:
        return reports[0]
    keys = reports[0].terms
    return L.LossReport({k: float(np.mean([r.terms[k] for r in reports])) for k in keys},
                        reports[0].weights)


def reconstruction_iou(space: ShapeSpace, dataset: ShapeDataset) -> np.ndarray:
    """IoU of each decoded training latent against its own mask."""
    out = []
    for z, mask in zip(space.latents, dataset.masks):
        decoded = space.decode_sdf(z, _centres(mask))
        bits = sdf_to_soft_mask(decoded, space.k).reshape(mask.bits.shape) > 0.5
        out.append(mask_iou(bits, mask.bits))
    return np.array(out)


def _centres(mask) -> np.ndarray:
    ii, jj = np.mgrid[0:mask.height, 0:mask.width]
    s = mask.pixel_scale
    return np.stack([(jj.ravel() + 0.5) * s, (ii.ravel() + 0.5) * s], axis=1)


# ---- deformation space ---------------------------------------------------------

DEFORM_LATENTS = "latents.deform"


@dataclass
class _PairData:
    """Per-pair constants reused every step."""

    pair_id: str
    base_id: str
    base: BaseMesh
    cloud: np.ndarray
    z_s: np.ndarray
    edges: np.ndarray
    lap: object


def _pair_data(pairs: DeformDataset, shapes: ShapeDataset, space: ShapeSpace) -> list[_PairData]:
    pairs.check(shapes)
    out = []
    meshes: dict[str, BaseMesh] = {}
    for p in pairs.pairs:
        if p.base_id not in meshes:
            meshes[p.base_id] = extract_base_mesh(shapes.mask(p.base_id))
        base = meshes[p.base_id]
        edges = base.edges()
        out.append(_PairData(p.pair_id, p.base_id, base, np.asarray(p.cloud, dtype=np.float64),
                             space.latent_of(p.base_id), edges,
                             L.uniform_laplacian(len(base.vertices), edges)))
    return out


def deform_model_from_config(cfg: TrainConfig, rng: np.random.Generator) -> DeformModel:
    return DeformModel.create(cfg.latent_dim_s, cfg.latent_dim_d, cfg.n_control,
                              cfg.deform_hidden, rng, pe_skin=cfg.pe_order_skin,
                              pe_xform=cfg.pe_order_transform, locality=cfg.skin_locality,
                              strict=cfg.strict_homogeneous)


def _pair_terms(model: DeformModel, P, z_d, item: _PairData, cfg: TrainConfig) -> dict:
    """Stage-1 terms for one pair: chamfer, edge length, Laplacian, map, prior."""
    deformed = model.deform(P, item.z_s, z_d, item.base)
    terms = {
        "cham": L.loss_chamfer(deformed, item.cloud),
        "leng": L.loss_edge_length(item.edges, item.base.vertices, deformed),
        "lap": L.loss_laplacian(item.lap, deformed, item.base.vertices),
        "lat": L.loss_latent(z_d, cfg.sigma),
    }
    if cfg.w_map > 0:
        terms["map"] = L.loss_map(L.loss_chamfer(item.base.vertices, deformed), z_d, P[PHI])
    return terms, deformed


def _stage1_names(model: DeformModel, cfg: TrainConfig) -> list[str]:
    return [n for n in model.params if n != CONTROL or cfg.optimize_control]


def train_deformation_stage1(pairs: DeformDataset, shapes: ShapeDataset, space: ShapeSpace,
                             cfg: TrainConfig, callback=None):
    """Correspondence-free fit of the deformation space to paired clouds.

    Optimises every ``z_d``, the control points (unless disabled), both
    decoders and ``phi``; the shape space is read only.  Returns
    ``(DeformModel, History)``.
    """
    if len(pairs) < 1:
        raise ValidationError("deformation training needs at least one pair")
    data = _pair_data(pairs, shapes, space)
    model = deform_model_from_config(cfg, _rng(cfg, 10))
    model.params.add(DEFORM_LATENTS, _rng(cfg, 11).normal(
        0.0, math.sqrt(cfg.latent_init_var), (len(data), cfg.latent_dim_d)))
    weights = {"cham": cfg.w_cham, "leng": cfg.w_leng, "lap": cfg.w_lap, "map": cfg.w_map,
               "lat": cfg.w_lat}
    names = _stage1_names(model, cfg)
    history = History()
    step = 0
    last_good = model.params.copy()
    for epoch in range(cfg.epochs):
        lr = step_decay(cfg.lr, epoch, cfg.lr_decay, cfg.decay_interval)
        reports = []
        for i in _rng(cfg, 12, epoch).permutation(len(data)):
            tape = Tape()
            P = model.params.watch(tape, names)
            P.update({n: Tensor(model.params[n]) for n in model.params if n not in P})
            z_d = P[DEFORM_LATENTS][int(i)]
            terms, _ = _pair_terms(model, P, z_d, data[i], cfg)
            total, report = _checked_total(terms, weights, last_good)
            step += 1
            grads = gradient(tape, total)
            tape.clear()
            adam_update(model.params, grads, lr, step)
            reports.append(report)
        report = _mean_report(reports)
        history.reports.append(report)
        last_good = model.params.copy()
        if callback:
            callback(epoch, report)
        if history.plateaued(cfg.plateau_window, cfg.plateau_tol):
            history.stopped_early = True
            break
    _detach_latents(model, data)
    return model, history


def _detach_latents(model: DeformModel, data: list[_PairData]) -> None:
    model.latents = model.params.values.pop(DEFORM_LATENTS)
    model.params.m.pop(DEFORM_LATENTS)
    model.params.v.pop(DEFORM_LATENTS)
    model.pair_ids = [d.pair_id for d in data]
    model.base_ids = [d.base_id for d in data]


def select_similar_shapes(query, pool: ShapeDataset, m: int, exclude=()) -> list[str]:
    """Ids of the ``m`` pool masks with the highest IoU against ``query``;
    ties keep id order."""
    if m < 1:
        raise ValidationError("m must be positive")
    q = query.bits if hasattr(query, "bits") else np.asarray(query, dtype=bool)
    scored = []
    for sid, mask in sorted(zip(pool.ids, pool.masks), key=lambda t: t[0]):
        if sid in exclude:
            continue
        if mask.bits.shape != q.shape:
            raise ValidationError("pool masks must share the query resolution")
        scored.append((-mask_iou(q, mask.bits), sid))
    scored.sort(key=lambda t: t[0])  # stable: equal IoU stays in id order
    return [sid for _, sid in scored[:m]]


def train_deformation_stage2(model: DeformModel, pairs: DeformDataset, shapes: ShapeDataset,
                             space: ShapeSpace, cfg: TrainConfig, callback=None,
                             boundary_terms: bool = True):
    """Second stage: similar bases share skinning weights and keep their
    boundary when deformed with a paired ``z_d``.

    Only the two decoders are updated; ``z_d``, control points and ``phi``
    stay fixed.  Returns a new ``(DeformModel, History)``.
    """
    data = _pair_data(pairs, shapes, space)
    if [d.pair_id for d in data] != list(model.pair_ids):
        raise ValidationError("stage 2 needs the pairs the model was trained on")
    model = DeformModel(model.skin, model.xform, model.params.copy(), model.latents.copy(),
                        list(model.pair_ids), list(model.base_ids), model.strict)
    meshes = {d.base_id: d.base for d in data}
    similar = []
    for d in data:
        ids = select_similar_shapes(shapes.mask(d.base_id), shapes, cfg.similar_m,
                                    exclude={d.base_id})
        for sid in ids:
            if sid not in meshes:
                meshes[sid] = extract_base_mesh(shapes.mask(sid))
        similar.append(ids)
    names = model.params.names(SKIN) + model.params.names(XFORM)
    weights = {"cham": cfg.w_cham, "leng": cfg.w_leng, "lap": cfg.w_lap, "skin": cfg.w_skin,
               "bound": cfg.w_bound if boundary_terms else 0.0,
               "ang": cfg.w_ang if boundary_terms else 0.0}
    history = History()
    step = 0
    last_good = model.params.copy()
    for epoch in range(cfg.stage2_epochs):
        lr = step_decay(cfg.lr, epoch, cfg.lr_decay, cfg.decay_interval)
        reports = []
        for i in _rng(cfg, 13, epoch).permutation(len(data)):
            item = data[i]
            tape = Tape()
            P = model.params.watch(tape, names)
            P.update({n: Tensor(model.params[n]) for n in model.params if n not in P})
            z_d = model.latents[i]
            deformed = model.deform(P, item.z_s, z_d, item.base)
            terms = {
                "cham": L.loss_chamfer(deformed, item.cloud),
                "leng": L.loss_edge_length(item.edges, item.base.vertices, deformed),
                "lap": L.loss_laplacian(item.lap, deformed, item.base.vertices),
            }
            skin, bound, ang = [], [], []
            w_ref = model.skin.forward(P, item.z_s, item.base.uv, P[CONTROL])
            for sid in similar[i]:
                other = meshes[sid]
                z_o = space.latent_of(sid)
                w_o = model.skin.forward(P, z_o, item.base.uv, P[CONTROL])
                skin.append(L.loss_skin_similarity(w_ref, w_o))
                if boundary_terms:
                    moved = model.deform(P, z_o, z_d, other)
                    bound.append(L.loss_boundary_length(other.contour, other.vertices, moved))
                    ang.append(L.loss_face_angle(other.boundary_corners(), moved))
            n_sim = max(len(similar[i]), 1)
            terms["skin"] = _avg(skin, n_sim)
            terms["bound"] = _avg(bound, n_sim)
            terms["ang"] = _avg(ang, n_sim)
            total, report = _checked_total(terms, weights, last_good)
            step += 1
            grads = gradient(tape, total)
            tape.clear()
            adam_update(model.params, grads, lr, step)
            reports.append(report)
        report = _mean_report(reports)
        history.reports.append(report)
        last_good = model.params.copy()
        if callback:
            callback(epoch, report)
    return model, history


def _avg(items: list, n: int) -> Tensor:
    if not items:
        return Tensor(0.0)
    total = items[0]
    for t in items[1:]:
        total = total + t
    return total * (1.0 / n)


def pair_chamfers(model: DeformModel, pairs: DeformDataset, shapes: ShapeDataset,
                  space: ShapeSpace) -> np.ndarray:
    """Unsquared chamfer between each reconstructed pair and its cloud."""
    out = []
    for i, d in enumerate(_pair_data(pairs, shapes, space)):
        deformed = model.deform_mesh(d.z_s, model.latents[i], d.base)
        out.append(L.chamfer_l2(deformed, d.cloud))
    return np.array(out)
