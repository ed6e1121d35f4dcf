"""Adam updates and step-decay learning-rate schedules."""
from __future__ import annotations

import logging
from typing import Iterable, Mapping

import numpy as np

from ..errors import DimensionError
from .mlp import ParamSet

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def adam_update(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float, step: int,
                names: Iterable[str] | None = None) -> ParamSet:
    """One bias-corrected Adam step, in place; ``step`` counts from 1.

    Parameters whose gradient holds NaN/Inf are left untouched and counted
    in ``params.skipped_updates``.
    """
    chosen = grads.keys() if names is None else names
    c1 = 1.0 - BETA1 ** step
    c2 = 1.0 - BETA2 ** step
    for name in chosen:
        g = grads[name]
        p = params.values[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            params.skipped_updates += 1
            log.warning("non-finite gradient for %s; update skipped", name)
            continue
        m = params.m[name]
        v = params.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        params.values[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return params


def step_decay(lr: float, epoch: int, factor: float = 0.5, interval: int = 500) -> float:
    return lr * factor ** (epoch // interval)
