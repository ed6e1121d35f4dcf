"""Training/fitting configuration as a flat ``key = value`` text file."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ValidationError


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 1000
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_interval: int = 500
    batch_size: int = 0             # leaves per step; 0 = all
    plateau_tol: float = 1e-5       # early stop: relative change over plateau_window epochs
    plateau_window: int = 50
    # shape space
    latent_dim_s: int = 32
    shape_hidden: int = 128
    shape_layers: int = 4
    pe_order_shape: int = 4
    samples_per_leaf: int = 2048
    k_init: float = 50.0
    delta: float = 0.01
    sigma: float = 10.0             # prior std for z_s and z_d
    latent_init_var: float = 0.001
    sdf_normalize: bool = False
    normalize_before_truncate: bool = True
    mask_res: int = 64
    # deformation space
    latent_dim_d: int = 32
    n_control: int = 100
    deform_hidden: int = 128
    pe_order_skin: int = 8
    pe_order_transform: int = 4
    optimize_control: bool = True
    skin_locality: bool = True
    strict_homogeneous: bool = False
    similar_m: int = 5
    stage2_epochs: int = 200
    # loss weights
    w_sdf: float = 1.0
    w_sil: float = 1.0
    w_eik: float = 0.1
    w_lat: float = 1e-4
    w_cham: float = 1.0
    w_leng: float = 0.1
    w_lap: float = 0.1
    w_map: float = 0.01
    w_bound: float = 0.1
    w_ang: float = 0.01
    w_anc: float = 0.1
    w_skin: float = 1.0
    # fitting
    grid_res: int = 32
    grid_delta: float = 0.1
    enc_epochs: int = 300
    enc_lr: float = 1e-3
    enc_augment: int = 40
    fit_iters: int = 300
    fit_lr: float = 1e-3
    fit_decay_interval: int = 50
    fit_alternate: bool = False
    kmeans_k: int = 3
    kmeans_restarts: int = 20
    # registration
    cpd_beta: float = 2.0
    cpd_lambda: float = 3.0
    cpd_omega: float = 0.1
    align_step_deg: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> "TrainConfig":
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                continue
            if f.name.startswith("w_") or f.name in ("seed", "batch_size"):
                if value < 0:
                    raise ValidationError(f"{f.name} must be non-negative")
            elif value <= 0:
                raise ValidationError(f"{f.name} must be positive")
        if not 1 <= self.n_control <= 1000:
            raise ValidationError("n_control must lie in [1, 1000]")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return (base or cls()).replace(**parse_pairs(text))

    @classmethod
    def load(cls, path, base: "TrainConfig | None" = None) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            from .errors import CheckpointError
            raise CheckpointError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, base)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value)


def coerce(name: str, raw: str):
    """Convert a textual value to the type of TrainConfig field ``name``."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    if name not in kinds:
        raise ValidationError(f"unknown config key {name!r}")
    kind = kinds[name]
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ValidationError(f"bad value for {name}: {raw!r}") from exc


def parse_pairs(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = coerce(key.replace("-", "_"), value)
    return out
