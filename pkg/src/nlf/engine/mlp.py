"""Multilayer perceptrons, parameter sets and positional encoding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ContractError, DimensionError, ValidationError
from . import autodiff as ad
from .autodiff import Tape, Tensor

ACTIVATIONS = ("relu", "leaky_relu", "softplus", "none")
HEADS = ("raw", "softmax", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    # (0, j): the network input is concatenated onto the input of layer j
    skip_connections: tuple[tuple[int, int], ...] = ()
    output_head: str = "raw"
    softplus_beta: float = 100.0
    leaky_slope: float = 0.01

    def __post_init__(self):
        if len(self.layer_widths) < 1 or self.input_dim < 1:
            raise ValidationError("an MLP needs an input and at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.output_head not in HEADS:
            raise ValidationError(f"unknown output head {self.output_head!r}")
        for src, dst in self.skip_connections:
            if src != 0 or not 0 < dst < len(self.layer_widths):
                raise ValidationError(f"bad skip connection {(src, dst)}")

    @property
    def skip_layers(self) -> frozenset[int]:
        return frozenset(dst for _, dst in self.skip_connections)

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    def layer_input_dim(self, j: int) -> int:
        base = self.input_dim if j == 0 else self.layer_widths[j - 1]
        return base + (self.input_dim if j in self.skip_layers else 0)

    def param_shapes(self, prefix: str = "") -> dict[str, tuple[int, ...]]:
        shapes = {}
        for j, width in enumerate(self.layer_widths):
            shapes[f"{prefix}{j}.w"] = (self.layer_input_dim(j), width)
            shapes[f"{prefix}{j}.b"] = (width,)
        return shapes

    def to_text(self) -> str:
        skips = ",".join(f"{a}:{b}" for a, b in self.skip_connections) or "-"
        widths = ",".join(str(w) for w in self.layer_widths)
        return (f"in={self.input_dim};widths={widths};act={self.activation};skip={skips};"
                f"head={self.output_head};beta={self.softplus_beta!r};slope={self.leaky_slope!r}")

    @classmethod
    def from_text(cls, text: str) -> "MlpSpec":
        kv = dict(item.split("=", 1) for item in text.split(";"))
        skips = () if kv["skip"] == "-" else tuple(
            tuple(int(v) for v in s.split(":")) for s in kv["skip"].split(","))
        return cls(input_dim=int(kv["in"]),
                   layer_widths=tuple(int(w) for w in kv["widths"].split(",")),
                   activation=kv["act"], skip_connections=skips, output_head=kv["head"],
                   softplus_beta=float(kv["beta"]), leaky_slope=float(kv["slope"]))


class ParamSet:
    """Named float64 arrays plus Adam moment state."""

    def __init__(self, values: Mapping[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.skipped_updates = 0
        for name, arr in (values or {}).items():
            self.add(name, arr)

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise ContractError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValidationError(f"non-finite initial value for {name!r}")
        self.values[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def update(self, other: "ParamSet") -> None:
        for name, arr in other.values.items():
            self.add(name, arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __setitem__(self, name: str, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if name in self.values and arr.shape != self.values[name].shape:
            raise DimensionError(f"shape change for {name!r}: {self.values[name].shape} -> {arr.shape}")
        if name not in self.values:
            self.add(name, arr)
        else:
            self.values[name] = arr

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def watch(self, tape: Tape, names=None) -> dict[str, Tensor]:
        chosen = self.values.keys() if names is None else names
        return {n: tape.watch(self.values[n], n) for n in chosen}

    def constants(self, names=None) -> dict[str, Tensor]:
        chosen = self.values.keys() if names is None else names
        return {n: Tensor(self.values[n], name=n) for n in chosen}

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, arr in self.values.items():
            out.values[name] = arr.copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.skipped_updates = self.skipped_updates
        return out

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.values):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.values[name]).tobytes())
        return h.hexdigest()


# ---- initialisation ------------------------------------------------------

def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str = "",
             last_zero: bool = False, last_bias=None) -> ParamSet:
    """He-normal weights, zero biases; optional zero/biased final layer."""
    ps = ParamSet()
    n = len(spec.layer_widths)
    for j, (name, shape) in enumerate(_pairs(spec, prefix)):
        fan_in, width = shape
        if j == n - 1 and last_zero:
            w = np.zeros(shape)
        else:
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        ps.add(f"{prefix}{j}.w", w)
        b = np.zeros(width)
        if j == n - 1 and last_bias is not None:
            b = np.asarray(last_bias, dtype=np.float64).reshape(width)
        ps.add(f"{prefix}{j}.b", b)
    return ps


def geometric_init(spec: MlpSpec, rng: np.random.Generator, prefix: str = "",
                   radius: float = 0.5, coord_dims: int = 2, latent_dims: int = 0,
                   latent_std: float = 1e-4, inside_positive: bool = True) -> ParamSet:
    """Initialise a softplus MLP so that it approximates a sphere SDF.

    Input layout is ``[coords, encoded extras, latent]``: only the first
    ``coord_dims`` columns feed the first and skip layers, the encoded
    extras start at zero and the latent columns start near zero.  With
    ``inside_positive`` the output approximates ``radius - |x|``.
    """
    if spec.output_dim != 1:
        raise ContractError("geometric init expects a scalar output")
    ps = ParamSet()
    n = len(spec.layer_widths)
    in_dim = spec.input_dim
    for j, (_, shape) in enumerate(_pairs(spec, prefix)):
        fan_in, width = shape
        if j == n - 1:
            w = rng.normal(math.sqrt(math.pi) / math.sqrt(fan_in), 1e-4, size=shape)
            b = np.full(width, -radius)
            if inside_positive:
                w, b = -w, -b
        else:
            w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(width), size=shape)
            b = np.zeros(width)
            if j == 0 or j in spec.skip_layers:
                start = fan_in - in_dim
                w[start + coord_dims:, :] = 0.0
                if latent_dims:
                    w[fan_in - latent_dims:, :] = rng.normal(0.0, latent_std, size=(latent_dims, width))
        ps.add(f"{prefix}{j}.w", w)
        ps.add(f"{prefix}{j}.b", b)
    # softplus offsets accumulate through the layers; pin f(origin) = +-radius
    at_origin = forward_mlp(spec, ps.constants(), np.zeros((1, in_dim)), prefix).data[0, 0]
    target = radius if inside_positive else -radius
    ps[f"{prefix}{n - 1}.b"] = ps[f"{prefix}{n - 1}.b"] + (target - at_origin)
    return ps


def _pairs(spec: MlpSpec, prefix: str):
    shapes = spec.param_shapes(prefix)
    for j in range(len(spec.layer_widths)):
        yield f"{prefix}{j}.w", shapes[f"{prefix}{j}.w"]


# ---- evaluation ----------------------------------------------------------

def _activate(spec: MlpSpec, pre: Tensor) -> Tensor:
    if spec.activation == "relu":
        return ad.relu(pre)
    if spec.activation == "leaky_relu":
        return ad.leaky_relu(pre, spec.leaky_slope)
    if spec.activation == "softplus":
        return ad.softplus(pre, spec.softplus_beta)
    return pre


def _activation_slope(spec: MlpSpec, pre: Tensor) -> Tensor:
    if spec.activation == "softplus":
        return ad.sigmoid(pre * spec.softplus_beta)
    if spec.activation == "relu":
        return Tensor((pre.data > 0).astype(np.float64))
    if spec.activation == "leaky_relu":
        return Tensor(np.where(pre.data > 0, 1.0, spec.leaky_slope))
    return Tensor(np.ones_like(pre.data))


def forward_mlp(spec: MlpSpec, params: Mapping[str, Tensor], x, prefix: str = "",
                tangents=None):
    """Evaluate the network on a batch ``x`` of shape (B, input_dim).

    ``params`` maps names to tensors (watched leaves or constants).  When
    ``tangents`` (shape (T*B, input_dim)) is given, forward-mode
    derivatives are carried through every layer with taped operations,
    and ``(output, output_tangents)`` is returned; the tangents can then
    appear in a loss and be differentiated again.
    """
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"MLP expects (B, {spec.input_dim}) input, got {x.shape}")
    for name in spec.param_shapes(prefix):
        if name not in params:
            raise ContractError(f"missing parameter {name!r}")
    batch = x.shape[0]
    h = x
    xt = None if tangents is None else ad.as_tensor(tangents)
    ht = xt
    reps = 0 if xt is None else xt.shape[0] // batch
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    n = len(spec.layer_widths)
    for j in range(n):
        if j in spec.skip_layers:
            h = ad.concat([h, x], axis=1) * inv_sqrt2
            if ht is not None:
                ht = ad.concat([ht, xt], axis=1) * inv_sqrt2
        w = params[f"{prefix}{j}.w"]
        b = params[f"{prefix}{j}.b"]
        pre = h @ w + b
        pre_t = None if ht is None else ht @ w
        if j < n - 1:
            if pre_t is not None:
                slope = _activation_slope(spec, pre)
                width = pre.shape[1]
                pre_t = (pre_t.reshape(reps, batch, width) * slope).reshape(reps * batch, width)
            h = _activate(spec, pre)
            ht = pre_t
        else:
            h, ht = pre, pre_t
    if spec.output_head == "softmax":
        if ht is not None:
            raise ContractError("tangents are only supported with a raw head")
        h = ad.softmax(h, axis=1)
    elif spec.output_head == "sigmoid":
        if ht is not None:
            raise ContractError("tangents are only supported with a raw head")
        h = ad.sigmoid(h)
    return h if tangents is None else (h, ht)


# ---- positional encoding -------------------------------------------------

def encoded_dim(dims: int, order: int) -> int:
    return dims * (1 + 2 * order)


def positional_encode(x, order: int = 8) -> Tensor:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)]``."""
    if order < 1:
        raise ValidationError("positional encoding order must be >= 1")
    x = ad.as_tensor(x)
    feats = [x]
    for k in range(order):
        scaled = x * (math.pi * 2.0 ** k)
        feats.append(ad.sin(scaled))
        feats.append(ad.cos(scaled))
    return ad.concat(feats, axis=-1)


def positional_encode_jacobian(x: np.ndarray, order: int) -> np.ndarray:
    """Derivative of :func:`positional_encode` for each input coordinate.

    Returns shape (D*B, D*(1+2*order)) where block ``j`` (rows j*B..)
    holds d features / d x[:, j].
    """
    x = np.asarray(x, dtype=np.float64)
    batch, dims = x.shape
    out = np.zeros((dims, batch, encoded_dim(dims, order)))
    for j in range(dims):
        out[j, :, j] = 1.0
        for k in range(order):
            f = math.pi * 2.0 ** k
            base = dims * (1 + 2 * k)
            out[j, :, base + j] = f * np.cos(f * x[:, j])
            out[j, :, base + dims + j] = -f * np.sin(f * x[:, j])
    return out.reshape(dims * batch, -1)
