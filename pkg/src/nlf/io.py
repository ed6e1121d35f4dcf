"""File formats: PGM masks, XYZ/PLY clouds, OBJ meshes, NLF1 checkpoints
and the on-disk dataset layout.  Every write goes through a temporary file
and an atomic rename."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .base_shape import BaseMesh, ShapeDecoder, ShapeSpace
from .deformation import DeformModel, SkinningDecoder, TransformDecoder
from .engine import ParamSet
from .errors import CheckpointError, IncompatibleCheckpointError, ValidationError
from .sdf import Mask2D
from .synthetic import DeformDataset, DeformPair, ShapeDataset

MAGIC = "NLF1"
VERSION = 1


# ---- atomic writes -------------------------------------------------------------

def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    payload = data.encode() if isinstance(data, str) else data
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc
    return path


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc


def fmt(x: float) -> str:
    """Shortest round-tripping decimal for a float (stable across runs)."""
    return repr(float(x))


# ---- masks -----------------------------------------------------------------------

def write_pgm(path, mask: Mask2D) -> Path:
    h, w = mask.bits.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    return atomic_write(path, header + (mask.bits.astype(np.uint8) * 255).tobytes())


def read_pgm(path, pixel_scale: float | None = None) -> Mask2D:
    """Binary (P5) or plain (P2) greymap; pixels above half range are leaf."""
    raw = _read_bytes(path)
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CheckpointError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos].decode("ascii", "replace"))
    magic, w, h, maxval = tokens[0], *map(_int_token(path), tokens[1:])
    if magic == "P5":
        body = raw[pos + 1:]
        if maxval > 255 or len(body) < w * h:
            raise CheckpointError(f"{path}: truncated or unsupported PGM data")
        px = np.frombuffer(body[:w * h], dtype=np.uint8).reshape(h, w)
    elif magic == "P2":
        vals = raw[pos:].split()
        if len(vals) < w * h:
            raise CheckpointError(f"{path}: truncated PGM data")
        px = np.array([int(v) for v in vals[:w * h]]).reshape(h, w)
    else:
        raise ValidationError(f"{path}: not a PGM file")
    bits = px.astype(np.float64) > maxval / 2
    return Mask2D(bits, pixel_scale if pixel_scale is not None else 1.0 / max(h, w))


def _int_token(path):
    def conv(tok: str) -> int:
        try:
            return int(tok)
        except ValueError as exc:
            raise ValidationError(f"{path}: bad PGM header value {tok!r}") from exc
    return conv


# ---- clouds ------------------------------------------------------------------------

def write_xyz(path, points) -> Path:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return atomic_write(path, "".join(f"{fmt(a)} {fmt(b)} {fmt(c)}\n" for a, b, c in p))


def read_xyz(path) -> np.ndarray:
    text = _read_bytes(path).decode("utf-8", "replace")
    rows = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        try:
            rows.append([float(v) for v in parts[:3]])
        except ValueError as exc:
            raise ValidationError(f"{path}:{n}: bad coordinate") from exc
        if len(parts) < 3:
            raise ValidationError(f"{path}:{n}: expected three coordinates")
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise ValidationError(f"{path}: non-finite coordinates")
    return pts


def write_ply(path, points, faces=None) -> Path:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    f = np.zeros((0, 3), dtype=np.int64) if faces is None else np.asarray(faces)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(p)}", "property double x",
             "property double y", "property double z"]
    if len(f):
        lines += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    lines += [f"{fmt(a)} {fmt(b)} {fmt(c)}" for a, b, c in p]
    lines += ["3 " + " ".join(str(int(i)) for i in tri) for tri in f]
    return atomic_write(path, "\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """ASCII PLY vertices (x y z first) and triangle faces."""
    lines = _read_bytes(path).decode("utf-8", "replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValidationError(f"{path}: not a PLY file")
    n_v = n_f = 0
    i = 1
    while i < len(lines) and lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:1] == ["format"] and parts[1] != "ascii":
            raise ValidationError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n_v = int(parts[2])
        if parts[:2] == ["element", "face"]:
            n_f = int(parts[2])
        i += 1
    body = lines[i + 1:]
    if len(body) < n_v + n_f:
        raise CheckpointError(f"{path}: truncated PLY body")
    v = np.array([[float(x) for x in body[k].split()[:3]] for k in range(n_v)]).reshape(-1, 3)
    f = np.array([[int(x) for x in body[n_v + k].split()[1:4]] for k in range(n_f)],
                 dtype=np.int64).reshape(-1, 3)
    return v, f


# ---- meshes --------------------------------------------------------------------------

def write_obj(path, vertices, faces, uv=None) -> Path:
    """OBJ with optional per-vertex texture coordinates (1-based indices)."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    out = [f"v {fmt(a)} {fmt(b)} {fmt(c)}" for a, b, c in v]
    if uv is not None:
        out += [f"vt {fmt(a)} {fmt(b)}" for a, b in np.asarray(uv, dtype=np.float64)]
        out += ["f " + " ".join(f"{i + 1}/{i + 1}" for i in tri) for tri in f]
    else:
        out += ["f " + " ".join(str(i + 1) for i in tri) for tri in f]
    return atomic_write(path, "\n".join(out) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Strict reader for triangle OBJ files: every face index must resolve."""
    v, vt, f = [], [], []
    text = _read_bytes(path).decode("utf-8", "replace")
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                v.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                vt.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValidationError(f"{path}:{n}: only triangles are supported")
                f.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
        except ValueError as exc:
            raise ValidationError(f"{path}:{n}: malformed line") from exc
    verts = np.array(v, dtype=np.float64).reshape(-1, 3)
    faces = np.array(f, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
        raise ValidationError(f"{path}: face index out of range")
    if not np.isfinite(verts).all():
        raise ValidationError(f"{path}: non-finite vertex")
    return verts, faces, (np.array(vt, dtype=np.float64) if vt else None)


# ---- checkpoints ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    meta: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    lines = [MAGIC, f"version {VERSION}"]
    for key in sorted(ckpt.meta):
        value = str(ckpt.meta[key])
        if "\n" in value or " " in key:
            raise ValidationError(f"metadata {key!r} must be a single line without spaces in the key")
        lines.append(f"meta {key} {value}")
    payload = []
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        if " " in name:
            raise ValidationError(f"tensor name {name!r} contains a space")
        shape = ",".join(str(d) for d in a.shape) or "-"
        lines.append(f"tensor {name} {shape}")
        payload.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    lines.append("end")
    return ("\n".join(lines) + "\n").encode() + b"".join(payload)


def decode_checkpoint(raw: bytes, source="checkpoint") -> Checkpoint:
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode() + b"\n") or end < 0:
        raise CheckpointError(f"{source}: not an {MAGIC} checkpoint (or truncated header)")
    header = raw[:end].decode("utf-8", "replace").split("\n")
    if header[1] != f"version {VERSION}":
        raise IncompatibleCheckpointError(f"{source}: unsupported {header[1]!r}, expected version {VERSION}")
    meta, directory = {}, []
    for line in header[2:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            name, _, shape = rest.partition(" ")
            dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            directory.append((name, dims))
        else:
            raise CheckpointError(f"{source}: unexpected header line {line!r}")
    body = raw[end + len(b"\nend\n"):]
    expected = sum(4 * int(np.prod(d)) for _, d in directory)
    if len(body) != expected:
        raise CheckpointError(f"{source}: payload has {len(body)} bytes, expected {expected} (truncated?)")
    tensors, pos = {}, 0
    for name, dims in directory:
        n = int(np.prod(dims))
        tensors[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(dims)
        pos += 4 * n
    return Checkpoint(meta, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    return atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(_read_bytes(path), str(path))


def _require(ckpt: Checkpoint, kind: str, source) -> None:
    if ckpt.meta.get("kind") != kind:
        raise IncompatibleCheckpointError(f"{source}: expected a {kind} checkpoint, "
                                          f"found {ckpt.meta.get('kind')!r}")


def _params(ckpt: Checkpoint, skip=("latents",)) -> ParamSet:
    return ParamSet({k: v.astype(np.float64) for k, v in ckpt.tensors.items() if k not in skip})


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",")) if text else ()


def _ids(text: str) -> list[str]:
    return text.split(",") if text else []


def shape_checkpoint(space: ShapeSpace) -> Checkpoint:
    d = space.decoder
    meta = {"kind": "shape", "latent_dim": d.latent_dim, "pe_order": d.pe_order,
            "hidden": ",".join(map(str, d.hidden)), "skip_layer": d.skip_layer,
            "softplus_beta": repr(d.softplus_beta), "ids": ",".join(space.ids)}
    tensors = dict(space.params.values)
    tensors["latents"] = space.latents
    return Checkpoint({k: str(v) for k, v in meta.items()}, tensors)


def shape_from_checkpoint(ckpt: Checkpoint, source="checkpoint", latent_dim: int | None = None) -> ShapeSpace:
    _require(ckpt, "shape", source)
    m = ckpt.meta
    dec = ShapeDecoder(int(m["latent_dim"]), int(m["pe_order"]), _ints(m["hidden"]),
                       int(m["skip_layer"]), float(m["softplus_beta"]))
    if latent_dim is not None and latent_dim != dec.latent_dim:
        raise IncompatibleCheckpointError(f"{source}: latent size {dec.latent_dim} != configured {latent_dim}")
    return ShapeSpace(dec, _params(ckpt), ckpt.tensors["latents"].astype(np.float64), _ids(m["ids"]))


def deform_checkpoint(model: DeformModel) -> Checkpoint:
    s, x = model.skin, model.xform
    meta = {"kind": "deform", "latent_dim_s": s.latent_dim, "latent_dim_d": x.latent_dim,
            "n_control": s.n_control, "skin_hidden": ",".join(map(str, s.hidden)),
            "xform_hidden": ",".join(map(str, x.hidden)), "pe_skin": s.pe_order,
            "pe_xform": x.pe_order, "locality": int(s.locality), "strict": int(model.strict),
            "pair_ids": ",".join(model.pair_ids), "base_ids": ",".join(model.base_ids)}
    tensors = dict(model.params.values)
    tensors["latents"] = model.latents.reshape(len(model.latents), x.latent_dim)
    return Checkpoint({k: str(v) for k, v in meta.items()}, tensors)


def deform_from_checkpoint(ckpt: Checkpoint, source="checkpoint", n_control: int | None = None) -> DeformModel:
    _require(ckpt, "deform", source)
    m = ckpt.meta
    if n_control is not None and int(m["n_control"]) != n_control:
        raise IncompatibleCheckpointError(
            f"{source}: checkpoint has K={m['n_control']} control points, configuration asks for K={n_control}")
    skin = SkinningDecoder(int(m["latent_dim_s"]), int(m["n_control"]), _ints(m["skin_hidden"]),
                           int(m["pe_skin"]), bool(int(m["locality"])))
    xform = TransformDecoder(int(m["latent_dim_d"]), _ints(m["xform_hidden"]), int(m["pe_xform"]))
    return DeformModel(skin, xform, _params(ckpt), ckpt.tensors["latents"].astype(np.float64),
                       _ids(m["pair_ids"]), _ids(m["base_ids"]), bool(int(m["strict"])))


def encoders_checkpoint(enc) -> Checkpoint:
    meta = {"kind": "encoders", "resolution": enc.resolution, "delta": repr(enc.delta),
            "latent_dim_s": enc.shape.latent_dim, "latent_dim_d": enc.deform.latent_dim,
            "channels": ",".join(map(str, enc.shape.channels)),
            "train_error": repr(enc.train_error), "heldout_error": repr(enc.heldout_error),
            "baseline_error": repr(enc.baseline_error)}
    return Checkpoint({k: str(v) for k, v in meta.items()}, dict(enc.params.values))


def encoders_from_checkpoint(ckpt: Checkpoint, source="checkpoint"):
    from .fitting import Encoders, GridEncoder
    _require(ckpt, "encoders", source)
    m = ckpt.meta
    ch = _ints(m["channels"])
    res = int(m["resolution"])
    return Encoders(GridEncoder(res, int(m["latent_dim_s"]), ch, "enc_s."),
                    GridEncoder(res, int(m["latent_dim_d"]), ch, "enc_d."),
                    _params(ckpt, skip=()), float(m["delta"]), float(m["train_error"]),
                    float(m["heldout_error"]), float(m["baseline_error"]))


# ---- dataset layout -------------------------------------------------------------------------

def save_dataset(root, shapes: ShapeDataset, pairs: DeformDataset | None = None) -> Path:
    """``masks/<id>.pgm`` and ``pairs/<id>/{base_id.txt, deformed.xyz, truth.json}``."""
    root = Path(root)
    for sid, mask in zip(shapes.ids, shapes.masks):
        write_pgm(root / "masks" / f"{sid}.pgm", mask)
    for p in (pairs.pairs if pairs else []):
        d = root / "pairs" / p.pair_id
        atomic_write(d / "base_id.txt", p.base_id + "\n")
        write_xyz(d / "deformed.xyz", p.cloud)
        if p.truth:
            atomic_write(d / "truth.json", json.dumps(p.truth, sort_keys=True, indent=1) + "\n")
    return root


def load_dataset(root) -> tuple[ShapeDataset, DeformDataset]:
    root = Path(root)
    mask_dir = root / "masks"
    if not mask_dir.is_dir():
        raise CheckpointError(f"{root}: no masks/ directory")
    files = sorted(mask_dir.glob("*.pgm"))
    shapes = ShapeDataset([read_pgm(f) for f in files], [f.stem for f in files])
    pairs = []
    pair_dir = root / "pairs"
    for d in sorted(pair_dir.iterdir()) if pair_dir.is_dir() else []:
        if not d.is_dir():
            continue
        base_id = _read_bytes(d / "base_id.txt").decode().strip()
        truth = {}
        if (d / "truth.json").exists():
            truth = json.loads(_read_bytes(d / "truth.json").decode())
        pairs.append(DeformPair(d.name, base_id, read_xyz(d / "deformed.xyz"), truth))
    return shapes, DeformDataset(pairs).check(shapes)


def write_mesh_obj(path, base: BaseMesh, vertices=None) -> Path:
    """A (deformed) leaf mesh whose texture coordinates are the base UVs."""
    v = base.vertices if vertices is None else vertices
    return write_obj(path, v, base.faces, base.uv)
