"""``nlf`` command line: data synthesis, training, registration, fitting,
generation and evaluation.  Exit codes: 0 ok, 1 invalid input, 2 numerical
failure, 3 file/IO problem."""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import shlex
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, io
from . import losses as L
from .base_shape import interpolate_latent, sample_latent
from .config import TrainConfig
from .deformation import generate_mesh
from .errors import CheckpointError, NlfError, NumericalError, ValidationError
from .registration import register_pair
from .synthetic import generate_synthetic_dataset

log = logging.getLogger("nlf")

COMMANDS = ("synth", "train-shape", "train-deform", "train-enc", "register", "fit", "fit-multi",
            "generate", "interp", "eval", "replay")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


# ---- run manifest ------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: TrainConfig | None
    seed: int | None
    outputs: list[Path] = field(default_factory=list)
    started: float = field(default_factory=time.time)

    def text(self) -> str:
        lines = [f"version = nlf {__version__}", f"command = {self.command}",
                 f"cwd = {os.getcwd()}", f"argv = {shlex.join(self.argv)}", f"seed = {self.seed}",
                 f"wall_time_s = {time.time() - self.started:.3f}"]
        for p in self.outputs:
            lines.append(f"output = {p} sha256:{_digest(p)}")
        if self.config is not None:
            lines.append("[config]")
            lines.append(self.config.to_text().rstrip("\n"))
        return "\n".join(lines) + "\n"

    def write(self, path: Path) -> Path:
        return io.atomic_write(path, self.text())


def _is_manifest(path: Path) -> bool:
    return path.name == "manifest.txt" or path.suffix == ".manifest"


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    paths = sorted(q for q in path.rglob("*") if q.is_file() and not _is_manifest(q)) \
        if path.is_dir() else [path]
    for q in paths:
        h.update(str(q.relative_to(path) if path.is_dir() else q.name).encode())
        h.update(q.read_bytes())
    return h.hexdigest()


def read_manifest(path) -> tuple[list[str], dict[str, str], str]:
    """Recorded argv, ``{output path: sha256}`` and working directory."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read manifest {path}: {exc}") from exc
    argv, hashes, cwd = None, {}, "."
    for line in text.splitlines():
        if line.startswith("cwd = "):
            cwd = line[len("cwd = "):]
        elif line.startswith("argv = "):
            argv = shlex.split(line[len("argv = "):])
        elif line.startswith("output = "):
            name, _, digest = line[len("output = "):].rpartition(" sha256:")
            hashes[name] = digest
    if argv is None:
        raise ValidationError(f"{path}: manifest has no argv line")
    return argv, hashes, cwd


def replay(path) -> int:
    """Re-run a manifest's command and compare every output hash."""
    argv, hashes, cwd = read_manifest(path)
    here = os.getcwd()
    try:
        os.chdir(cwd)
        code = run_cli(argv)
        if code:
            return code
        bad = [name for name, digest in hashes.items() if _digest(Path(name)) != digest]
    finally:
        os.chdir(here)
    for name in bad:
        print(f"nlf: replay mismatch: {name}", file=sys.stderr)
    return NumericalError.exit_code if bad else 0


# ---- argument helpers ----------------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration field")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--k-control", type=int, dest="n_control")
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--grid-res", type=int)
    p.add_argument("--seed", type=int)


def build_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if getattr(args, "config", None) else TrainConfig()
    changes = {}
    for key in ("epochs", "lr", "n_control", "grid_res", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "latent_dim", None) is not None:
        changes["latent_dim_s"] = changes["latent_dim_d"] = args.latent_dim
    cfg = cfg.replace(**changes)
    if getattr(args, "set", None):
        cfg = cfg.from_text("\n".join(s.replace("=", " = ", 1) for s in args.set), cfg)
    return cfg.validate()


def _parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="nlf", description="Neural parametric leaf model tools")
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", default="data")

    p = sub.add_parser("train-shape", help="train the shape space")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _config_flags(p)

    p = sub.add_parser("train-deform", help="train the deformation space")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="shape checkpoint")
    p.add_argument("--deform", help="stage-1 checkpoint (stage 2 only)")
    p.add_argument("--out", required=True)
    _config_flags(p)

    p = sub.add_parser("train-enc", help="train the inversion encoders")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--deform", required=True)
    p.add_argument("--out", required=True)
    _config_flags(p)

    p = sub.add_parser("register", help="rigidly align and register dataset pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--pair", action="append", help="restrict to these pair ids")
    _config_flags(p)

    for name in ("fit", "fit-multi"):
        p = sub.add_parser(name, help="fit the model to observed clouds")
        p.add_argument("--model", required=True)
        p.add_argument("--deform", required=True)
        p.add_argument("--enc", help="encoder checkpoint (latent means when omitted)")
        p.add_argument("--out", required=True)
        p.add_argument("--unit-mm", type=float, default=1.0, help="millimetres per model unit")
        if name == "fit":
            p.add_argument("--cloud", required=True)
            p.add_argument("--gt", help="ground-truth OBJ for normal consistency")
        else:
            p.add_argument("--cloud", nargs="+", required=True)
            p.add_argument("--no-share", action="store_true", help="disable the anchor shape")
        _config_flags(p)

    p = sub.add_parser("generate", help="decode a mesh from sampled latents")
    p.add_argument("--model", required=True)
    p.add_argument("--deform", required=True)
    p.add_argument("--zs-seed", type=int, default=0)
    p.add_argument("--zd-seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", default="generated.obj")

    p = sub.add_parser("interp", help="meshes along a latent interpolation")
    p.add_argument("--model", required=True)
    p.add_argument("--deform", required=True)
    p.add_argument("--from", dest="src", required=True, help="pair id at t=0")
    p.add_argument("--to", dest="dst", required=True, help="pair id at t=1")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="chamfer and normal consistency between meshes")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--unit-mm", type=float, default=1.0)

    p = sub.add_parser("replay", help="re-run a manifest's command and check its output hashes")
    p.add_argument("manifest")
    return ap


# ---- commands ---------------------------------------------------------------------------------

def _manifest_path(out: Path) -> Path:
    return out / "manifest.txt" if out.suffix == "" else out.with_name(out.name + ".manifest")


def _load_shape(path, cfg=None):
    return io.shape_from_checkpoint(io.load_checkpoint(path), path)


def _load_deform(path, args=None):
    k = getattr(args, "n_control", None)
    return io.deform_from_checkpoint(io.load_checkpoint(path), path, k)


def _history_text(history) -> str:
    return "".join(f"{i} {r.line()}\n" for i, r in enumerate(history.reports))


def cmd_synth(args, out: Path):
    shapes, pairs = generate_synthetic_dataset(args.n, args.seed, args.resolution)
    io.save_dataset(out, shapes, pairs)
    return [out], None, args.seed


def cmd_train_shape(args, out: Path):
    from .training import reconstruction_iou, train_shape_space
    cfg = build_config(args)
    shapes, _ = io.load_dataset(args.data)
    space, history = train_shape_space(shapes, cfg)
    io.save_checkpoint(out, io.shape_checkpoint(space))
    iou = reconstruction_iou(space, shapes)
    log_path = out.with_name(out.name + ".log")
    io.atomic_write(log_path, _history_text(history) + "".join(
        f"iou {sid} {io.fmt(v)}\n" for sid, v in zip(shapes.ids, iou)))
    print(f"trained {len(shapes)} shapes; mean_iou={iou.mean():.4f}")
    return [out, log_path], cfg, cfg.seed


def cmd_train_deform(args, out: Path):
    from .training import pair_chamfers, train_deformation_stage1, train_deformation_stage2
    cfg = build_config(args)
    shapes, pairs = io.load_dataset(args.data)
    space = _load_shape(args.model)
    if args.stage == 1:
        model, history = train_deformation_stage1(pairs, shapes, space, cfg)
    else:
        if not args.deform:
            raise ValidationError("stage 2 needs --deform with a stage-1 checkpoint")
        model, history = train_deformation_stage2(_load_deform(args.deform, args), pairs, shapes,
                                                  space, cfg)
    io.save_checkpoint(out, io.deform_checkpoint(model))
    ch = pair_chamfers(model, pairs, shapes, space)
    log_path = out.with_name(out.name + ".log")
    io.atomic_write(log_path, _history_text(history) + "".join(
        f"chamfer_l2 {p.pair_id} {io.fmt(c)}\n" for p, c in zip(pairs.pairs, ch)))
    print(f"stage {args.stage}: {len(pairs)} pairs; mean_chamfer_l2={ch.mean():.6f}")
    return [out, log_path], cfg, cfg.seed


def cmd_train_enc(args, out: Path):
    from .fitting import train_inversion_encoders
    cfg = build_config(args)
    _, pairs = io.load_dataset(args.data)
    space, model = _load_shape(args.model), _load_deform(args.deform, args)
    clouds = {p.pair_id: p.cloud for p in pairs.pairs}
    enc = train_inversion_encoders(space, model, clouds, cfg)
    io.save_checkpoint(out, io.encoders_checkpoint(enc))
    print(f"encoders: train={enc.train_error:.6g} heldout={enc.heldout_error:.6g} "
          f"mean_baseline={enc.baseline_error:.6g}")
    return [out], cfg, cfg.seed


def cmd_register(args, out: Path):
    from .base_shape import extract_base_mesh
    cfg = build_config(args)
    root = Path(args.data)
    shapes, pairs = io.load_dataset(root)
    written = []
    for pair in pairs.pairs:
        if args.pair and pair.pair_id not in args.pair:
            continue
        mesh = extract_base_mesh(shapes.mask(pair.base_id))
        reg = register_pair(mesh.vertices, mesh.edges(), mesh.contour, pair.cloud,
                            beta=cfg.cpd_beta, lam=cfg.cpd_lambda, omega=cfg.cpd_omega,
                            step_deg=cfg.align_step_deg)
        d = root / "pairs" / pair.pair_id
        rows = ["base_vertex_index,target_index,confidence"]
        rows += [f"{i},{int(t)},{io.fmt(c)}" for i, (t, c) in enumerate(zip(reg.target_index, reg.confidence))]
        written.append(io.atomic_write(d / "correspondence.csv", "\n".join(rows) + "\n"))
        written.append(io.write_ply(d / "aligned_deformed.ply", reg.aligned))
        print(f"{pair.pair_id}: chamfer {reg.chamfer_before:.6g} -> {reg.chamfer_after:.6g}")
    return written, cfg, cfg.seed


def _fit_report(res, cloud, unit_mm: float, gt=None) -> str:
    nc = float("nan")
    if gt is not None:
        nc = L.metric_normal_consistency(gt[0], gt[1], res.vertices, res.faces)
    return (f"chamfer_l2_mm={res.residual * unit_mm:.6f}\n"
            f"nc={nc:.6f}\niterations={res.iterations}\nresets={res.resets}\n")


def _latents_text(z_s, z_d) -> str:
    return "".join(f"{io.fmt(v)}\n" for v in z_s) + "---\n" + "".join(f"{io.fmt(v)}\n" for v in z_d)


def cmd_fit(args, out: Path):
    from .fitting import fit_multi_leaf, fit_observation
    cfg = build_config(args)
    space, model = _load_shape(args.model), _load_deform(args.deform, args)
    enc = io.encoders_from_checkpoint(io.load_checkpoint(args.enc), args.enc) if args.enc else None
    written = []
    if args.command == "fit":
        cloud = io.read_xyz(args.cloud)
        res = fit_observation(space, model, cloud, cfg, enc)
        gt = io.read_obj(args.gt)[:2] if args.gt else None
        written.append(io.write_mesh_obj(out / "fitted.obj", res.base, res.vertices))
        written.append(io.atomic_write(out / "latents.txt", _latents_text(res.z_s, res.z_d)))
        written.append(io.atomic_write(out / "report.txt", _fit_report(res, cloud, args.unit_mm, gt)))
        print(_fit_report(res, cloud, args.unit_mm, gt), end="")
    else:
        clouds = [io.read_xyz(c) for c in args.cloud]
        results = fit_multi_leaf(space, model, clouds, cfg, enc, shared=not args.no_share)
        for i, (res, cloud) in enumerate(zip(results, clouds)):
            d = out / f"leaf{i:03d}"
            written.append(io.write_mesh_obj(d / "fitted.obj", res.base, res.vertices))
            written.append(io.atomic_write(d / "latents.txt", _latents_text(res.z_s, res.z_d)))
            written.append(io.atomic_write(d / "report.txt", _fit_report(res, cloud, args.unit_mm)))
        print(f"fitted {len(results)} instances")
    return written, cfg, cfg.seed


def cmd_generate(args, out: Path):
    space, model = _load_shape(args.model), _load_deform(args.deform)
    z_s = sample_latent(space.latents, args.zs_seed)
    z_d = sample_latent(model.latents, args.zd_seed)
    base, verts = generate_mesh(space, model, z_s, z_d, args.resolution)
    io.write_mesh_obj(out, base, verts)
    return [out], None, None


def cmd_interp(args, out: Path):
    space, model = _load_shape(args.model), _load_deform(args.deform)
    if args.steps < 2:
        raise ValidationError("--steps must be at least 2")
    ends = []
    for pid in (args.src, args.dst):
        if pid not in model.pair_ids:
            raise ValidationError(f"unknown pair id {pid!r}")
        i = model.pair_ids.index(pid)
        ends.append((space.latent_of(model.base_ids[i]), model.latents[i]))
    written = []
    for k in range(args.steps):
        t = k / (args.steps - 1)
        z_s = interpolate_latent(ends[0][0], ends[1][0], t)
        z_d = interpolate_latent(ends[0][1], ends[1][1], t)
        base, verts = generate_mesh(space, model, z_s, z_d, args.resolution)
        written.append(io.write_mesh_obj(out / f"step{k:03d}.obj", base, verts))
    return written, None, None


def cmd_eval(args, out):
    gv, gf, _ = io.read_obj(args.gt)
    pv, pf, _ = io.read_obj(args.pred)
    ch = L.chamfer_l2(gv, pv) * args.unit_mm
    nc = L.metric_normal_consistency(gv, gf, pv, pf)
    print("metric            value")
    print(f"chamfer_l2_mm     {ch:.3f}")
    print(f"normal_consist    {nc:.3f}")
    print(f"chamfer_l2_mm={ch:.3f} nc={nc:.3f}")
    return [], None, None


HANDLERS = {"synth": cmd_synth, "train-shape": cmd_train_shape, "train-deform": cmd_train_deform,
            "train-enc": cmd_train_enc, "register": cmd_register, "fit": cmd_fit,
            "fit-multi": cmd_fit, "generate": cmd_generate, "interp": cmd_interp, "eval": cmd_eval}


def _thread_limit():
    value = os.environ.get("NLF_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError as exc:
        raise ValidationError("NLF_THREADS must be a positive integer") from exc
    if n < 1:
        raise ValidationError("NLF_THREADS must be a positive integer")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run_cli(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise ValidationError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "replay":
            return replay(args.manifest)
        started = time.time()
        out = Path(args.out) if getattr(args, "out", None) else None
        with _thread_limit():
            outputs, cfg, seed = HANDLERS[args.command](args, out)
        if out is not None or args.command == "register":
            manifest = RunManifest(args.command, argv, cfg, seed, outputs, started)
            target = _manifest_path(out) if out is not None else Path(args.data) / "register.manifest"
            manifest.write(target)
        return 0
    except NlfError as exc:
        print(f"nlf: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"nlf: error: {exc}", file=sys.stderr)
        return CheckpointError.exit_code
    except SystemExit as exc:   # --help
        return int(exc.code or 0)


def main() -> None:
    sys.exit(run_cli())
