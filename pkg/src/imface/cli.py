"""``imface`` command-line entry point.

Exit codes: 0 success, 2 usage error, 3 IO, 4 config, 5 numeric, 6 data.
"""

from __future__ import annotations

import os

# IMFACE_THREADS caps BLAS worker threads; it must be applied before numpy loads
_THREADS = os.environ.get("IMFACE_THREADS")
if _THREADS and _THREADS.isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402

log = logging.getLogger("imface")

EXIT_CODES = {"IO": 3, "config": 4, "numeric": 5, "data": 6}


class CLIError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# -- config ------------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _override_keys():
    from .losses import LossWeights
    from .model import ModelConfig
    from .training import TrainConfig
    keys = {f.name for f in fields(TrainConfig) if f.name != "weights"}
    keys |= {f"model.{f.name}" for f in fields(ModelConfig)}
    keys |= {f"weights.{f.name}" for f in fields(LossWeights)}
    return keys


def split_overrides(parser: argparse.ArgumentParser, extra: list[str]) -> dict:
    """``--key=value`` tokens into a dict; anything else is an unknown flag (exit 2)."""
    known = _override_keys()
    out = {}
    for tok in extra:
        if not tok.startswith("--") or "=" not in tok:
            parser.error(f"unrecognized arguments: {tok}")
        key, value = tok[2:].split("=", 1)
        key = key.replace("-", "_")
        if key not in known:
            parser.error(f"unrecognized arguments: {tok}")
        out[key] = _parse_value(value)
    return out


def resolve_config(path: str | None, overrides: dict, seed: int | None, k: int | None = None,
                   base_train: dict | None = None):
    """Defaults (or ``base_train``), then the JSON file, then ``--key=value`` overrides, then ``--seed``."""
    from .losses import LossWeights
    from .model import ModelConfig
    from .training import TrainConfig
    data = {"train": dict(base_train or {}), "model": {}}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CLIError("config", f"config file not found: {path}")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CLIError("config", f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict) or set(loaded) - {"train", "model"}:
            raise CLIError("config", f"{path}: expected an object with 'train' and/or 'model' sections")
        data["train"].update(loaded.get("train", {}))
        data["model"].update(loaded.get("model", {}))
    train, model = dict(data["train"]), dict(data["model"])
    weights = dict(train.pop("weights", {}) or {})
    for key, value in overrides.items():
        if key.startswith("model."):
            model[key[6:]] = value
        elif key.startswith("weights."):
            weights[key[8:]] = value
        else:
            train[key] = value
    if seed is not None:
        train["seed"] = seed
    if k is not None:
        model.setdefault("k", k)
    try:
        w = LossWeights(**{**LossWeights().to_dict(), **weights})
        tc = TrainConfig.from_dict({**train, "weights": w})
        mc = ModelConfig.from_dict({**asdict(ModelConfig()), **model})
    except (TypeError, ValueError) as exc:
        raise CLIError("config", str(exc)) from exc
    return tc, mc


def write_snapshot(path: Path, command: str, **entries) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, "version": __version__, **entries}
    path.write_text(json.dumps(snap, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(type(o).__name__)


def _dump(path, data) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default))


def _options(args) -> dict:
    skip = {"fn", "parser", "accepts_overrides", "command", "verbose", "quiet"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _sidecar(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".config.json")


# -- shared loaders ---------------------------------------------------------------------------

def _load_checkpoint(path):
    from .training import load_checkpoint
    if not Path(path).is_file():
        raise CLIError("IO", f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _load_codes(spec: str, ck=None):
    """Codes from a JSON file, ``mean`` (training mean) or ``scan:<identity>/<expression>``."""
    from .model import LatentCodes
    if spec == "mean" or spec.startswith("scan:"):
        if ck is None or ck.table is None:
            raise CLIError("data", f"'{spec}' needs a checkpoint with an embedding table")
        if spec == "mean":
            return ck.table.mean_codes()
        name = spec[5:]
        if name not in ck.table.scan_names:
            raise CLIError("data", f"no training scan named {name!r}")
        return ck.table.codes(ck.table.scan_names.index(name))
    p = Path(spec)
    if not p.is_file():
        raise CLIError("IO", f"codes file not found: {spec}")
    try:
        d = json.loads(p.read_text())
        return LatentCodes.from_dict(d.get("codes", d))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CLIError("data", f"{spec}: not a codes file ({exc})") from exc


def _load_records(data_dir):
    from .geomprep import read_scan_record
    from .synthdata import load_dataset
    d = Path(data_dir)
    if not d.is_dir():
        raise CLIError("IO", f"data directory not found: {data_dir}")
    if (d / "meta" / "dataset.json").exists():
        return load_dataset(d)[0]
    files = sorted(d.glob("*.imfscan"))
    if not files:
        raise CLIError("data", f"no .imfscan files in {data_dir}")
    return [read_scan_record(f) for f in files]


def _load_points(path):
    from .geomprep import read_obj
    p = Path(path)
    if not p.is_file():
        raise CLIError("IO", f"file not found: {path}")
    if p.suffix == ".npy":
        return np.load(p).reshape(-1, 3)
    return read_obj(p).vertices


def _read_mesh(path):
    from .geomprep import read_obj
    if not Path(path).is_file():
        raise CLIError("IO", f"mesh not found: {path}")
    return read_obj(path)


def _reconstruct(ck, codes, resolution: int, band: int, base_only: bool):
    from .reconeval import VoxelGrid, marching_cubes
    f = ck.model.base_sdf if base_only else ck.model.full_sdf
    return marching_cubes(f, codes, VoxelGrid(resolution), band=band or None)


# -- subcommands -------------------------------------------------------------------------------

def cmd_synth(args, extra):
    from .synthdata import generate_dataset, write_dataset
    ds = generate_dataset(args.identities, args.expressions, seed=args.seed, grid_res=args.grid_res,
                          n_near=args.n_near, n_uniform=args.n_uniform, detail=not args.no_detail,
                          first_identity=args.first_identity)
    files = write_dataset(ds, args.out_dir)
    write_snapshot(Path(args.out_dir) / "meta" / "resolved_config.json", "synth", **ds.config)
    print(f"wrote {len(files)} files to {args.out_dir}")


def cmd_preprocess(args, extra):
    from .geomprep import (ScanRecord, load_mesh, preprocess, sample_training_points, write_obj,
                           write_scan_record)
    if not Path(args.mesh).is_file():
        raise CLIError("IO", f"mesh not found: {args.mesh}")
    if args.landmarks is None:
        raise CLIError("data", "landmark indices are required (--landmarks)")
    mesh = load_mesh(args.mesh, args.landmarks)
    out = preprocess(mesh, align=args.align, radius=args.radius_mm)
    if out.landmark_indices is None:
        raise CLIError("data", f"landmarks of {args.mesh} fall outside the {args.radius_mm} mm crop sphere")
    trip = sample_training_points(out, args.n_near, args.n_uniform, args.near_sigma_mm,
                                  np.random.default_rng(args.seed), radius=args.radius_mm)
    ident = args.identity or Path(args.mesh).stem
    rec = ScanRecord(ident, args.expression, args.neutral, out.vertices[out.landmark_indices], trip)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_scan_record(args.out, rec)
    if args.mesh_out:
        write_obj(args.mesh_out, out)
    write_snapshot(_sidecar(args.out), "preprocess", **_options(args))
    print(f"{args.out}: {len(trip)} samples, {out.n_faces} faces")


def cmd_train(args, extra):
    from .training import train_stage1, train_stage2
    overrides = split_overrides(args.parser, extra)
    resolve_config(args.config, overrides, args.seed)  # config problems are reported before data loading
    if args.data is None or args.out_dir is None:
        raise CLIError("config", "train needs --data and --out-dir")
    records = _load_records(args.data)
    tc, mc = resolve_config(args.config, overrides, args.seed, k=records[0].k)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(out / "resolved_config.json", "train", seed=args.seed, stage=args.stage, data=args.data,
                   train=tc.to_dict(), model=asdict(mc))
    resume = _load_checkpoint(args.resume) if args.resume else None
    s1 = None
    if args.stage in ("1", "both"):
        r1 = resume if resume is not None and resume.stage == 1 else None
        s1 = train_stage1(records, tc, mc, out_dir=out, log_path=out / "stage1.csv", resume=r1)
        print(f"stage 1: {len(s1.history)} steps, final loss {s1.history[-1]['total']:.6g}"
              if s1.history else "stage 1: nothing to do")
    if args.stage in ("2", "both"):
        r2 = resume if resume is not None and resume.stage == 2 else None
        if s1 is None and r2 is None:
            if not args.init:
                raise CLIError("config", "--stage 2 needs --init <stage-1 checkpoint> or --resume")
            s1 = _load_checkpoint(args.init)
        s2 = train_stage2(records, s1, tc, out_dir=out, log_path=out / "stage2.csv", resume=r2)
        print(f"stage 2: {len(s2.history)} steps")


def cmd_fit(args, extra):
    from .geomprep import read_scan_record
    overrides = split_overrides(args.parser, extra)
    ck = _load_checkpoint(args.checkpoint)
    if not Path(args.scan).is_file():
        raise CLIError("IO", f"scan not found: {args.scan}")
    rec = read_scan_record(args.scan)
    from .training import fit_latents
    tc, _ = resolve_config(args.config, overrides, args.seed, base_train=ck.config.to_dict())
    init = ck.table.mean_codes() if ck.table is not None else None
    res = fit_latents(rec.triplets, ck.model, tc, init, detail=not args.base_only, seed=args.seed)
    if res.diverged:
        from .diffcore import NumericError
        raise NumericError("latent fit diverged twice (from the mean codes and from zero codes)")
    _dump(args.out, {"codes": res.codes.to_dict(), "losses": res.losses, "restarted": res.restarted,
                     "scan": args.scan})
    write_snapshot(_sidecar(args.out), "fit", seed=args.seed, checkpoint=args.checkpoint, scan=args.scan,
                   base_only=args.base_only, train=tc.to_dict())
    print(f"{args.out}: loss {res.losses[0]:.6g} -> {res.losses[-1]:.6g}")


def cmd_reconstruct(args, extra):
    from .geomprep import write_obj
    from .reconeval import crop_to_footprint
    ck = _load_checkpoint(args.checkpoint)
    codes = _load_codes(args.codes, ck)
    mesh = _reconstruct(ck, codes, args.resolution, args.band, args.base_only)
    if args.crop_to:
        mesh = crop_to_footprint(mesh, _read_mesh(args.crop_to))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_obj(args.out, mesh)
    write_snapshot(_sidecar(args.out), "reconstruct", **_options(args))
    print(f"{args.out}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")


def cmd_metrics(args, extra):
    from .reconeval import crop_to_footprint, evaluate_meshes
    pred, gt = _read_mesh(args.pred), _read_mesh(args.gt)
    if args.crop:
        pred = crop_to_footprint(pred, gt)
    rep = evaluate_meshes(pred, gt, args.tau_mm, args.samples, args.seed, args.abs_normals)
    print(rep.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(rep.to_json())
        write_snapshot(_sidecar(args.out), "metrics", **_options(args))


def cmd_correspond(args, extra):
    from .reconeval import correspondence_map
    ck = _load_checkpoint(args.checkpoint)
    ca, cb = _load_codes(args.codes_a, ck), _load_codes(args.codes_b, ck)
    pa = _load_points(args.points_a)
    target = _read_mesh(args.target_b) if Path(args.target_b).suffix == ".obj" else _load_points(args.target_b)
    cor = correspondence_map(pa, target, ca, cb, ck.model, args.samples, args.seed)
    _dump(args.out, {**cor.to_dict(), "mean_distance": float(cor.distance.mean())})
    write_snapshot(_sidecar(args.out), "correspond", **_options(args))
    print(f"{args.out}: {len(cor)} pairs, mean template distance {cor.distance.mean():.4f} mm")


def cmd_interp(args, extra):
    from .geomprep import write_obj
    from .reconeval import interpolate_codes
    ck = _load_checkpoint(args.checkpoint)
    ca, cb = _load_codes(args.codes_a, ck), _load_codes(args.codes_b, ck)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.steps < 2:
        raise CLIError("config", "--steps must be at least 2")
    rows = []
    for i, t in enumerate(np.linspace(0.0, 1.0, args.steps)):
        c = interpolate_codes(ca, cb, float(t), args.subset)
        row = {"t": float(t), "codes": c.to_dict()}
        if args.resolution:
            mesh = _reconstruct(ck, c, args.resolution, args.band, args.base_only)
            write_obj(out / f"interp_{i:03d}.obj", mesh)
            row["mesh"] = f"interp_{i:03d}.obj"
        rows.append(row)
    _dump(out / "interp.json", rows)
    write_snapshot(out / "resolved_config.json", "interp", **_options(args))
    print(f"{out}: {len(rows)} interpolation steps")


def cmd_edit(args, extra):
    from .geomprep import write_obj
    from .reconeval import swap_codes
    ck = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    c = swap_codes(_load_codes(args.codes_a, ck), _load_codes(args.codes_b, ck), args.swap)
    _dump(args.out, {"codes": c.to_dict(), "swapped": args.swap})
    if args.mesh:
        if ck is None:
            raise CLIError("config", "--mesh needs --checkpoint")
        write_obj(args.mesh, _reconstruct(ck, c, args.resolution, args.band, args.base_only))
    write_snapshot(_sidecar(args.out), "edit", **_options(args))
    print(f"{args.out}: {args.swap} codes taken from {args.codes_b}")


def cmd_pca(args, extra):
    from .reconeval import pca_embeddings
    ck = _load_checkpoint(args.checkpoint)
    if ck.table is None:
        raise CLIError("data", "checkpoint has no embedding table")
    x = {"exp": ck.table.z_exp, "id": ck.table.z_id, "detail": ck.table.z_detail}[args.embedding].value
    res = pca_embeddings(x, args.components)
    _dump(args.out, {"embedding": args.embedding, "mean": res.mean, "components": res.components,
                     "singular_values": res.singular_values,
                     "explained_variance": res.explained_variance})
    write_snapshot(_sidecar(args.out), "pca", **_options(args))
    print(f"{args.out}: {len(res.singular_values)} components of {args.embedding} embeddings")


# -- parser -------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")
    p = argparse.ArgumentParser(prog="imface", parents=[common],
                                description="Implicit 3D morphable face model toolkit.")
    p.add_argument("--version", action="version", version=f"imface {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, overrides=False):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn, accepts_overrides=overrides, parser=sp)
        return sp

    s = add("synth", cmd_synth, "generate the synthetic face dataset")
    s.add_argument("--identities", type=int, default=20)
    s.add_argument("--expressions", type=int, default=4)
    s.add_argument("--grid-res", type=int, default=128)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n-near", type=int, default=4000)
    s.add_argument("--n-uniform", type=int, default=4000)
    s.add_argument("--first-identity", type=int, default=0)
    s.add_argument("--no-detail", action="store_true")

    s = add("preprocess", cmd_preprocess, "align, clean and sample one scan into a ScanRecord")
    s.add_argument("--mesh", required=True)
    s.add_argument("--landmarks", help="landmark vertex indices, one per line")
    s.add_argument("--out", required=True)
    s.add_argument("--mesh-out")
    s.add_argument("--identity")
    s.add_argument("--expression", default="exp")
    s.add_argument("--neutral", action="store_true")
    s.add_argument("--align", choices=("rigid", "similarity", "none"), default="rigid")
    s.add_argument("--radius-mm", type=float, default=100.0)
    s.add_argument("--near-sigma-mm", type=float, default=10.0)
    s.add_argument("--n-near", type=int, default=4000)
    s.add_argument("--n-uniform", type=int, default=4000)
    s.add_argument("--seed", type=int, default=0)

    s = add("train", cmd_train, "two-stage auto-decoder training (--key=value overrides)", overrides=True)
    s.add_argument("--data", help="dataset directory (required)")
    s.add_argument("--out-dir", help="run directory (required)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--config")
    s.add_argument("--stage", choices=("1", "2", "both"), default="both")
    s.add_argument("--resume")
    s.add_argument("--init", help="stage-1 checkpoint to start stage 2 from")

    s = add("fit", cmd_fit, "fit latent codes of one scan (--key=value overrides)", overrides=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scan", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--base-only", action="store_true")

    s = add("reconstruct", cmd_reconstruct, "extract a mesh with marching cubes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--codes", required=True, help="codes JSON, 'mean' or 'scan:<identity>/<expression>'")
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--band", type=int, default=4, help="coarse stride of the narrow-band evaluation (0: off)")
    s.add_argument("--base-only", action="store_true")
    s.add_argument("--crop-to", help="crop to the x-y footprint of this mesh")
    s.add_argument("--out", required=True)

    s = add("metrics", cmd_metrics, "Chamfer, F-score and normal consistency")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--tau-mm", type=float, default=1.0)
    s.add_argument("--abs-normals", action="store_true")
    s.add_argument("--samples", type=int, default=50_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--crop", action="store_true", help="crop the prediction to the ground-truth footprint")
    s.add_argument("--out")

    s = add("correspond", cmd_correspond, "dense correspondence through template space")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--codes-a", required=True)
    s.add_argument("--codes-b", required=True)
    s.add_argument("--points-a", required=True, help="OBJ (vertices) or .npy points of scan A")
    s.add_argument("--target-b", required=True, help="OBJ mesh (sampled) or .npy points of scan B")
    s.add_argument("--samples", type=int, default=20_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    for name, fn, help_ in (("interp", cmd_interp, "interpolate between two code sets"),
                            ("edit", cmd_edit, "swap expression, identity or detail codes")):
        s = add(name, fn, help_)
        s.add_argument("--codes-a", required=True)
        s.add_argument("--codes-b", required=True)
        s.add_argument("--resolution", type=int, default=64 if name == "edit" else 0)
        s.add_argument("--band", type=int, default=4)
        s.add_argument("--base-only", action="store_true")
        if name == "interp":
            s.add_argument("--checkpoint", required=True)
            s.add_argument("--steps", type=int, default=5)
            s.add_argument("--subset", choices=("all", "exp", "id", "detail"), default="all")
            s.add_argument("--out-dir", required=True)
        else:
            s.add_argument("--checkpoint")
            s.add_argument("--swap", choices=("exp", "id", "detail"), required=True)
            s.add_argument("--out", required=True)
            s.add_argument("--mesh")

    s = add("pca", cmd_pca, "principal components of learned embeddings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--embedding", choices=("exp", "id", "detail"), default="exp")
    s.add_argument("--components", type=int)
    s.add_argument("--out", required=True)
    return p


def _category(exc: BaseException) -> str:
    from .diffcore import NumericError
    if isinstance(exc, CLIError):
        return exc.category
    if isinstance(exc, NumericError):
        return "numeric"
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return "IO"
    if isinstance(exc, (ValueError, KeyError)):
        return "data"
    if isinstance(exc, OSError):
        return "IO"
    return "data"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and not args.accepts_overrides:
        args.parser.error(f"unrecognized arguments: {' '.join(extra)}")
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if _THREADS is not None and not (_THREADS.isdigit() and int(_THREADS) > 0):
        print(f"imface: error [config]: IMFACE_THREADS must be a positive integer, got {_THREADS!r}",
              file=sys.stderr)
        return EXIT_CODES["config"]
    try:
        args.fn(args, extra)
    except Exception as exc:  # every failure is reported with its category
        cat = _category(exc)
        print(f"imface: error [{cat}]: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
