"""Command-line entry point.

Subcommands mirror the pipeline: make-prior (primitive/CSG SDF grids),
optimize (guided field optimization with checkpoints/metrics/snapshots),
render (single view of a checkpoint), extract-mesh (OBJ isosurfaces), and
diffusion (train/sample the embedding-space model).

Exit codes: 0 success, 2 usage/input error, 3 guidance transport failure,
4 numerical failure (NaN loss/gradient or non-finite service response).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
import tempfile

import numpy as np

from . import diffusion as diff
from .field import VoxelField, init_from_prior, init_transparent, load_field, save_field
from .formats import FormatError
from .guidance import (GuidanceProtocolError, GuidanceTransportError,
                       PhotometricGuidance, RemoteGuidance)
from .losses import LossWeights
from .meshing import (DEFAULT_MESH_RESOLUTION, DEFAULT_OPACITY_ISO,
                      field_to_opacity_grid, marching_cubes, write_obj)
from .optim import (AdamState, OptimConfig, OptimizationError,
                    load_checkpoint, optimize, save_checkpoint)
from .rendering import (DEFAULT_CAMERA_RADIUS, DEFAULT_FOV_Y, camera_at,
                        render, settings_for_field, write_png)
from .sdf import (PrimitiveSpec, SdfGrid, centered_lattice, csg_combine,
                  load_sdf, make_primitive_sdf, save_sdf)
from .seeding import stream

ENDPOINT_ENV = "VOXELPRIOR_GUIDANCE_ENDPOINT"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRANSPORT = 3
EXIT_NUMERICAL = 4

SNAPSHOT_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)
SNAPSHOT_ELEVATION = 25.0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GuidanceTransportError as exc:
        _err(f"guidance transport failure: {exc}")
        if getattr(exc, "checkpoint_path", None):
            _err(f"resumable checkpoint written to {exc.checkpoint_path}")
        return EXIT_TRANSPORT
    except GuidanceProtocolError as exc:
        _err(f"numerical failure from guidance service: {exc}")
        return EXIT_NUMERICAL
    except OptimizationError as exc:
        _err(str(exc))
        return EXIT_NUMERICAL
    except (FormatError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        _err(str(exc))
        return EXIT_USAGE


def _err(msg: str) -> None:
    print(f"voxelprior: {msg}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="voxelprior",
        description="Voxel radiance-field optimization with SDF shape priors",
    )
    sub = p.add_subparsers(dest="command", required=True)

    mp = sub.add_parser("make-prior", help="build an SDF grid from primitives or CSG")
    mp.add_argument("--shape", choices=["sphere", "box", "capsule"],
                    help="primitive kind (omit when using --op)")
    mp.add_argument("--radius", type=float, default=0.5)
    mp.add_argument("--center", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    mp.add_argument("--half-extents", type=float, nargs=3,
                    default=(0.5, 0.5, 0.5))
    mp.add_argument("--endpoints", type=float, nargs=6,
                    default=(0.0, 0.0, -0.3, 0.0, 0.0, 0.3),
                    help="capsule segment: x1 y1 z1 x2 y2 z2")
    mp.add_argument("--dims", type=int, default=64,
                    help="voxels per axis (cubic lattice)")
    mp.add_argument("--extent", type=float, default=2.0,
                    help="edge length of the sampled cube, centered at origin")
    mp.add_argument("--op", choices=["union", "intersection", "difference"],
                    help="combine two existing SDFG files instead")
    mp.add_argument("--inputs", nargs=2, metavar=("A", "B"),
                    help="input SDFG files for --op")
    mp.add_argument("--out", required=True)
    mp.set_defaults(func=cmd_make_prior)

    op = sub.add_parser("optimize", help="optimize a field under guidance")
    op.add_argument("--config", help="JSON config file (flags override)")
    op.add_argument("--prior", help="SDFG prior grid")
    op.add_argument("--init", choices=["prior", "transparent"],
                    help="field initialization (default: prior when --prior given)")
    op.add_argument("--dims", type=int, default=32,
                    help="grid resolution when initializing without a prior")
    op.add_argument("--extent", type=float, default=2.0)
    op.add_argument("--guidance", choices=["photometric", "remote"],
                    required=True)
    op.add_argument("--endpoint",
                    default=os.environ.get(ENDPOINT_ENV),
                    help=f"guidance service URL (default ${ENDPOINT_ENV})")
    op.add_argument("--prompt", help="text prompt for remote guidance")
    op.add_argument("--photometric-targets",
                    help="VFLD whose renders become reconstruction targets "
                         "(default: the prior-initialized field)")
    op.add_argument("--photometric-views", type=int, default=8)
    op.add_argument("--steps", type=int)
    op.add_argument("--seed", type=int)
    op.add_argument("--resolution", type=int)
    op.add_argument("--samples-per-ray", type=int)
    op.add_argument("--w-guidance", type=float)
    op.add_argument("--w-transmittance", type=float)
    op.add_argument("--w-prior", type=float)
    op.add_argument("--checkpoint-every", type=int)
    op.add_argument("--snapshot-every", type=int, default=0,
                    help="PNG snapshots every N steps (0 = final only)")
    op.add_argument("--resume", help="checkpoint VFLD to continue from")
    op.add_argument("--out-dir", required=True)
    op.set_defaults(func=cmd_optimize)

    rd = sub.add_parser("render", help="render one view of a checkpoint")
    rd.add_argument("--checkpoint", required=True)
    rd.add_argument("--azimuth", type=float, default=0.0)
    rd.add_argument("--elevation", type=float, default=SNAPSHOT_ELEVATION)
    rd.add_argument("--radius", type=float, default=DEFAULT_CAMERA_RADIUS)
    rd.add_argument("--fov", type=float, default=DEFAULT_FOV_Y)
    rd.add_argument("--width", type=int, default=168)
    rd.add_argument("--height", type=int, default=168)
    rd.add_argument("--samples-per-ray", type=int, default=192)
    rd.add_argument("--background", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    rd.add_argument("--out", required=True)
    rd.set_defaults(func=cmd_render)

    em = sub.add_parser("extract-mesh", help="marching-cubes OBJ export")
    em.add_argument("--input", required=True, help="SDFG or VFLD file")
    em.add_argument("--resolution", type=int, default=DEFAULT_MESH_RESOLUTION,
                    help="opacity resample resolution for VFLD inputs")
    em.add_argument("--iso", type=float,
                    help="iso level (default 0 for SDF, 0.5 for opacity)")
    em.add_argument("--out", required=True)
    em.set_defaults(func=cmd_extract_mesh)

    df = sub.add_parser("diffusion", help="embedding-diffusion train/sample")
    dsub = df.add_subparsers(dest="diffusion_command", required=True)

    dt = dsub.add_parser("train")
    dt.add_argument("--dataset", help="EPRS pair file")
    dt.add_argument("--synthetic", choices=sorted(diff.SYNTHETIC_GENERATORS),
                    help="built-in generator instead of a dataset file")
    dt.add_argument("--n", type=int, default=4096,
                    help="records to draw from a synthetic generator")
    dt.add_argument("--timesteps", type=int, default=diff.DEFAULT_TIMESTEPS)
    dt.add_argument("--steps", type=int, default=2000)
    dt.add_argument("--batch", type=int)
    dt.add_argument("--lr", type=float)
    dt.add_argument("--hidden", type=int, nargs="+", default=(64, 64))
    dt.add_argument("--preset", choices=["reference"],
                    help="full-scale reference hyperparameters "
                         "(batch 1024, lr 1.1e-4, wide layers)")
    dt.add_argument("--predict", choices=["x0", "eps"], default="x0")
    dt.add_argument("--seed", type=int, default=0)
    dt.add_argument("--metrics", help="loss-curve JSON lines file")
    dt.add_argument("--manifest", help="run manifest JSON path")
    dt.add_argument("--out", required=True, help="EDIF checkpoint path")
    dt.set_defaults(func=cmd_diffusion_train)

    ds = dsub.add_parser("sample")
    ds.add_argument("--model", required=True, help="EDIF checkpoint")
    ds.add_argument("--condition", required=True,
                    help="comma-separated condition vector, e.g. '1,0'")
    ds.add_argument("--n", type=int, default=1000)
    ds.add_argument("--seed", type=int, default=0)
    ds.add_argument("--use-ema", action="store_true",
                    help="sample from the EMA shadow weights")
    ds.add_argument("--out", required=True, help="raw f32 LE sample dump")
    ds.set_defaults(func=cmd_diffusion_sample)

    return p


# ---------------------------------------------------------------------------
# make-prior
# ---------------------------------------------------------------------------

def cmd_make_prior(args) -> int:
    if args.op:
        if not args.inputs:
            raise ValueError("--op requires --inputs A B")
        a = load_sdf(args.inputs[0])
        b = load_sdf(args.inputs[1])
        grid = csg_combine(a, b, args.op)
    else:
        if not args.shape:
            raise ValueError("either --shape or --op is required")
        spec = _spec_from_args(args)
        dims = (args.dims,) * 3
        origin, voxel = centered_lattice(dims, extent=args.extent)
        grid = make_primitive_sdf(spec, dims, origin, voxel)
    save_sdf(grid, args.out)
    print(f"wrote {args.out} ({grid.dims[0]}x{grid.dims[1]}x{grid.dims[2]})")
    return EXIT_OK


def _spec_from_args(args) -> PrimitiveSpec:
    if args.shape == "sphere":
        return PrimitiveSpec.sphere(center=args.center, radius=args.radius)
    if args.shape == "box":
        return PrimitiveSpec.box(center=args.center,
                                 half_extents=args.half_extents)
    e = args.endpoints
    return PrimitiveSpec.capsule(a=e[:3], b=e[3:], radius=args.radius)


# ---------------------------------------------------------------------------
# optimize
# ---------------------------------------------------------------------------

def cmd_optimize(args) -> int:
    config = _build_optim_config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    config.checkpoint_dir = args.out_dir

    prior = load_sdf(args.prior) if args.prior else None
    init_kind = args.init or ("prior" if prior is not None else "transparent")
    if init_kind == "prior" and prior is None:
        raise ValueError("--init prior requires --prior")
    if config.weights.w_prior > 0 and prior is None:
        config.weights.w_prior = 0.0

    grid_state = mlp_state = None
    start_step = 0
    if args.resume:
        fld, grid_state, mlp_state, start_step = load_checkpoint(args.resume)
    elif init_kind == "prior":
        fld = init_from_prior(prior)
    else:
        if prior is not None:
            origin, voxel, dims = prior.origin, prior.voxel_size, prior.dims
        else:
            dims = (args.dims,) * 3
            origin, voxel = centered_lattice(dims, extent=args.extent)
        fld = init_transparent(dims, origin, voxel)

    guidance = _build_guidance(args, config, prior)

    metrics_path = os.path.join(args.out_dir, "metrics.jsonl")
    started = _utcnow()
    callbacks = [_metrics_callback(metrics_path, append=bool(args.resume))]
    if args.snapshot_every > 0:
        callbacks.append(_snapshot_callback(args.out_dir, args.snapshot_every,
                                            config))

    if grid_state is None:
        grid_state = AdamState.for_params([fld.density])
        mlp_state = AdamState.for_params(fld.color_mlp.param_arrays())
    optimize(fld, guidance, prior, config, callbacks=callbacks,
             grid_state=grid_state, mlp_state=mlp_state,
             start_step=start_step)
    final_ckpt = save_checkpoint(args.out_dir, fld, grid_state, mlp_state,
                                 config.steps)
    _write_snapshots(fld, config, args.out_dir, config.steps)
    manifest = {
        "command": "optimize",
        "config": config.to_json_dict(),
        "seed": config.seed,
        "guidance": args.guidance,
        "prompt": args.prompt,
        "started_at": started,
        "ended_at": _utcnow(),
        "checkpoints": [final_ckpt],
        "final_metrics": _last_metrics_line(metrics_path),
    }
    _write_json_atomic(os.path.join(args.out_dir, "manifest.json"), manifest)
    print(f"finished {config.steps} steps; checkpoint {final_ckpt}")
    return EXIT_OK


def _build_optim_config(args) -> OptimConfig:
    if args.config:
        with open(args.config) as f:
            config = OptimConfig.from_json_dict(json.load(f))
    else:
        config = OptimConfig()
    if args.steps is not None:
        config.steps = args.steps
    if args.seed is not None:
        config.seed = args.seed
    if args.resolution is not None:
        config.resolution = (args.resolution, args.resolution)
    if args.samples_per_ray is not None:
        config.samples_per_ray = args.samples_per_ray
    if args.checkpoint_every is not None:
        config.checkpoint_every = args.checkpoint_every
    for flag, attr in (("w_guidance", "w_guidance"),
                       ("w_transmittance", "w_transmittance"),
                       ("w_prior", "w_prior")):
        val = getattr(args, flag)
        if val is not None:
            setattr(config.weights, attr, val)
    return config


def _build_guidance(args, config: OptimConfig, prior: SdfGrid | None):
    if args.guidance == "remote":
        if not args.endpoint:
            raise ValueError(
                f"remote guidance needs --endpoint or ${ENDPOINT_ENV}"
            )
        if not args.prompt:
            raise ValueError("remote guidance needs --prompt")
        return RemoteGuidance(endpoint=args.endpoint, prompt=args.prompt)

    if args.photometric_targets:
        target_field = load_field(args.photometric_targets)
    elif prior is not None:
        target_field = init_from_prior(prior)
    else:
        raise ValueError(
            "photometric guidance needs --photometric-targets or --prior "
            "to render targets from"
        )
    views = []
    n = max(1, args.photometric_views)
    lo, hi = config.azimuth_range
    el = 0.5 * (config.elevation_range[0] + config.elevation_range[1])
    for i in range(n):
        az = lo + (i + 0.5) * (hi - lo) / n
        cam = camera_at(az, el, config.camera_radius, fov_y=config.fov_y,
                        resolution=config.resolution)
        settings = settings_for_field(target_field, cam,
                                      samples_per_ray=config.samples_per_ray,
                                      background=config.background)
        views.append((cam, render(target_field, cam, settings).rgb))
    return PhotometricGuidance(views=views)


def _metrics_callback(path: str, append: bool = False):
    mode = "a" if append else "w"
    f = open(path, mode)

    def cb(info):
        line = {"step": info.step}
        line.update(info.breakdown.as_dict())
        f.write(json.dumps(line) + "\n")
        f.flush()

    return cb


def _snapshot_callback(out_dir: str, every: int, config: OptimConfig):
    def cb(info):
        if info.step % every == 0:
            _write_snapshots(info.field, config, out_dir, info.step)

    return cb


def _write_snapshots(fld: VoxelField, config: OptimConfig, out_dir: str,
                     step: int) -> None:
    for az in SNAPSHOT_AZIMUTHS:
        cam = camera_at(az, SNAPSHOT_ELEVATION, config.camera_radius,
                        fov_y=config.fov_y, resolution=config.resolution)
        settings = settings_for_field(fld, cam,
                                      samples_per_ray=config.samples_per_ray,
                                      background=config.background)
        out = render(fld, cam, settings)
        name = f"snapshot_{step:06d}_az{int(az):03d}.png"
        write_png(os.path.join(out_dir, name), out.rgb)


def _last_metrics_line(path: str):
    last = None
    try:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    last = json.loads(line)
    except FileNotFoundError:
        return None
    return last


# ---------------------------------------------------------------------------
# render / extract-mesh
# ---------------------------------------------------------------------------

def cmd_render(args) -> int:
    fld = load_field(args.checkpoint)
    cam = camera_at(args.azimuth, args.elevation, args.radius,
                    fov_y=args.fov, resolution=(args.width, args.height))
    settings = settings_for_field(fld, cam,
                                  samples_per_ray=args.samples_per_ray,
                                  background=tuple(args.background))
    out = render(fld, cam, settings)
    write_png(args.out, out.rgb)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_extract_mesh(args) -> int:
    with open(args.input, "rb") as f:
        magic = f.read(4)
    if magic == b"SDFG":
        grid = load_sdf(args.input)
        iso = args.iso if args.iso is not None else 0.0
    elif magic == b"VFLD":
        fld = load_field(args.input)
        grid = field_to_opacity_grid(fld, (args.resolution,) * 3)
        iso = args.iso if args.iso is not None else DEFAULT_OPACITY_ISO
    else:
        raise FormatError(f"unrecognized input magic {magic!r}")
    mesh = marching_cubes(grid, iso)
    write_obj(args.out, mesh)
    if mesh.is_empty:
        _err(f"warning: iso level {iso} produced an empty mesh")
    else:
        print(f"wrote {args.out} ({len(mesh.vertices)} vertices, "
              f"{len(mesh.triangles)} triangles)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diffusion
# ---------------------------------------------------------------------------

def cmd_diffusion_train(args) -> int:
    if bool(args.dataset) == bool(args.synthetic):
        raise ValueError("exactly one of --dataset / --synthetic is required")
    if args.dataset:
        conditions, targets = diff.load_pairs(args.dataset)
    else:
        gen = diff.SYNTHETIC_GENERATORS[args.synthetic]
        conditions, targets = gen(stream(args.seed, "dataset"), args.n)

    if args.preset == "reference":
        config = diff.DiffusionTrainConfig.reference_preset(steps=args.steps,
                                                            seed=args.seed)
        hidden = (512, 512)
    else:
        config = diff.DiffusionTrainConfig(steps=args.steps, seed=args.seed)
        hidden = tuple(args.hidden)
    if args.batch is not None:
        config.batch_size = args.batch
    if args.lr is not None:
        config.lr = args.lr

    schedule = diff.cosine_schedule(args.timesteps)
    denoiser = diff.make_denoiser(targets.shape[1], conditions.shape[1],
                                  hidden=hidden, seed=args.seed,
                                  predict=args.predict)

    metrics_f = open(args.metrics, "w") if args.metrics else None

    def cb(step, loss):
        if metrics_f is not None:
            metrics_f.write(json.dumps({"step": step, "loss": loss}) + "\n")

    started = _utcnow()
    denoiser, ema, losses = diff.train_denoiser(conditions, targets, denoiser,
                                                schedule, config,
                                                callbacks=[cb])
    if metrics_f is not None:
        metrics_f.close()
    diff.save_denoiser(args.out, denoiser, schedule, ema)
    manifest = {
        "command": "diffusion train",
        "preset": args.preset,
        "timesteps": schedule.T,
        "lr": config.lr,
        "weight_decay": config.weight_decay,
        "grad_clip": config.grad_clip,
        "batch_size": config.batch_size,
        "ema_beta": config.ema_beta,
        "ema_every": config.ema_every,
        "steps": config.steps,
        "seed": config.seed,
        "hidden": list(hidden),
        "predict": args.predict,
        "started_at": started,
        "ended_at": _utcnow(),
        "final_loss": losses[-1] if losses else None,
    }
    manifest_path = args.manifest or (os.path.splitext(args.out)[0]
                                      + ".manifest.json")
    _write_json_atomic(manifest_path, manifest)
    print(f"wrote {args.out} (final loss "
          f"{losses[-1]:.6f})" if losses else f"wrote {args.out}")
    return EXIT_OK


def cmd_diffusion_sample(args) -> int:
    denoiser, schedule, ema = diff.load_denoiser(args.model)
    if args.use_ema:
        if ema is None:
            raise ValueError("checkpoint has no EMA shadow weights")
        denoiser = diff.denoiser_with_ema(denoiser, ema)
    condition = np.array([float(x) for x in args.condition.split(",")])
    if condition.shape != (denoiser.d_c,):
        raise ValueError(
            f"condition must have {denoiser.d_c} entries, got {condition.shape[0]}"
        )
    conds = np.broadcast_to(condition, (args.n, denoiser.d_c))
    samples = diff.sample(conds, denoiser, schedule,
                          stream(args.seed, "cli_sample"))
    with open(args.out, "wb") as f:
        f.write(np.ascontiguousarray(samples, dtype="<f4").tobytes())
    summary = {
        "n": int(args.n),
        "d": int(denoiser.d),
        "mean": [float(x) for x in samples.mean(axis=0)],
        "std": [float(x) for x in samples.std(axis=0)],
    }
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# small utilities
# ---------------------------------------------------------------------------

def _utcnow() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _write_json_atomic(path: str, obj) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(obj, f, indent=2)
            f.write("\n")
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


if __name__ == "__main__":
    sys.exit(main())
