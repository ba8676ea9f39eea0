"""Command-line surface: simulate | reconstruct | fbp | evaluate.

Desk-scale defaults (N=128, 60 sparse / 360 dense views, 2000 epochs) keep a
full experiment in the minutes range; ``--paper-scale`` switches to the
256 / 90 / 720 / 5000 settings.  Flags override an optional key=value config
file.  Exit codes: 0 success, 1 usage, 2 numerical failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import formats
from .analytic import FilterSpec, fbp_reconstruct
from .field import FieldConfig, FourierConfig, HashGridConfig
from .geometry import PoseSet
from .metrics import pose_report, psnr, ssim
from .phantom import load_phantom_table, preset, rasterize
from .projector import (
    DetectorGeometry,
    ImageGrid,
    Sinogram,
    forward_project_image,
    simulate_motion_sinogram,
)
from .trainer import TrainConfig, TrainDivergedError, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

THREADS_ENV = "NFCT_NUM_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _apply_thread_limit():
    val = os.environ.get(THREADS_ENV)
    if not val:
        return
    n = int(val)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass
    try:
        import numba

        numba.set_num_threads(max(1, n))
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _load_config_file(path):
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            entries[key.strip().replace("-", "_")] = value.strip()
    return entries


def _merge_config(args, parser_defaults):
    """Apply config-file values for options the command line left at default."""
    if not getattr(args, "config", None):
        return args
    entries = _load_config_file(args.config)
    for key, value in entries.items():
        if not hasattr(args, key):
            raise UsageError(f"unknown config key {key!r}")
        if getattr(args, key) == parser_defaults.get(key):
            current = parser_defaults.get(key)
            if isinstance(current, bool):
                value = value.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            setattr(args, key, value)
    return args


def _scale_defaults(args):
    """Fill size-dependent values, honoring --paper-scale."""
    if getattr(args, "paper_scale", False):
        args.size = args.size or 256
        args.views = args.views or 90
        args.dense_views = args.dense_views or 720
        if hasattr(args, "epochs"):
            args.epochs = args.epochs or 5000
    else:
        args.size = args.size or 128
        args.views = args.views or 60
        args.dense_views = args.dense_views or 360
        if hasattr(args, "epochs"):
            args.epochs = args.epochs or 2000
    return args


def _geometry(args, n_bins) -> DetectorGeometry:
    n_samples = getattr(args, "samples_per_ray", 0) or 2 * n_bins
    return DetectorGeometry.default(n_bins, n_samples=n_samples)


def _load_object_image(args) -> ImageGrid:
    if args.image:
        return formats.load_image(args.image)
    if args.phantom_file:
        ph = load_phantom_table(args.phantom_file)
    else:
        ph = preset(args.phantom)
    return rasterize(ph, args.size, supersample=args.supersample)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    """Write the full simulation bundle for one motion level."""
    out = args.out
    os.makedirs(out, exist_ok=True)
    image = _load_object_image(args)
    n = image.size
    geom = _geometry(args, n)
    k_rot = args.motion_rot if args.motion_rot is not None else args.motion_level
    k_trans = args.motion_trans if args.motion_trans is not None else args.motion_level

    sino, true_poses, init_poses = simulate_motion_sinogram(
        image, args.views, args.motion_level, args.seed,
        geom=geom, k_rot=k_rot, k_trans=k_trans,
    )
    dense_poses = PoseSet.initial(
        np.arange(args.dense_views) * (np.pi / args.dense_views)
    )
    dense_rows = np.stack(
        [forward_project_image(image, p, geom) for p in dense_poses]
    )
    dense = Sinogram(dense_rows, dense_poses.nominal_angles, geom)
    fbp_gt = fbp_reconstruct(dense)

    formats.save_image(os.path.join(out, "phantom.bin"), image)
    formats.write_pgm(os.path.join(out, "phantom.pgm"), image)
    formats.save_sinogram(os.path.join(out, "sino_sparse.bin"), sino)
    formats.save_sinogram(os.path.join(out, "sino_dense.bin"), dense)
    formats.save_image(os.path.join(out, "fbp_gt.bin"), fbp_gt)
    formats.write_pgm(os.path.join(out, "fbp_gt.pgm"), fbp_gt)
    formats.save_pose_csv(os.path.join(out, "poses_true.csv"), true_poses)
    formats.save_pose_csv(os.path.join(out, "poses_initial.csv"), init_poses)
    formats.save_report(
        os.path.join(out, "simulate.txt"),
        {
            "kind": "simulate",
            "size": n,
            "views": args.views,
            "dense_views": args.dense_views,
            "motion_level": args.motion_level,
            "motion_rot": k_rot,
            "motion_trans": k_trans,
            "seed": args.seed,
            "phantom": args.image or args.phantom_file or args.phantom,
        },
    )
    print(f"simulate: wrote {out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    hidden_width = args.hidden_width
    field_cfg = FieldConfig(
        encoder=args.encoder,
        hash_grid=HashGridConfig(),
        fourier=FourierConfig(seed=args.seed),
        hidden_width=hidden_width,
        n_hidden=2,
        hidden_activation="relu",
        output_activation="sigmoid",
    )
    return TrainConfig(
        epochs=args.epochs,
        lr_field=args.lr_field,
        lr_pose=args.lr_pose,
        pose_correction_enabled=args.pose_correction,
        encoder=args.encoder,
        seed=args.seed,
        field=field_cfg,
        compute_dtype=args.dtype,
        rays_per_batch=args.rays_per_batch,
    )


def cmd_reconstruct(args) -> int:
    """Run the joint reconstruction on a simulated run directory."""
    run = args.run
    out = args.out or os.path.join(run, args.name)
    os.makedirs(out, exist_ok=True)
    sino = formats.load_sinogram(os.path.join(run, "sino_sparse.bin"))
    init_poses = formats.load_pose_csv(os.path.join(run, "poses_initial.csv"))
    config = _train_config(args)

    report = train(config, sino, init_poses)

    formats.save_image(os.path.join(out, "recon.bin"), report.image)
    formats.write_pgm(os.path.join(out, "recon.pgm"), report.image)
    formats.save_pose_csv(os.path.join(out, "poses_optimized.csv"), report.poses)
    formats.save_loss_csv(
        os.path.join(out, "loss.csv"), report.loss_history, report.lr_history
    )
    formats.save_checkpoint(
        os.path.join(out, "checkpoint.bin"), report.params, config.field_config()
    )

    entries = {
        "kind": "reconstruct",
        "method": f"{args.encoder}{'' if args.pose_correction else '-frozen'}",
        "encoder": args.encoder,
        "pose_correction": args.pose_correction,
        "epochs": config.epochs,
        "seed": config.seed,
        "final_loss": repr(float(report.loss_history[-1])),
        "wall_seconds": f"{report.wall_seconds:.2f}",
    }
    sim_meta = formats.load_report(os.path.join(run, "simulate.txt"))
    entries["motion_level"] = sim_meta.get("motion_level", "")

    phantom_path = os.path.join(run, "phantom.bin")
    if os.path.exists(phantom_path):
        reference = formats.load_image(phantom_path)
        entries["psnr"] = f"{psnr(report.image, reference):.4f}"
        entries["ssim"] = f"{ssim(report.image, reference):.6f}"
    true_path = os.path.join(run, "poses_true.csv")
    if os.path.exists(true_path) and args.pose_correction:
        true_poses = formats.load_pose_csv(true_path)
        summary, rows = pose_report(init_poses, true_poses, report.poses, sino.detector.n_bins)
        entries.update({k: f"{v:.6f}" for k, v in summary.items()})
        formats.save_pose_track_csv(os.path.join(out, "pose_tracks.csv"), rows)
    formats.save_report(os.path.join(out, "report.txt"), entries)
    print(f"reconstruct: wrote {out}")
    return EXIT_OK


def cmd_fbp(args) -> int:
    """FBP a named sinogram; metrics against a reference when available."""
    out = args.out
    os.makedirs(out, exist_ok=True)
    sino = formats.load_sinogram(args.sinogram)
    spec = FilterSpec(args.filter)
    image = fbp_reconstruct(sino, spec, out_size=args.size or sino.detector.n_bins)
    formats.save_image(os.path.join(out, "fbp.bin"), image)
    formats.write_pgm(os.path.join(out, "fbp.pgm"), image)
    entries = {
        "kind": "fbp",
        "method": "fbp",
        "filter": args.filter,
        "views": sino.n_views,
        "sinogram": args.sinogram,
    }
    run = os.path.dirname(os.path.abspath(args.sinogram))
    ref_path = args.reference or os.path.join(run, "phantom.bin")
    if os.path.exists(ref_path):
        reference = formats.load_image(ref_path)
        if reference.size == image.size:
            entries["psnr"] = f"{psnr(image, reference):.4f}"
            entries["ssim"] = f"{ssim(image, reference):.6f}"
    sim_meta_path = os.path.join(run, "simulate.txt")
    if os.path.exists(sim_meta_path):
        entries["motion_level"] = formats.load_report(sim_meta_path).get("motion_level", "")
    formats.save_report(os.path.join(out, "report.txt"), entries)
    print(f"fbp: wrote {out}")
    return EXIT_OK


EVAL_COLUMNS = (
    "run", "method", "k", "psnr", "ssim",
    "pose_angle_mae", "pose_trans_mae",
    "pose_angle_mae_initial", "pose_trans_mae_initial",
)


def cmd_evaluate(args) -> int:
    """Aggregate run reports into one CSV: a row per (method, k) plus means."""
    rows = []
    for run_dir in args.runs:
        report_path = os.path.join(run_dir, "report.txt")
        if not os.path.exists(report_path):
            raise FileNotFoundError(f"no report.txt in {run_dir}")
        rep = formats.load_report(report_path)
        if "psnr" not in rep:
            raise ValueError(f"{report_path} has no metrics (missing reference image?)")
        rows.append(
            {
                "run": os.path.basename(os.path.normpath(run_dir)),
                "method": rep.get("method", "unknown"),
                "k": rep.get("motion_level", ""),
                "psnr": rep["psnr"],
                "ssim": rep["ssim"],
                "pose_angle_mae": rep.get("pose_angle_mae", ""),
                "pose_trans_mae": rep.get("pose_trans_mae", ""),
                "pose_angle_mae_initial": rep.get("pose_angle_mae_initial", ""),
                "pose_trans_mae_initial": rep.get("pose_trans_mae_initial", ""),
            }
        )
    rows.sort(key=lambda r: (r["method"], r["k"]))
    by_method: dict[str, list[dict]] = {}
    for row in rows:
        by_method.setdefault(row["method"], []).append(row)
    out_rows = []
    for method, method_rows in by_method.items():
        out_rows.extend(method_rows)
        mean_row = {
            "run": "mean",
            "method": method,
            "k": "mean",
            "psnr": f"{np.mean([float(r['psnr']) for r in method_rows]):.4f}",
            "ssim": f"{np.mean([float(r['ssim']) for r in method_rows]):.6f}",
            "pose_angle_mae": "",
            "pose_trans_mae": "",
            "pose_angle_mae_initial": "",
            "pose_trans_mae_initial": "",
        }
        out_rows.append(mean_row)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        writer.writerows(out_rows)
    print(f"evaluate: wrote {args.out} ({len(out_rows)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="nfct", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file; flags override")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--paper-scale", action="store_true",
                       help="use the full-scale settings (256/90/720/5000)")

    p_sim = sub.add_parser("simulate", help="simulate a motion-corrupted scan")
    add_common(p_sim)
    p_sim.add_argument("--phantom", default="shepp-logan",
                       help="preset name: disk | two-disks | shepp-logan")
    p_sim.add_argument("--phantom-file", help="custom ellipse table (overrides --phantom)")
    p_sim.add_argument("--image", help="object image in the shared binary format")
    p_sim.add_argument("--size", type=int, default=0, help="image size N (0: scale default)")
    p_sim.add_argument("--supersample", type=int, default=4,
                       help="rasterization subsamples per axis")
    p_sim.add_argument("--views", type=int, default=0, help="sparse view count M")
    p_sim.add_argument("--dense-views", type=int, default=0)
    p_sim.add_argument("--motion-level", type=float, default=0.0,
                       help="k: degrees and pixels of U(-k, k) rigid motion")
    p_sim.add_argument("--motion-rot", type=float, default=None,
                       help="override rotation range (degrees)")
    p_sim.add_argument("--motion-trans", type=float, default=None,
                       help="override translation range (pixels)")
    p_sim.add_argument("--samples-per-ray", type=int, default=0,
                       help="quadrature samples per ray (0: 2N default)")
    p_sim.add_argument("--out", required=True)

    p_rec = sub.add_parser("reconstruct", help="joint pose + field reconstruction")
    add_common(p_rec)
    p_rec.add_argument("--run", required=True, help="directory written by simulate")
    p_rec.add_argument("--out", help="output directory (default: <run>/<name>)")
    p_rec.add_argument("--name", default="recon", help="subdirectory name under the run")
    p_rec.add_argument("--encoder", choices=("hash", "fourier", "identity"), default="hash")
    p_rec.add_argument("--pose-correction", dest="pose_correction",
                       action="store_true", default=True)
    p_rec.add_argument("--no-pose-correction", dest="pose_correction", action="store_false")
    p_rec.add_argument("--epochs", type=int, default=0, help="0: scale default")
    p_rec.add_argument("--lr-field", type=float, default=1e-3)
    p_rec.add_argument("--lr-pose", type=float, default=1e-2)
    p_rec.add_argument("--hidden-width", type=int, default=32)
    p_rec.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p_rec.add_argument("--rays-per-batch", type=int, default=None)
    p_rec.add_argument("--size", type=int, default=0, help="unused; kept for config files")
    p_rec.add_argument("--views", type=int, default=0, help="unused; kept for config files")
    p_rec.add_argument("--dense-views", type=int, default=0,
                       help="unused; kept for config files")

    p_fbp = sub.add_parser("fbp", help="filtered back-projection of a sinogram")
    add_common(p_fbp)
    p_fbp.add_argument("--sinogram", required=True, help="path to a .bin sinogram")
    p_fbp.add_argument("--filter", choices=("ramp", "ramp-hann"), default="ramp")
    p_fbp.add_argument("--size", type=int, default=0, help="output size (0: detector bins)")
    p_fbp.add_argument("--views", type=int, default=0, help="unused; kept for config files")
    p_fbp.add_argument("--dense-views", type=int, default=0,
                       help="unused; kept for config files")
    p_fbp.add_argument("--reference", help="reference image for metrics")
    p_fbp.add_argument("--out", required=True)

    p_eval = sub.add_parser("evaluate", help="aggregate run metrics into a table")
    p_eval.add_argument("runs", nargs="+", help="reconstruction / fbp output directories")
    p_eval.add_argument("--out", required=True, help="CSV path")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_thread_limit()
        if args.command in ("simulate", "reconstruct", "fbp"):
            defaults = {
                a.dest: a.default
                for a in parser._subparsers._group_actions[0].choices[args.command]._actions
            }
            args = _merge_config(args, defaults)
            args = _scale_defaults(args)
        handler = {
            "simulate": cmd_simulate,
            "reconstruct": cmd_reconstruct,
            "fbp": cmd_fbp,
            "evaluate": cmd_evaluate,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainDivergedError, FloatingPointError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
