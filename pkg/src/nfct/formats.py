"""On-disk formats shared by the library and the CLI.

Sinograms and images are flat binary payloads of 32-bit little-endian floats
plus a ``.meta`` text sidecar (key=value lines) carrying everything needed to
reload the file without the originating config.  Checkpoints store the flat
parameter vector as 64-bit little-endian floats with an architecture sidecar.
Poses travel as CSV with full float precision.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from .field import FieldConfig, FourierConfig, HashGridConfig
from .geometry import PoseSet
from .projector import DetectorGeometry, ImageGrid, Sinogram

FORMAT_VERSION = 1


def _meta_path(path: str) -> str:
    base, _ = os.path.splitext(path)
    return base + ".meta"


def _write_meta(path: str, entries: dict) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_meta(path: str) -> dict:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    return entries


def _check_version(meta: dict, path: str) -> None:
    version = int(meta.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {version}")


# ---------------------------------------------------------------------------
# Sinograms and images
# ---------------------------------------------------------------------------

def save_sinogram(path: str, sino: Sinogram) -> None:
    values = np.ascontiguousarray(sino.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(values.tobytes())
    angles_deg = ",".join(repr(float(a)) for a in np.rad2deg(sino.angles))
    _write_meta(
        _meta_path(path),
        {
            "format_version": FORMAT_VERSION,
            "rows": sino.values.shape[0],
            "cols": sino.values.shape[1],
            "angles_deg": angles_deg,
            "detector_bins": sino.detector.n_bins,
            "n_samples": sino.detector.n_samples,
            "sample_step": repr(sino.detector.sample_step),
        },
    )


def load_sinogram(path: str) -> Sinogram:
    meta = _read_meta(_meta_path(path))
    _check_version(meta, path)
    rows, cols = int(meta["rows"]), int(meta["cols"])
    values = np.fromfile(path, dtype="<f4").astype(np.float64)
    if values.size != rows * cols:
        raise ValueError(f"{path}: payload has {values.size} floats, expected {rows * cols}")
    angles = np.deg2rad([float(tok) for tok in meta["angles_deg"].split(",")])
    geom = DetectorGeometry(
        n_bins=int(meta["detector_bins"]),
        n_samples=int(meta["n_samples"]),
        sample_step=float(meta["sample_step"]),
    )
    return Sinogram(values.reshape(rows, cols), angles, geom)


def save_image(path: str, image: ImageGrid) -> None:
    values = np.ascontiguousarray(image.pixels, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(values.tobytes())
    _write_meta(
        _meta_path(path),
        {
            "format_version": FORMAT_VERSION,
            "rows": image.size,
            "cols": image.size,
        },
    )


def load_image(path: str) -> ImageGrid:
    meta = _read_meta(_meta_path(path))
    _check_version(meta, path)
    rows, cols = int(meta["rows"]), int(meta["cols"])
    values = np.fromfile(path, dtype="<f4").astype(np.float64)
    if values.size != rows * cols:
        raise ValueError(f"{path}: payload has {values.size} floats, expected {rows * cols}")
    return ImageGrid(values.reshape(rows, cols))


def write_pgm(path: str, image: ImageGrid) -> None:
    """8-bit binary PGM, min-max windowed, for eyeballing results."""
    px = image.pixels
    lo, hi = float(px.min()), float(px.max())
    if hi > lo:
        scaled = (px - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(px)
    data = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.size} {image.size}\n255\n".encode())
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

POSE_CSV_FIELDS = ("view_index", "nominal_angle_rad", "theta_rad", "t_x", "t_y")


def save_pose_csv(path: str, poses: PoseSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSE_CSV_FIELDS)
        for i, pose in enumerate(poses):
            writer.writerow(
                [
                    i,
                    repr(float(poses.nominal_angles[i])),
                    repr(float(pose.theta)),
                    repr(float(pose.t[0])),
                    repr(float(pose.t[1])),
                ]
            )


def load_pose_csv(path: str) -> PoseSet:
    nominal, thetas, ts = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != POSE_CSV_FIELDS:
            raise ValueError(f"{path}: unexpected pose CSV header {reader.fieldnames}")
        for row in reader:
            nominal.append(float(row["nominal_angle_rad"]))
            thetas.append(float(row["theta_rad"]))
            ts.append((float(row["t_x"]), float(row["t_y"])))
    return PoseSet.from_arrays(np.array(nominal), np.array(thetas), np.array(ts))


# ---------------------------------------------------------------------------
# Field checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: np.ndarray, cfg: FieldConfig) -> None:
    payload = np.ascontiguousarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(payload.tobytes())
    entries = {
        "format_version": FORMAT_VERSION,
        "n_params": params.size,
        "encoder": cfg.encoder,
        "hidden_width": cfg.hidden_width,
        "n_hidden": cfg.n_hidden,
        "hidden_activation": cfg.hidden_activation,
        "output_activation": cfg.output_activation,
    }
    if cfg.encoder == "hash":
        hg = cfg.hash_grid
        entries.update(
            hash_n_levels=hg.n_levels,
            hash_base_resolution=hg.base_resolution,
            hash_per_level_scale=repr(hg.per_level_scale),
            hash_features_per_level=hg.features_per_level,
            hash_log2_table_size=hg.log2_table_size,
        )
    elif cfg.encoder == "fourier":
        fc = cfg.fourier
        entries.update(fourier_m=fc.m, fourier_sigma=repr(fc.sigma), fourier_seed=fc.seed)
    _write_meta(_meta_path(path), entries)


def load_checkpoint(path: str) -> tuple[np.ndarray, FieldConfig]:
    meta = _read_meta(_meta_path(path))
    _check_version(meta, path)
    encoder = meta["encoder"]
    kwargs = dict(
        encoder=encoder,
        hidden_width=int(meta["hidden_width"]),
        n_hidden=int(meta["n_hidden"]),
        hidden_activation=meta["hidden_activation"],
        output_activation=meta["output_activation"],
    )
    if encoder == "hash":
        kwargs["hash_grid"] = HashGridConfig(
            n_levels=int(meta["hash_n_levels"]),
            base_resolution=int(meta["hash_base_resolution"]),
            per_level_scale=float(meta["hash_per_level_scale"]),
            features_per_level=int(meta["hash_features_per_level"]),
            log2_table_size=int(meta["hash_log2_table_size"]),
        )
    elif encoder == "fourier":
        kwargs["fourier"] = FourierConfig(
            m=int(meta["fourier_m"]),
            sigma=float(meta["fourier_sigma"]),
            seed=int(meta["fourier_seed"]),
        )
    cfg = FieldConfig(**kwargs)
    params = np.fromfile(path, dtype="<f8")
    n_params = int(meta["n_params"])
    if params.size != n_params:
        raise ValueError(f"{path}: payload has {params.size} floats, expected {n_params}")
    return params, cfg


# ---------------------------------------------------------------------------
# Run artifacts
# ---------------------------------------------------------------------------

def save_loss_csv(path: str, loss_history, lr_history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "lr"])
        for epoch, (loss, lr) in enumerate(zip(loss_history, lr_history)):
            writer.writerow([epoch, repr(float(loss)), repr(float(lr))])


def save_report(path: str, entries: dict) -> None:
    _write_meta(path, entries)


def load_report(path: str) -> dict:
    return _read_meta(path)


def save_pose_track_csv(path: str, rows: list[dict]) -> None:
    """Per-view CSV with the initial, true, and optimized pose tracks."""
    if not rows:
        raise ValueError("no pose rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
