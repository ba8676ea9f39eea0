"""Joint optimization of the neural field and the per-view rigid poses.

Each epoch renders the sinogram from the current field and poses through the
projector's quadrature, takes an l1 loss against the measured sinogram, and
backpropagates through the quadrature sum, the field, and the pose transform.
Adam updates the flat field parameter vector at ``lr_field`` and the pose
variables at ``lr_pose``; both rates halve every ``decay_every`` epochs.

Everything is deterministic for a fixed seed: parameter init draws from one
PCG64 stream, views are processed in index order, and gradient accumulation
follows batch order.  The heavy per-epoch pass may run in float32 (the fast
path); parameters, Adam state, and reported losses stay in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .field import FieldConfig, FieldModel
from .geometry import PoseSet
from .projector import ImageGrid, Sinogram, grid_coordinates, ray_grid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainDivergedError(RuntimeError):
    """Raised when the loss leaves the finite / bounded regime.

    Carries the epoch index and the last parameter state (the most recent
    finite iterate) for post-mortem inspection.
    """

    def __init__(self, epoch, loss, params, thetas, translations):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss!r}")
        self.epoch = epoch
        self.loss = loss
        self.params = params
        self.thetas = thetas
        self.translations = translations


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one reconstruction run."""

    epochs: int = 5000
    lr_field: float = 1e-3
    lr_pose: float = 1e-3
    decay_factor: float = 0.5
    decay_every: int = 500
    rays_per_batch: int | None = None  # None: all rays of all views per epoch
    pose_correction_enabled: bool = True
    encoder: str = "hash"
    seed: int = 0
    field: FieldConfig | None = None
    compute_dtype: str = "float64"
    out_size: int | None = None
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_field <= 0 or self.lr_pose <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 < self.decay_factor <= 1):
            raise ValueError("decay factor must be in (0, 1]")
        if self.compute_dtype not in ("float64", "float32"):
            raise ValueError("compute_dtype must be float64 or float32")

    def field_config(self) -> FieldConfig:
        if self.field is not None:
            return self.field
        return FieldConfig(encoder=self.encoder)


def lr_at(epoch: int, initial_lr: float, config: TrainConfig) -> float:
    """Stepwise-decayed learning rate: halve (by decay_factor) every 500 epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return initial_lr * config.decay_factor ** (epoch // config.decay_every)


def l1_loss(pred, target):
    """Mean absolute error plus its (sub)gradient with respect to ``pred``.

    Accepts Sinograms or plain arrays.  The subgradient at exact ties is 0.
    """
    p = pred.values if isinstance(pred, Sinogram) else np.asarray(pred)
    t = target.values if isinstance(target, Sinogram) else np.asarray(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    resid = p - t
    n = p.size
    loss = float(np.abs(resid).sum(dtype=np.float64) / n)
    return loss, np.sign(resid) / n


@dataclass
class AdamSlot:
    """First/second moment buffers for one variable group."""

    m: np.ndarray
    v: np.ndarray

    @classmethod
    def like(cls, arr: np.ndarray) -> "AdamSlot":
        return cls(np.zeros_like(arr, dtype=np.float64), np.zeros_like(arr, dtype=np.float64))


def adam_update(value, grad, slot: AdamSlot, step: int, lr: float):
    """One Adam update in place; ``step`` is 1-based and already incremented."""
    slot.m *= ADAM_BETA1
    slot.m += (1.0 - ADAM_BETA1) * grad
    slot.v *= ADAM_BETA2
    slot.v += (1.0 - ADAM_BETA2) * np.square(grad)
    m_hat = slot.m / (1.0 - ADAM_BETA1**step)
    v_hat = slot.v / (1.0 - ADAM_BETA2**step)
    value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class TrainState:
    """Everything the stepper mutates: parameters, poses, moments, history."""

    model: FieldModel
    params: np.ndarray
    thetas: np.ndarray
    translations: np.ndarray
    adam_params: AdamSlot
    adam_thetas: AdamSlot
    adam_trans: AdamSlot
    step: int = 0
    loss_history: list[float] = dc_field(default_factory=list)

    @classmethod
    def initialize(cls, model: FieldModel, initial_poses: PoseSet, seed: int) -> "TrainState":
        rng = np.random.Generator(np.random.PCG64(seed))
        params = model.init_params(rng)
        thetas = initial_poses.thetas().astype(np.float64)
        trans = initial_poses.translations().astype(np.float64)
        return cls(
            model=model,
            params=params,
            thetas=thetas,
            translations=trans,
            adam_params=AdamSlot.like(params),
            adam_thetas=AdamSlot.like(thetas),
            adam_trans=AdamSlot.like(trans),
        )

    def pose_set(self, nominal_angles) -> PoseSet:
        return PoseSet.from_arrays(nominal_angles, self.thetas, self.translations)


def _check_finite_grads(state: TrainState, grads_params, grads_thetas, grads_trans):
    if not np.all(np.isfinite(grads_params)):
        bad = int(np.flatnonzero(~np.isfinite(grads_params))[0])
        for name in state.model.layout.shapes:
            sl = state.model.layout.slice_of(name)
            if sl.start <= bad < sl.stop:
                raise FloatingPointError(f"non-finite gradient in parameter slice {name!r}")
        raise FloatingPointError("non-finite gradient in parameter vector")
    if grads_thetas is not None and not np.all(np.isfinite(grads_thetas)):
        raise FloatingPointError("non-finite gradient in pose angles")
    if grads_trans is not None and not np.all(np.isfinite(grads_trans)):
        raise FloatingPointError("non-finite gradient in pose translations")


def adam_step(state: TrainState, grads, lr_field: float, lr_pose: float, *, update_poses=True):
    """Advance all trainable variables by one Adam step.

    ``grads`` is a ``(params, thetas, translations)`` triple; the pose entries
    may be None when poses are frozen.  Raises on non-finite gradients, naming
    the offending parameter slice.
    """
    gp, gth, gt = grads
    _check_finite_grads(state, gp, gth, gt)
    state.step += 1
    adam_update(state.params, gp, state.adam_params, state.step, lr_field)
    if update_poses:
        adam_update(state.thetas, gth, state.adam_thetas, state.step, lr_pose)
        adam_update(state.translations, gt, state.adam_trans, state.step, lr_pose)
    return state


# ---------------------------------------------------------------------------
# The fused per-batch forward/backward pass
# ---------------------------------------------------------------------------

def _pose_coordinates(base_pts, thetas, translations, out=None):
    """Object-frame sample coordinates for a block of views.

    ``base_pts`` is the (n_bins * n_samples, 2) standard-space grid shared by
    all views; output has shape (n_views, n_pts, 2) in base_pts' dtype.
    """
    n_views = thetas.shape[0]
    n_pts = base_pts.shape[0]
    dtype = base_pts.dtype
    if out is None:
        out = np.empty((n_views, n_pts, 2), dtype=dtype)
    cos = np.cos(thetas).astype(dtype)[:, None]
    sin = np.sin(thetas).astype(dtype)[:, None]
    px = base_pts[:, 0][None, :]
    py = base_pts[:, 1][None, :]
    t = translations.astype(dtype)
    out[:, :, 0] = cos * px - sin * py + t[:, 0:1]
    out[:, :, 1] = sin * px + cos * py + t[:, 1:2]
    return out


def _batch_pass(
    model: FieldModel,
    params_c: np.ndarray,
    base_pts: np.ndarray,
    thetas: np.ndarray,
    translations: np.ndarray,
    target_block: np.ndarray,
    inv_total: float,
    sample_step: float,
    n_bins: int,
    need_pose_grads: bool,
    grads_out: np.ndarray,
):
    """Forward + backward over a block of whole views.

    Returns (sum of absolute residuals, d_theta, d_t) with gradients for the
    block's views; field-parameter gradients accumulate into ``grads_out``.
    """
    n_views = thetas.shape[0]
    n_pts = base_pts.shape[0]
    n_samples = n_pts // n_bins
    dtype = params_c.dtype

    coords = _pose_coordinates(base_pts, thetas, translations)
    flat = coords.reshape(-1, 2)
    intens, cache = model.forward_cached(params_c, flat)

    per_ray = intens.reshape(n_views, n_bins, n_samples).sum(axis=2, dtype=dtype)
    yhat = per_ray * dtype.type(sample_step)
    resid = yhat - target_block.astype(dtype)
    abs_sum = float(np.abs(resid).sum(dtype=np.float64))

    gsino = np.sign(resid) * dtype.type(inv_total * sample_step)
    dout = np.repeat(gsino.reshape(-1), n_samples)
    _, dpts = model.backward(
        params_c, cache, dout, need_coord_grad=need_pose_grads, grads_out=grads_out
    )

    if not need_pose_grads:
        return abs_sum, None, None
    dview = dpts.reshape(n_views, n_pts, 2)
    dqx = dview[:, :, 0]
    dqy = dview[:, :, 1]
    px = base_pts[:, 0]
    py = base_pts[:, 1]
    s1 = dqx @ px
    s2 = dqx @ py
    s3 = dqy @ px
    s4 = dqy @ py
    cos = np.cos(thetas)
    sin = np.sin(thetas)
    d_theta = -sin * (s1.astype(np.float64) + s4.astype(np.float64)) + cos * (
        s3.astype(np.float64) - s2.astype(np.float64)
    )
    d_t = np.stack(
        [dqx.sum(axis=1, dtype=np.float64), dqy.sum(axis=1, dtype=np.float64)], axis=1
    )
    return abs_sum, d_theta, d_t


def render_sinogram_arrays(
    model: FieldModel, params_c, geom, thetas, translations, *, view_chunk=32
) -> np.ndarray:
    """Forward-only sinogram render from raw pose arrays (no gradients)."""
    base = ray_grid(geom).reshape(-1, 2).astype(params_c.dtype)
    m = thetas.shape[0]
    out = np.empty((m, geom.n_bins))
    for lo in range(0, m, view_chunk):
        hi = min(lo + view_chunk, m)
        coords = _pose_coordinates(base, thetas[lo:hi], translations[lo:hi])
        vals = model.forward(params_c, coords.reshape(-1, 2))
        out[lo:hi] = (
            vals.reshape(hi - lo, geom.n_bins, geom.n_samples).sum(axis=2)
            * geom.sample_step
        )
    return out


@dataclass
class ReconReport:
    """Everything a reconstruction run produces."""

    image: ImageGrid
    poses: PoseSet
    initial_poses: PoseSet
    loss_history: np.ndarray
    lr_history: np.ndarray
    wall_seconds: float
    config: TrainConfig
    metrics: dict | None = None
    params: np.ndarray | None = None
    model: FieldModel | None = None


def train(
    config: TrainConfig,
    sinogram: Sinogram,
    initial_poses: PoseSet,
    *,
    epoch_callback=None,
) -> ReconReport:
    """Run the joint reconstruction and return the report.

    With ``pose_correction_enabled=False`` pose gradients are discarded and
    the poses stay bit-identical to their initial values (the frozen-pose
    ablation arm).  ``epoch_callback(epoch, state)``, when given, runs after
    each update (used for checkpoint emission).
    """
    if len(initial_poses) != sinogram.n_views:
        raise ValueError(
            f"{len(initial_poses)} poses for {sinogram.n_views} sinogram views"
        )
    t_start = time.perf_counter()
    geom = sinogram.detector
    model = FieldModel(config.field_config())
    state = TrainState.initialize(model, initial_poses, config.seed)
    compute = np.dtype(config.compute_dtype)

    m_views = sinogram.n_views
    n_bins = geom.n_bins
    base_pts = ray_grid(geom).reshape(-1, 2).astype(compute)
    target = np.asarray(sinogram.values, dtype=np.float64)
    inv_total = 1.0 / (m_views * n_bins)

    if config.rays_per_batch is None:
        views_per_batch = m_views
    else:
        views_per_batch = int(np.clip(config.rays_per_batch // n_bins, 1, m_views))
    batch_bounds = [
        (lo, min(lo + views_per_batch, m_views))
        for lo in range(0, m_views, views_per_batch)
    ]

    grads_buf = np.zeros(model.n_params, dtype=np.float64)
    lr_hist = np.empty(config.epochs)
    pose_on = config.pose_correction_enabled
    initial_loss = None

    for epoch in range(config.epochs):
        lr_f = lr_at(epoch, config.lr_field, config)
        lr_p = lr_at(epoch, config.lr_pose, config)
        lr_hist[epoch] = lr_f
        epoch_abs_sum = 0.0
        params_c = state.params.astype(compute) if compute != np.float64 else state.params

        for lo, hi in batch_bounds:
            grads_buf.fill(0.0)
            abs_sum, d_theta, d_t = _batch_pass(
                model,
                params_c,
                base_pts,
                state.thetas[lo:hi],
                state.translations[lo:hi],
                target[lo:hi],
                inv_total,
                geom.sample_step,
                n_bins,
                pose_on,
                grads_buf,
            )
            epoch_abs_sum += abs_sum
            if pose_on:
                g_theta = np.zeros(m_views)
                g_trans = np.zeros((m_views, 2))
                g_theta[lo:hi] = d_theta
                g_trans[lo:hi] = d_t
                adam_step(state, (grads_buf, g_theta, g_trans), lr_f, lr_p)
            else:
                adam_step(state, (grads_buf, None, None), lr_f, lr_p, update_poses=False)
            if len(batch_bounds) > 1 and (lo, hi) != batch_bounds[-1]:
                params_c = (
                    state.params.astype(compute)
                    if compute != np.float64
                    else state.params
                )

        loss = epoch_abs_sum * inv_total
        if initial_loss is None:
            initial_loss = loss
        if not np.isfinite(loss) or loss > config.divergence_factor * max(
            initial_loss, 1e-30
        ):
            raise TrainDivergedError(
                epoch, loss, state.params.copy(), state.thetas.copy(),
                state.translations.copy(),
            )
        state.loss_history.append(loss)
        if epoch_callback is not None:
            epoch_callback(epoch, state)

    out_size = config.out_size if config.out_size is not None else n_bins
    image = render_image(state, out_size)
    wall = time.perf_counter() - t_start
    return ReconReport(
        image=image,
        poses=state.pose_set(initial_poses.nominal_angles),
        initial_poses=initial_poses,
        loss_history=np.asarray(state.loss_history),
        lr_history=lr_hist,
        wall_seconds=wall,
        config=config,
        params=state.params,
        model=model,
    )


def render_image(state: TrainState, out_size: int, *, chunk: int = 65536) -> ImageGrid:
    """Evaluate the field at every pixel center of the out_size grid."""
    coords = grid_coordinates(out_size).reshape(-1, 2)
    vals = np.empty(coords.shape[0])
    for lo in range(0, coords.shape[0], chunk):
        hi = min(lo + chunk, coords.shape[0])
        vals[lo:hi] = state.model.forward(state.params, coords[lo:hi])
    return ImageGrid(vals.reshape(out_size, out_size))
