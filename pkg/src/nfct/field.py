"""Coordinate-to-intensity neural field with hand-rolled reverse-mode gradients.

The field is a positional encoder (multiresolution hash grid, Gaussian
Fourier features, or raw coordinates) feeding a small fully-connected
network.  All trainable scalars live in one flat 64-bit parameter vector
with named slices, so the optimizer never needs to know the architecture.

Forward and backward passes are written directly against numpy; the
backward pass returns exact gradients with respect to the parameters and,
on request, with respect to the input coordinates (needed by pose
optimization).  Compute may run in float32 by passing a float32 working
copy of the parameter vector; the float64 path is the reference.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import erf

try:
    if os.environ.get("NFCT_DISABLE_FAST"):
        _fast = None
    else:
        from . import _fast
except ImportError:  # pragma: no cover - numba not installed
    _fast = None

# Per-dimension multipliers of the spatial hash (x is left unmultiplied).
HASH_PRIME_Y = np.uint64(2654435761)

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def _relu(x):
    return np.maximum(x, 0)


def _relu_grad_from_out(out):
    return (out > 0).astype(out.dtype)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def _gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return cdf + x * pdf


def _sigmoid(x):
    clipped = np.clip(x, -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-clipped))


HIDDEN_ACTIVATIONS = ("relu", "gelu")
OUTPUT_ACTIVATIONS = ("sigmoid", "linear")


# ---------------------------------------------------------------------------
# Encoder configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HashGridConfig:
    """Multiresolution hash-grid hyperparameters.

    Level ``l`` has grid resolution ``floor(base_resolution * per_level_scale**l)``
    cells per axis.  A level whose dense corner grid fits in the table is
    indexed directly; finer levels fall back to the spatial hash.
    """

    n_levels: int = 8
    base_resolution: int = 16
    per_level_scale: float = 1.5
    features_per_level: int = 2
    log2_table_size: int = 16

    def __post_init__(self):
        if self.n_levels < 1 or self.base_resolution < 1:
            raise ValueError("n_levels and base_resolution must be >= 1")
        res = self.resolutions
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError("level resolutions must be strictly increasing")

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(
            int(np.floor(self.base_resolution * self.per_level_scale**lvl))
            for lvl in range(self.n_levels)
        )

    def level_table_entries(self, level: int) -> int:
        """Entries allocated for one level: the dense corner grid when it fits."""
        n = self.resolutions[level] + 1
        return min(n * n, self.table_size)

    def level_is_dense(self, level: int) -> bool:
        n = self.resolutions[level] + 1
        return n * n <= self.table_size

    @property
    def out_dim(self) -> int:
        return self.n_levels * self.features_per_level


@dataclass(frozen=True)
class FourierConfig:
    """Gaussian random Fourier features: fixed ``B ~ N(0, sigma^2)`` of shape (m, 2)."""

    m: int = 128
    sigma: float = 10.0
    seed: int = 0

    @property
    def out_dim(self) -> int:
        return 2 * self.m


@dataclass(frozen=True)
class FieldConfig:
    """Architecture descriptor: encoder choice plus the MLP head.

    ``n_hidden`` hidden layers of ``hidden_width`` units ("two fully-connected
    layers" by default) followed by a single-output head.
    """

    encoder: str = "hash"  # hash | fourier | identity
    hash_grid: HashGridConfig = dc_field(default_factory=HashGridConfig)
    fourier: FourierConfig = dc_field(default_factory=FourierConfig)
    hidden_width: int = 64
    n_hidden: int = 2
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        if self.encoder not in ("hash", "fourier", "identity"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.n_hidden < 0 or (self.n_hidden > 0 and self.hidden_width < 1):
            raise ValueError("bad MLP shape")

    @property
    def in_dim(self) -> int:
        if self.encoder == "hash":
            return self.hash_grid.out_dim
        if self.encoder == "fourier":
            return self.fourier.out_dim
        return 2

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return (self.in_dim, *([self.hidden_width] * self.n_hidden), 1)


# ---------------------------------------------------------------------------
# Flat parameter vector with named slices
# ---------------------------------------------------------------------------

class ParamLayout:
    """Named slices partitioning one flat array of 64-bit parameters."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.shapes = dict(shapes)
        self.offsets = {}
        off = 0
        for name, shape in self.shapes.items():
            self.offsets[name] = off
            off += int(np.prod(shape))
        self.size = off

    def slice_of(self, name: str) -> slice:
        off = self.offsets[name]
        return slice(off, off + int(np.prod(self.shapes[name])))

    def view(self, vec: np.ndarray, name: str) -> np.ndarray:
        """A reshaped view into ``vec`` (shares memory)."""
        return vec[self.slice_of(name)].reshape(self.shapes[name])

    def unpack(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        if vec.shape != (self.size,):
            raise ValueError(f"parameter vector has {vec.shape}, layout needs ({self.size},)")
        return {name: self.view(vec, name) for name in self.shapes}

    def pack(self, parts: dict[str, np.ndarray], dtype=np.float64) -> np.ndarray:
        vec = np.zeros(self.size, dtype=dtype)
        for name, shape in self.shapes.items():
            arr = np.asarray(parts[name])
            if arr.shape != shape:
                raise ValueError(f"slice {name}: got {arr.shape}, want {shape}")
            self.view(vec, name)[...] = arr
        return vec


def build_layout(cfg: FieldConfig) -> ParamLayout:
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.encoder == "hash":
        hg = cfg.hash_grid
        for lvl in range(hg.n_levels):
            shapes[f"hash.table{lvl}"] = (hg.level_table_entries(lvl), hg.features_per_level)
    widths = cfg.layer_widths
    for l, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"mlp{l}.w"] = (d_in, d_out)
        shapes[f"mlp{l}.b"] = (d_out,)
    return ParamLayout(shapes)


# ---------------------------------------------------------------------------
# Hash-grid encoding
# ---------------------------------------------------------------------------

def _hash_corner_indices(ix, iy, resolution, n_entries, dense):
    """Table index of integer corner (ix, iy) at one level."""
    if dense:
        return iy * (resolution + 1) + ix
    h = ix.astype(np.uint64) ^ (iy.astype(np.uint64) * HASH_PRIME_Y)
    return (h & np.uint64(n_entries - 1)).astype(np.int64)


def _hash_level_cells(pts, resolution, dtype):
    """Cell coordinates at one level: integer corner (ix, iy) plus fractions.

    Input coordinates are clamped to the [-1, 1] square first, then mapped to
    [0, resolution]; the top edge is folded into the last cell so fractions
    stay in [0, 1].
    """
    u = (pts + 1.0) * 0.5
    np.clip(u, 0.0, 1.0, out=u)
    x = u * resolution
    ixy = np.minimum(x.astype(np.int64), resolution - 1)
    w = x - ixy.astype(dtype)
    return ixy, w


class HashGridEncoder:
    """Bilinear interpolation of learned features in hashed multiresolution grids."""

    def __init__(self, cfg: HashGridConfig, use_fast: bool = False):
        self.cfg = cfg
        self.use_fast = bool(use_fast and _fast is not None)
        self._fast_meta = _fast.FastHashTables(cfg) if self.use_fast else None
        self._fwd_bufs = {}
        self._scatter_buf = {}

    @property
    def out_dim(self):
        return self.cfg.out_dim

    @property
    def total_entries(self) -> int:
        return sum(self.cfg.level_table_entries(l) for l in range(self.cfg.n_levels))

    def table_names(self):
        return [f"hash.table{lvl}" for lvl in range(self.cfg.n_levels)]

    def encode(self, params: dict[str, np.ndarray], pts: np.ndarray):
        """Features of shape (B, n_levels * features_per_level) plus backward cache."""
        cfg = self.cfg
        B = pts.shape[0]
        dtype = params[self.table_names()[0]].dtype
        pts = pts.astype(dtype, copy=False)
        out = np.empty((B, cfg.out_dim), dtype=dtype)
        cache = []
        F = cfg.features_per_level
        for lvl, res in enumerate(cfg.resolutions):
            table = params[f"hash.table{lvl}"]
            n_entries = table.shape[0]
            dense = cfg.level_is_dense(lvl)
            ixy, w = _hash_level_cells(pts, res, dtype)
            ix, iy = ixy[:, 0], ixy[:, 1]
            i00 = _hash_corner_indices(ix, iy, res, n_entries, dense)
            i10 = _hash_corner_indices(ix + 1, iy, res, n_entries, dense)
            i01 = _hash_corner_indices(ix, iy + 1, res, n_entries, dense)
            i11 = _hash_corner_indices(ix + 1, iy + 1, res, n_entries, dense)
            wx = w[:, 0:1]
            wy = w[:, 1:2]
            f00, f10, f01, f11 = table[i00], table[i10], table[i01], table[i11]
            out[:, lvl * F : (lvl + 1) * F] = (
                f00 * ((1 - wx) * (1 - wy))
                + f10 * (wx * (1 - wy))
                + f01 * ((1 - wx) * wy)
                + f11 * (wx * wy)
            )
            cache.append((i00, i10, i01, i11, wx, wy, f00, f10, f01, f11))
        return out, ("numpy", pts, cache)

    def encode_fast(self, tables2d: np.ndarray, pts: np.ndarray):
        """Kernel-backed :meth:`encode` over the concatenated table matrix.

        Internal buffers are reused across calls with the same batch shape,
        so a cache is only valid until the next forward pass.
        """
        meta = self._fast_meta
        B = pts.shape[0]
        dtype = tables2d.dtype
        key = (B, dtype)
        bufs = self._fwd_bufs.get(key)
        if bufs is None:
            bufs = (
                np.empty((B, self.cfg.out_dim), dtype=dtype),
                np.empty((B, self.cfg.n_levels, 4), dtype=np.int64),
                np.empty((B, self.cfg.n_levels, 2), dtype=dtype),
            )
            self._fwd_bufs = {key: bufs}
        out, corners, fracs = bufs
        pts = pts.astype(dtype, copy=False)
        _fast.hash_forward_kernel(
            pts, tables2d, meta.level_rows, meta.resolutions, meta.dense_n,
            meta.hash_mask, out, corners, fracs,
        )
        return out, ("fast", pts, corners, fracs, tables2d)

    def backward_fast(self, cache, dfeat, grad_tables2d: np.ndarray, need_dpts: bool):
        """Kernel-backed backward; adds table gradients into ``grad_tables2d``."""
        meta = self._fast_meta
        _, pts, corners, fracs, tables2d = cache
        dtype = tables2d.dtype
        buf = self._scatter_buf.get(dtype)
        if buf is None:
            buf = np.empty(
                (_fast.N_SCATTER_CHUNKS, meta.total_entries, self.cfg.features_per_level),
                dtype=dtype,
            )
            self._scatter_buf = {dtype: buf}
        buf.fill(0)
        if need_dpts:
            dpts = np.empty_like(pts)
        else:
            dpts = np.empty((1, 2), dtype=dtype)
        _fast.hash_backward_kernel(
            dfeat, corners, fracs, tables2d, pts, meta.resolutions, buf, dpts,
            need_dpts,
        )
        grad_tables2d += buf.sum(axis=0, dtype=np.float64)
        return dpts if need_dpts else None

    def backward(self, params, cache, dfeat, grads: dict[str, np.ndarray], need_dpts: bool):
        """Accumulate table gradients into ``grads``; return d(pts) or None.

        Table gradients are accumulated with bincount, i.e. deterministically
        in batch order.  Coordinate gradients use the exact piecewise-bilinear
        derivative and are zero where the input clamp was active.
        """
        cfg = self.cfg
        _, pts, level_caches = cache
        F = cfg.features_per_level
        dpts = np.zeros_like(pts) if need_dpts else None
        if need_dpts:
            inside = (np.abs(pts) < 1.0).astype(pts.dtype)
        for lvl, res in enumerate(cfg.resolutions):
            name = f"hash.table{lvl}"
            gtab = grads[name]
            n_entries = gtab.shape[0]
            i00, i10, i01, i11, wx, wy, f00, f10, f01, f11 = level_caches[lvl]
            d = dfeat[:, lvl * F : (lvl + 1) * F]
            w00 = ((1 - wx) * (1 - wy))[:, 0]
            w10 = (wx * (1 - wy))[:, 0]
            w01 = ((1 - wx) * wy)[:, 0]
            w11 = (wx * wy)[:, 0]
            for f in range(F):
                df = d[:, f]
                col = gtab[:, f]
                col += np.bincount(i00, weights=df * w00, minlength=n_entries)
                col += np.bincount(i10, weights=df * w10, minlength=n_entries)
                col += np.bincount(i01, weights=df * w01, minlength=n_entries)
                col += np.bincount(i11, weights=df * w11, minlength=n_entries)
            if need_dpts:
                # d(feature)/dx via corner differences; d(x)/d(p) = res / 2.
                gx = ((f10 - f00) * (1 - wy) + (f11 - f01) * wy) * d
                gy = ((f01 - f00) * (1 - wx) + (f11 - f10) * wx) * d
                scale = res * 0.5
                dpts[:, 0] += gx.sum(axis=1) * scale
                dpts[:, 1] += gy.sum(axis=1) * scale
        if need_dpts:
            dpts *= inside
        return dpts


def hash_encode(p: np.ndarray, enc: HashGridEncoder, params: dict[str, np.ndarray]):
    """Encode point(s) ``p``; convenience wrapper returning features only."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    out, _ = enc.encode(params, np.atleast_2d(p))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Fourier-feature encoding
# ---------------------------------------------------------------------------

class FourierEncoder:
    """``p -> [sin(2 pi B p), cos(2 pi B p)]`` with a fixed Gaussian matrix B."""

    def __init__(self, cfg: FourierConfig):
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.b_matrix = rng.normal(0.0, cfg.sigma, size=(cfg.m, 2))

    @property
    def out_dim(self):
        return self.cfg.out_dim

    def encode(self, pts: np.ndarray, dtype):
        b = self.b_matrix.astype(dtype, copy=False)
        proj = (2.0 * np.pi) * (pts.astype(dtype, copy=False) @ b.T)
        s, c = np.sin(proj), np.cos(proj)
        return np.concatenate([s, c], axis=1), (s, c)

    def backward(self, cache, dfeat, dtype):
        s, c = cache
        m = self.cfg.m
        dproj = dfeat[:, :m] * c - dfeat[:, m:] * s
        b = self.b_matrix.astype(dtype, copy=False)
        return (2.0 * np.pi) * (dproj @ b)


def fourier_encode(p: np.ndarray, enc: FourierEncoder):
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    out, _ = enc.encode(np.atleast_2d(p), np.float64)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# The full field model
# ---------------------------------------------------------------------------

class FieldModel:
    """Encoder plus MLP over one flat parameter vector.

    ``use_fast`` selects the numba kernels for the hash encoder when numba is
    importable (default); the numpy path is the reference and the two agree
    to rounding.
    """

    def __init__(self, cfg: FieldConfig, use_fast: bool | None = None):
        self.cfg = cfg
        self.layout = build_layout(cfg)
        if use_fast is None:
            use_fast = _fast is not None
        self.hash_encoder = (
            HashGridEncoder(cfg.hash_grid, use_fast=use_fast)
            if cfg.encoder == "hash"
            else None
        )
        self.fourier_encoder = FourierEncoder(cfg.fourier) if cfg.encoder == "fourier" else None
        self.use_fast = self.hash_encoder.use_fast if self.hash_encoder else False
        if cfg.encoder == "hash":
            # hash tables occupy the leading span of the flat vector, so the
            # concatenated (entries, features) matrix is a zero-copy view
            n = self.hash_encoder.total_entries * cfg.hash_grid.features_per_level
            assert self.layout.offsets["hash.table0"] == 0
            self.enc_slice = slice(0, n)
        else:
            self.enc_slice = None

    @property
    def n_params(self) -> int:
        return self.layout.size

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Fresh float64 parameter vector.

        Draw order: hash tables coarsest level first (uniform +-1e-4), then
        each layer's weight matrix (uniform Kaiming, +-sqrt(6 / fan_in));
        biases start at zero and consume no draws.
        """
        vec = np.zeros(self.layout.size, dtype=np.float64)
        parts = self.layout.unpack(vec)
        if self.cfg.encoder == "hash":
            for lvl in range(self.cfg.hash_grid.n_levels):
                tab = parts[f"hash.table{lvl}"]
                tab[...] = rng.uniform(-1e-4, 1e-4, size=tab.shape)
        widths = self.cfg.layer_widths
        for l, d_in in enumerate(widths[:-1]):
            w = parts[f"mlp{l}.w"]
            bound = np.sqrt(6.0 / d_in)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
        return vec

    # -- forward -----------------------------------------------------------

    def _encode(self, params, parts, pts, dtype):
        if self.cfg.encoder == "hash":
            if self.use_fast:
                F = self.cfg.hash_grid.features_per_level
                tables2d = params[self.enc_slice].reshape(-1, F)
                return self.hash_encoder.encode_fast(tables2d, pts)
            return self.hash_encoder.encode(parts, pts)
        if self.cfg.encoder == "fourier":
            return self.fourier_encoder.encode(pts, dtype)
        z = pts.astype(dtype, copy=False)
        return z, None

    def forward(self, params: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Intensities at points ``pts`` of shape (B, 2)."""
        out, _ = self.forward_cached(params, pts)
        return out

    def forward_cached(self, params: np.ndarray, pts: np.ndarray):
        """Forward pass that also returns the cache consumed by :meth:`backward`."""
        pts = np.ascontiguousarray(pts)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"pts must be (B, 2), got {pts.shape}")
        parts = self.layout.unpack(params)
        dtype = params.dtype
        z, enc_cache = self._encode(params, parts, pts, dtype)
        widths = self.cfg.layer_widths
        n_layers = len(widths) - 1
        act = self.cfg.hidden_activation
        layer_inputs = [z]
        preacts = []
        h = z
        for l in range(n_layers):
            a = h @ parts[f"mlp{l}.w"]
            a += parts[f"mlp{l}.b"]
            if l < n_layers - 1:
                # ReLU gradients only need the output sign; GELU needs the preact.
                if act == "relu":
                    preacts.append(None)
                    h = np.maximum(a, 0, out=a)
                else:
                    preacts.append(a)
                    h = _gelu(a)
                layer_inputs.append(h)
            else:
                preacts.append(a)
                h = a
        pre_out = h[:, 0]
        if self.cfg.output_activation == "sigmoid":
            out = _sigmoid(pre_out)
        else:
            out = pre_out
        cache = (pts, enc_cache, layer_inputs, preacts, out)
        return out, cache

    # -- backward ----------------------------------------------------------

    def backward(
        self,
        params: np.ndarray,
        cache,
        dout: np.ndarray,
        *,
        need_coord_grad: bool = True,
        grads_out: np.ndarray | None = None,
    ):
        """Exact reverse-mode gradients for a cached forward pass.

        Returns ``(dparams, dpts)``; ``dparams`` is float64 and accumulated
        into ``grads_out`` when given.  ``dpts`` is None unless
        ``need_coord_grad``.  Raises on non-finite upstream gradients, naming
        the first offending batch index.
        """
        if not np.all(np.isfinite(dout)):
            bad = int(np.flatnonzero(~np.isfinite(np.asarray(dout)))[0])
            raise FloatingPointError(f"non-finite upstream gradient at batch index {bad}")
        pts, enc_cache, layer_inputs, preacts, out = cache
        parts = self.layout.unpack(params)
        if grads_out is None:
            grads_out = np.zeros(self.layout.size, dtype=np.float64)
        gparts = self.layout.unpack(grads_out)
        dtype = params.dtype
        dout = np.asarray(dout, dtype=dtype)

        if self.cfg.output_activation == "sigmoid":
            d = (dout * out * (1.0 - out))[:, None]
        else:
            d = dout[:, None]

        widths = self.cfg.layer_widths
        n_layers = len(widths) - 1
        act = self.cfg.hidden_activation
        for l in range(n_layers - 1, -1, -1):
            z_in = layer_inputs[l]
            gparts[f"mlp{l}.w"] += z_in.T @ d
            gparts[f"mlp{l}.b"] += d.sum(axis=0)
            if l > 0 or need_coord_grad or self.cfg.encoder == "hash":
                d = d @ parts[f"mlp{l}.w"].T
            if l > 0:
                if act == "relu":
                    if self.use_fast:
                        _fast.relu_backward_kernel(d, layer_inputs[l])
                    else:
                        d *= _relu_grad_from_out(layer_inputs[l])
                else:
                    d *= _gelu_grad(preacts[l - 1])

        dfeat = d  # gradient w.r.t. encoder output
        dpts = None
        if self.cfg.encoder == "hash":
            if enc_cache[0] == "fast":
                F = self.cfg.hash_grid.features_per_level
                grad_tables2d = grads_out[self.enc_slice].reshape(-1, F)
                dpts = self.hash_encoder.backward_fast(
                    enc_cache, dfeat, grad_tables2d, need_coord_grad
                )
            else:
                dpts = self.hash_encoder.backward(
                    parts, enc_cache, dfeat, gparts, need_coord_grad
                )
        elif need_coord_grad:
            if self.cfg.encoder == "fourier":
                dpts = self.fourier_encoder.backward(enc_cache, dfeat, dtype)
            else:
                dpts = dfeat.copy()
        return grads_out, dpts

    def eval_fn(self, params: np.ndarray):
        """A plain ``coords -> intensities`` closure over fixed parameters."""

        def field_eval(pts):
            return self.forward(params, np.asarray(pts, dtype=params.dtype))

        return field_eval


# Spec-shaped free functions over the class core. ---------------------------

def field_forward(params: np.ndarray, p, model: FieldModel):
    """Intensity at point(s) ``p`` under the architecture of ``model``."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    out = model.forward(params, np.atleast_2d(p))
    return float(out[0]) if single else out


def field_backward(params: np.ndarray, pts, dout, model: FieldModel, *, need_coord_grad=True):
    """Gradients w.r.t. params and coordinates for a fresh forward pass."""
    pts = np.atleast_2d(np.asarray(pts, dtype=params.dtype))
    _, cache = model.forward_cached(params, pts)
    return model.backward(params, cache, dout, need_coord_grad=need_coord_grad)
