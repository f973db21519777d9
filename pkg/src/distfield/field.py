"""Dense differentiable voxel radiance field.

The scene model is a regular 3-D lattice carrying a nonnegative density and
an RGB color per vertex, sampled with trilinear interpolation.  All trainable
parameters live in one flat vector (densities first, then colors), which is
what the consensus engine averages and exchanges.  Volume rendering follows
the usual emission-absorption quadrature with a constant bin width:

    alpha_k = 1 - exp(-sigma_k * dt)
    w_k     = alpha_k * prod_{j<k} (1 - alpha_j)
    rgb     = sum_k w_k c_k
    depth   = sum_k w_k t_k / max(sum_k w_k, DEPTH_EPS)

Gradients of the training loss with respect to every grid parameter are
computed analytically (no autodiff), which keeps a full training step at
a few milliseconds for desk-scale grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .pose import DistortionSet, LocalPose, RelativePose

# Guard for the depth estimator's denominator at vanishing opacity.
DEPTH_EPS = 1e-8

# Compiled kernels carry the rendering workload when numba is installed;
# the numpy implementation below is the reference and fallback.
USE_KERNELS = _kernels.AVAILABLE


@dataclass
class Intrinsics:
    """Pinhole camera with a single focal length, in pixels."""

    f: float
    W: int
    H: int

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError("focal length must be positive")
        if self.W < 1 or self.H < 1:
            raise ValueError("image size must be at least 1x1")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.direction = np.asarray(self.direction, dtype=float).reshape(3)
        n = float(np.linalg.norm(self.direction))
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("ray direction must be finite and nonzero")


@dataclass
class RenderSample:
    rgb: np.ndarray
    depth: float
    opacity: float


@dataclass
class RenderOptions:
    """Quadrature settings shared by training, data generation and eval."""

    n_samples: int = 64
    t_near: float = 0.8
    t_far: float = 5.2

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples per ray")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be smaller than t_far")


class VoxelField:
    """Dense voxel grid of (density, rgb) with trilinear interpolation.

    Parameters are stored as a flat vector of length ``nx*ny*nz*4``:
    densities first (C order), then colors.  ``flatten``/``from_params``
    round-trip bit-exactly.
    """

    def __init__(self, resolution, bounds, params=None):
        self.resolution = tuple(int(n) for n in resolution)
        if any(n < 2 for n in self.resolution):
            raise ValueError("grid needs at least 2 vertices per axis")
        lo, hi = bounds
        self.lo = np.asarray(lo, dtype=float).reshape(3).copy()
        self.hi = np.asarray(hi, dtype=float).reshape(3).copy()
        if not np.all(self.hi > self.lo):
            raise ValueError("bounds must have positive extent")
        n = self.n_cells
        if params is None:
            params = np.zeros(4 * n)
        self.params = np.asarray(params, dtype=float).reshape(4 * n)

    @property
    def n_cells(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def n_params(self) -> int:
        return 4 * self.n_cells

    @property
    def bounds(self):
        return self.lo.copy(), self.hi.copy()

    @property
    def density(self) -> np.ndarray:
        return self.params[: self.n_cells].reshape(self.resolution)

    @property
    def color(self) -> np.ndarray:
        return self.params[self.n_cells:].reshape(self.resolution + (3,))

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    def from_params(self, params) -> "VoxelField":
        """New field over the same lattice with the given flat parameters."""
        return VoxelField(self.resolution, (self.lo, self.hi), np.array(params, dtype=float))

    @classmethod
    def uniform(cls, resolution, bounds, density=0.0, rgb=(0.0, 0.0, 0.0)):
        f = cls(resolution, bounds)
        f.density[...] = density
        f.color[...] = np.asarray(rgb, dtype=float)
        return f

    def copy(self) -> "VoxelField":
        return VoxelField(self.resolution, (self.lo, self.hi), self.params.copy())

    def sample(self, points):
        """Trilinear (density, rgb) at world points; zero outside bounds."""
        sigma, rgb, _ = _interp(self.params, self.resolution, self.lo, self.hi,
                                np.asarray(points, dtype=float))
        return sigma, rgb


def project_params(params, n_cells) -> np.ndarray:
    """In-place feasibility projection: density >= 0, colors in [0, 1]."""
    np.clip(params[:n_cells], 0.0, None, out=params[:n_cells])
    np.clip(params[n_cells:], 0.0, 1.0, out=params[n_cells:])
    return params


def warp_params(params, resolution, lo, hi, transform: RelativePose) -> np.ndarray:
    """Resample a parameter vector under a rigid change of world frame.

    The returned grid satisfies ``new(x) = old(transform . x)``; used when
    the global frame is handed over to a new reference agent.
    """
    nx, ny, nz = resolution
    axes = [np.linspace(lo[i], hi[i], (nx, ny, nz)[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    pts = transform.apply(pts)
    sigma, rgb, _ = _interp(np.asarray(params, dtype=float), (nx, ny, nz),
                            np.asarray(lo, float), np.asarray(hi, float), pts)
    return np.concatenate([sigma.ravel(), rgb.ravel()])


# ---------------------------------------------------------------------------
# ray generation

def ray_for_pixel(pose: LocalPose, K: Intrinsics, u, v) -> Ray:
    """Ray through pixel (u, v): origin at the camera, direction
    ``R ((u - W/2)/f, (-v + H/2)/f, -1)^T`` (not normalized)."""
    if not (0 <= u < K.W and 0 <= v < K.H):
        raise ValueError(f"pixel ({u}, {v}) outside image {K.W}x{K.H}")
    d_cam = np.array([(u - K.W / 2.0) / K.f, (-v + K.H / 2.0) / K.f, -1.0])
    return Ray(pose.t, pose.R @ d_cam)


def camera_rays(pose: LocalPose, K: Intrinsics):
    """Per-pixel directions for a whole image.

    Returns the shared origin (3,) and directions (H*W, 3) in row-major
    pixel order, matching ``ray_for_pixel`` exactly.
    """
    u = np.arange(K.W, dtype=float)
    v = np.arange(K.H, dtype=float)
    uu, vv = np.meshgrid(u, v)  # (H, W)
    d_cam = np.stack([(uu - K.W / 2.0) / K.f,
                      (-vv + K.H / 2.0) / K.f,
                      -np.ones_like(uu)], axis=-1).reshape(-1, 3)
    return pose.t.copy(), d_cam @ pose.R.T


# ---------------------------------------------------------------------------
# rendering

def _interp(params, resolution, lo, hi, pts):
    """Trilinear interpolation of (sigma, rgb) at pts (N, 3).

    Returns sigma (N,), rgb (N, 3) and a context for scattering gradients
    back to the grid: (flat corner indices (N, 8), corner weights (N, 8),
    in-bounds mask (N,)).  Out-of-bounds points contribute zero.
    """
    nx, ny, nz = resolution
    n_cells = nx * ny * nz
    res = np.array([nx, ny, nz], dtype=float)
    inb = np.all((pts >= lo) & (pts <= hi), axis=-1)

    g = (pts - lo) / (hi - lo) * (res - 1.0)
    g = np.clip(g, 0.0, res - 1.0)
    i0 = np.minimum(g.astype(np.int64), np.array([nx - 2, ny - 2, nz - 2]))
    f = g - i0

    wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=-1)  # (N, 2)
    wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=-1)
    wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=-1)
    w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    w = w * inb[:, None]

    base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    offs = np.array([(dx * ny + dy) * nz + dz
                     for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])
    idx = base[:, None] + offs[None, :]  # (N, 8)

    dvals = np.take(params[:n_cells], idx)
    sigma = np.einsum("nc,nc->n", dvals, w)
    cvals = np.take(params[n_cells:].reshape(-1, 3), idx, axis=0)  # (N, 8, 3)
    rgb = np.einsum("ncj,nc->nj", cvals, w)
    return sigma, rgb, (idx, w, inb)


def _sample_ts(n_samples, t_near, t_far, n_rays, jitter=None):
    """Stratified sample positions; midpoints when jitter is None."""
    dt = (t_far - t_near) / n_samples
    k = np.arange(n_samples, dtype=float)
    if jitter is None:
        offs = np.full((n_rays, n_samples), 0.5)
    else:
        offs = np.asarray(jitter, dtype=float).reshape(n_rays, n_samples)
    return t_near + (k[None, :] + offs) * dt, dt


def _np_forward(field: VoxelField, origins, dirs, ts, dt):
    """Reference numpy forward pass; returns outputs plus a backward context."""
    B, K = ts.shape
    pts = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
    sigma, rgb_s, ctx = _interp(field.params, field.resolution, field.lo, field.hi,
                                pts.reshape(-1, 3))
    sigma = sigma.reshape(B, K)
    rgb_s = rgb_s.reshape(B, K, 3)

    tau = sigma * dt
    # transmittance before each sample, in exp-of-cumsum form (stable)
    cum = np.cumsum(tau, axis=1)
    T = np.exp(-(cum - tau))            # T_k = exp(-sum_{j<k} tau_j)
    alpha = -np.expm1(-tau)             # 1 - exp(-tau)
    w = alpha * T

    rgb = np.einsum("bk,bkj->bj", w, rgb_s)
    acc = w.sum(axis=1)
    t_sum = np.einsum("bk,bk->b", w, ts)
    depth = t_sum / np.maximum(acc, DEPTH_EPS)

    back = {"ctx": ctx, "B": B, "K": K, "ts": ts, "dt": dt, "tau": tau,
            "T": T, "w": w, "rgb_s": rgb_s, "acc": acc, "t_sum": t_sum,
            "n_cells": field.n_cells}
    return rgb, depth, acc, back


def _np_backward(back, g_rgb, g_depth, g_acc=None):
    """Reference numpy backward pass to a flat parameter gradient."""
    B, K = back["B"], back["K"]
    ts, dt = back["ts"], back["dt"]
    w, T, tau, rgb_s = back["w"], back["T"], back["tau"], back["rgb_s"]
    acc, t_sum = back["acc"], back["t_sum"]
    idx, win, inb = back["ctx"]
    n_cells = back["n_cells"]

    g_rgb = np.asarray(g_rgb, dtype=float).reshape(B, 3)
    g_depth = np.asarray(g_depth, dtype=float).reshape(B)

    # depth = t_sum / max(acc, eps); below eps the denominator is constant
    denom = np.maximum(acc, DEPTH_EPS)
    d_tsum = g_depth / denom
    d_acc = np.where(acc >= DEPTH_EPS, -g_depth * t_sum / denom**2, 0.0)
    if g_acc is not None:
        d_acc = d_acc + np.asarray(g_acc, dtype=float).reshape(B)

    d_w = np.einsum("bj,bkj->bk", g_rgb, rgb_s) + d_tsum[:, None] * ts + d_acc[:, None]

    # w_k = (1 - e^{-tau_k}) e^{-sum_{j<k} tau_j}
    # d tau_j = d_w_j T_j e^{-tau_j} - sum_{k>j} d_w_k w_k
    q = d_w * w
    suffix = np.flip(np.cumsum(np.flip(q, axis=1), axis=1), axis=1) - q
    d_tau = d_w * T * np.exp(-tau) - suffix
    d_sigma = (d_tau * dt).reshape(-1)

    d_rgb_s = g_rgb[:, None, :] * w[:, :, None]  # (B, K, 3)

    grad = np.zeros(4 * n_cells)
    np.add.at(grad, idx.reshape(-1, 8), win * d_sigma[:, None])
    gc = grad[n_cells:].reshape(-1, 3)
    contrib = win[:, :, None] * d_rgb_s.reshape(-1, 1, 3)
    np.add.at(gc, idx.reshape(-1, 8), contrib)
    return grad


def _render_forward(field: VoxelField, origins, dirs, opts: RenderOptions, jitter=None):
    """Forward pass dispatch; returns outputs plus a backward context."""
    if not np.all(np.isfinite(field.params)):
        raise FloatingPointError("field parameters contain non-finite values")
    origins = np.ascontiguousarray(origins, dtype=float).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=float).reshape(-1, 3)
    B = origins.shape[0]
    K = opts.n_samples
    ts, dt = _sample_ts(K, opts.t_near, opts.t_far, B, jitter)

    if not USE_KERNELS:
        return _np_forward(field, origins, dirs, ts, dt)

    nx, ny, nz = field.resolution
    rgb = np.empty((B, 3))
    depth = np.empty(B)
    acc = np.empty(B)
    sig_cache = np.empty((B, K))
    rgb_cache = np.empty((B, K, 3))
    ts = np.ascontiguousarray(ts)
    _kernels.forward(field.params, nx, ny, nz, field.lo, field.hi,
                     origins, dirs, ts, dt, DEPTH_EPS,
                     rgb, depth, acc, sig_cache, rgb_cache)
    back = {"kernel": True, "field": field, "origins": origins, "dirs": dirs,
            "ts": ts, "dt": dt, "sig": sig_cache, "rgbs": rgb_cache, "B": B}
    return rgb, depth, acc, back


def _render_backward(back, g_rgb, g_depth, g_acc=None):
    """Backpropagate (d rgb, d depth, d opacity) to a flat parameter grad."""
    if not back.get("kernel"):
        return _np_backward(back, g_rgb, g_depth, g_acc)
    field = back["field"]
    B = back["B"]
    nx, ny, nz = field.resolution
    g_rgb = np.ascontiguousarray(g_rgb, dtype=float).reshape(B, 3)
    g_depth = np.ascontiguousarray(g_depth, dtype=float).reshape(B)
    g_acc = (np.zeros(B) if g_acc is None
             else np.ascontiguousarray(g_acc, dtype=float).reshape(B))
    grad = np.zeros(field.n_params)
    _kernels.backward(field.params, nx, ny, nz, field.lo, field.hi,
                      back["origins"], back["dirs"], back["ts"], back["dt"],
                      DEPTH_EPS, back["sig"], back["rgbs"],
                      g_rgb, g_depth, g_acc, grad)
    return grad


def render_rays(field: VoxelField, origins, dirs, opts: RenderOptions, jitter=None):
    """Render a batch of rays; returns (rgb (B,3), depth (B,), opacity (B,))."""
    rgb, depth, acc, _ = _render_forward(field, origins, dirs, opts, jitter)
    return rgb, depth, acc


def render_ray(field: VoxelField, ray: Ray, n_samples: int, t_near: float,
               t_far: float, rng=None) -> RenderSample:
    """Render one ray; stratified when ``rng`` is given, midpoint otherwise."""
    opts = RenderOptions(n_samples, t_near, t_far)
    jitter = rng.random((1, n_samples)) if rng is not None else None
    rgb, depth, acc = render_rays(field, ray.origin[None], ray.direction[None],
                                  opts, jitter)
    return RenderSample(rgb[0], float(depth[0]), float(acc[0]))


def render_image(field: VoxelField, pose: LocalPose, K: Intrinsics,
                 opts: RenderOptions, chunk: int = 8192):
    """Render a full image (H, W, 3) plus depth and opacity maps."""
    o, d = camera_rays(pose, K)
    n = d.shape[0]
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    acc = np.empty(n)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        rgb[s:e], depth[s:e], acc[s:e] = render_rays(
            field, np.broadcast_to(o, (e - s, 3)), d[s:e], opts)
    return (rgb.reshape(K.H, K.W, 3), depth.reshape(K.H, K.W),
            acc.reshape(K.H, K.W))


# ---------------------------------------------------------------------------
# training loss

@dataclass
class RayBatch:
    """A batch of training pixels in the owning agent's private frame."""

    origins: np.ndarray       # (B, 3) local-frame ray origins
    dirs: np.ndarray          # (B, 3) local-frame ray directions
    rgb: np.ndarray           # (B, 3) target colors
    depth: np.ndarray         # (B,)  raw mono-depth targets (t units)
    image_index: np.ndarray   # (B,)  which image each pixel came from
    depth_valid: np.ndarray   # (B,)  mono-depth carries signal here
    jitter: np.ndarray | None = None  # (B, n_samples) stratification offsets

    def __post_init__(self):
        if self.origins.shape[0] == 0:
            raise ValueError("empty ray batch")

    def __len__(self) -> int:
        return self.origins.shape[0]


def render_batch(field: VoxelField, batch: RayBatch, T: RelativePose,
                 opts: RenderOptions):
    """Render a batch after mapping its rays into the global frame."""
    Rg = T.rotation()
    o = batch.origins @ Rg.T + T.trans
    d = batch.dirs @ Rg.T
    return render_rays(field, o, d, opts, batch.jitter)


def _loss_terms(rgb, depth, batch: RayBatch, psi: DistortionSet, gamma: float):
    B = len(batch)
    r_rgb = rgb - batch.rgb
    rgb_term = float(np.mean(r_rgb**2))
    g_rgb = (2.0 / (3.0 * B)) * r_rgb

    depth_term = 0.0
    g_depth = np.zeros(B)
    if gamma > 0.0:
        valid = batch.depth_valid
        n_valid = int(valid.sum())
        if n_valid > 0:
            target = psi.correct(batch.depth, batch.image_index)
            r_d = np.where(valid, depth - target, 0.0)
            depth_term = float(r_d @ r_d) / n_valid
            g_depth = (2.0 * gamma / n_valid) * r_d
    return rgb_term, depth_term, g_rgb, g_depth


def local_loss(field: VoxelField, batch: RayBatch, T: RelativePose,
               psi: DistortionSet, gamma: float, opts: RenderOptions) -> float:
    """Photometric plus weighted depth loss on one batch.

    Both terms are mean squared errors: the RGB term averages over pixels
    and channels, the depth term over pixels with valid mono-depth, after
    applying the per-image affine correction.
    """
    if gamma < 0:
        raise ValueError("depth weight must be nonnegative")
    rgb, depth, _ = render_batch(field, batch, T, opts)
    rgb_term, depth_term, _, _ = _loss_terms(rgb, depth, batch, psi, gamma)
    return rgb_term + gamma * depth_term


def loss_and_grad_field(field: VoxelField, batch: RayBatch, T: RelativePose,
                        psi: DistortionSet, gamma: float, opts: RenderOptions):
    """Loss value and its analytic gradient w.r.t. the flat parameters."""
    if gamma < 0:
        raise ValueError("depth weight must be nonnegative")
    Rg = T.rotation()
    o = batch.origins @ Rg.T + T.trans
    d = batch.dirs @ Rg.T
    rgb, depth, acc, back = _render_forward(field, o, d, opts, batch.jitter)
    rgb_term, depth_term, g_rgb, g_depth = _loss_terms(rgb, depth, batch, psi, gamma)
    grad = _render_backward(back, g_rgb, g_depth)
    return rgb_term + gamma * depth_term, grad


def grad_field(field: VoxelField, batch: RayBatch, T: RelativePose,
               psi: DistortionSet, gamma: float, opts: RenderOptions) -> np.ndarray:
    """Analytic gradient of :func:`local_loss` w.r.t. all grid parameters."""
    _, grad = loss_and_grad_field(field, batch, T, psi, gamma, opts)
    return grad
