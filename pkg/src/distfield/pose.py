"""SE(3) relative poses and per-image depth-distortion parameters.

Rotations are stored as axis-angle vectors ``phi = angle * axis`` and
exponentiated with Rodrigues' formula.  Relative poses map an agent's private
camera frame into the shared global frame.  Gradients of a rendering loss
with respect to these low-dimensional variables are computed by central
finite differences (the field itself has analytic gradients, see
:mod:`distfield.field`).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

RAD2DEG = 180.0 / np.pi

# Distortion scales below this are considered collapsed and get clamped.
MIN_DISTORTION_SCALE = 1e-3

# Default central-difference step for pose (rad / world units) and
# distortion (scale / world units) parameters.
FD_STEP = 1e-4


def _vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v.copy()


def skew(v) -> np.ndarray:
    """Map a 3-vector to the corresponding skew-symmetric matrix."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(phi) -> np.ndarray:
    """Exponentiate an axis-angle vector to a rotation matrix.

    Uses ``R = I + sin(a)/a * S + (1-cos(a))/a^2 * S^2`` where ``S`` is the
    skew matrix of ``phi`` and ``a = |phi|``.  For ``a < 1e-6`` the
    coefficients are replaced by their second-order Taylor expansions so the
    map stays smooth through zero.

    Parameters
    ----------
    phi : array-like, shape (3,)
        Axis-angle vector (rotation angle times unit axis), radians.

    Returns
    -------
    R : ndarray, shape (3, 3)
        Orthonormal rotation matrix with determinant +1.
    """
    phi = _vec3(phi)
    if not np.all(np.isfinite(phi)):
        raise FloatingPointError("non-finite axis-angle vector")
    a2 = float(phi @ phi)
    a = np.sqrt(a2)
    if a < 1e-6:
        # sin(a)/a = 1 - a^2/6, (1-cos(a))/a^2 = 1/2 - a^2/24
        c1 = 1.0 - a2 / 6.0
        c2 = 0.5 - a2 / 24.0
    else:
        c1 = np.sin(a) / a
        c2 = (1.0 - np.cos(a)) / a2
    s = skew(phi)
    return np.eye(3) + c1 * s + c2 * (s @ s)


def rotation_to_axis_angle(R) -> np.ndarray:
    """Log map: rotation matrix to canonical axis-angle (angle in [0, pi])."""
    R = np.asarray(R, dtype=float)
    tr = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(tr))
    if angle < 1e-7:
        # first-order: R ~ I + skew(phi)
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if angle > np.pi - 1e-5:
        # near pi the antisymmetric part degenerates; recover the axis from
        # the symmetric part R + I = 2 * (cos a * I + (1 - cos a) w w^T) - ...
        B = (R + np.eye(3)) / 2.0
        w = np.sqrt(np.clip(np.diag(B) / max(np.max(np.diag(B)), 1e-12), 0.0, None))
        w = w / max(np.linalg.norm(w), 1e-12)
        # fix signs using the largest diagonal entry as reference
        k = int(np.argmax(np.diag(B)))
        for i in range(3):
            if i != k and B[k, i] < 0:
                w[i] = -w[i]
        # the antisymmetric part, however small, still carries the sign
        v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if v @ w < 0:
            w = -w
        return angle * w
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return angle * v / (2.0 * np.sin(angle))


def canonicalize_axis_angle(phi) -> np.ndarray:
    """Wrap an axis-angle vector so its magnitude lies in [0, pi]."""
    phi = _vec3(phi)
    a = float(np.linalg.norm(phi))
    if a <= np.pi:
        return phi
    axis = phi / a
    a = np.fmod(a, 2.0 * np.pi)
    if a > np.pi:
        a = 2.0 * np.pi - a
        axis = -axis
    return a * axis


@dataclass
class LocalPose:
    """Camera-to-world pose ``[R|t]`` expressed in an agent's private frame."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3).copy()
        self.t = _vec3(self.t)

    @classmethod
    def identity(cls) -> "LocalPose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Transform points from the camera frame into this pose's frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.t

    def orthonormality_error(self) -> float:
        return float(np.max(np.abs(self.R.T @ self.R - np.eye(3))))


@dataclass
class RelativePose:
    """Rigid transform from an agent's private frame to the global frame.

    ``phi`` is the axis-angle rotation parameter, ``trans`` the translation;
    both are the trainable quantities of the relative-pose refinement.
    """

    phi: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    trans: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.phi = _vec3(self.phi)
        self.trans = _vec3(self.trans)

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls(np.zeros(3), np.zeros(3))

    def rotation(self) -> np.ndarray:
        return rodrigues(self.phi)

    def copy(self) -> "RelativePose":
        return RelativePose(self.phi.copy(), self.trans.copy())

    def canonicalize(self) -> None:
        self.phi = canonicalize_axis_angle(self.phi)

    def is_identity(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.phi) <= tol) and np.all(np.abs(self.trans) <= tol))

    def apply(self, points) -> np.ndarray:
        """Map points from the private frame into the global frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation().T + self.trans


def compose_global(T: RelativePose, pi: LocalPose) -> LocalPose:
    """Express a local camera pose in the global frame: ``[Rg R | Rg t + tg]``."""
    Rg = T.rotation()
    return LocalPose(Rg @ pi.R, Rg @ pi.t + T.trans)


def compose_relative(a: RelativePose, b: RelativePose) -> RelativePose:
    """Composition ``a o b`` (apply ``b`` first, then ``a``) as a RelativePose."""
    Ra, Rb = a.rotation(), b.rotation()
    return RelativePose(rotation_to_axis_angle(Ra @ Rb), Ra @ b.trans + a.trans)


def inverse(T: RelativePose) -> RelativePose:
    """Inverse rigid transform."""
    R = T.rotation()
    return RelativePose(-canonicalize_axis_angle(T.phi), -(R.T @ T.trans))


def pose_error(est: RelativePose, gt: RelativePose) -> tuple[float, float]:
    """Rotation error (degrees) and translation error (world units).

    The rotation error is the geodesic angle of ``R_est R_gt^T``.
    """
    R_rel = est.rotation() @ gt.rotation().T
    tr = np.clip((np.trace(R_rel) - 1.0) / 2.0, -1.0, 1.0)
    d_rot = float(np.arccos(tr)) * RAD2DEG
    d_trans = float(np.linalg.norm(est.trans - gt.trans))
    return d_rot, d_trans


@dataclass
class DistortionSet:
    """Per-image affine depth corrections ``D* = alpha * D + beta``."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1).copy()
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1).copy()
        if self.alpha.shape != self.beta.shape:
            raise ValueError("alpha and beta must have one entry per image")

    @classmethod
    def identity(cls, n_images: int) -> "DistortionSet":
        return cls(np.ones(n_images), np.zeros(n_images))

    def __len__(self) -> int:
        return self.alpha.size

    def copy(self) -> "DistortionSet":
        return DistortionSet(self.alpha.copy(), self.beta.copy())

    def clamp(self) -> None:
        """Keep scales positive; collapsed scales make depth targets useless."""
        np.maximum(self.alpha, MIN_DISTORTION_SCALE, out=self.alpha)

    def inverse(self) -> "DistortionSet":
        """The affine maps undoing these ones.

        If depth was corrupted by ``D' = a D + b``, the correction that
        recovers ``D`` is the inverse map ``(1/a, -b/a)``; optimizing the
        depth loss drives an agent's correction toward the inverse of its
        data's corruption.
        """
        return DistortionSet(1.0 / self.alpha, -self.beta / self.alpha)

    def correct(self, depth, image_index) -> np.ndarray:
        """Apply the per-image correction to raw depth values."""
        idx = np.asarray(image_index)
        return self.alpha[idx] * np.asarray(depth, dtype=float) + self.beta[idx]


def central_difference(f, x, h):
    """Central finite-difference gradient of scalar ``f`` at 1-D point ``x``.

    ``h`` may be a scalar or a per-coordinate array of steps.
    """
    x = np.asarray(x, dtype=float)
    steps = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = steps[i]
        g[i] = (f(x + e) - f(x - e)) / (2.0 * steps[i])
    return g


def grad_pose_and_distortion(field, batch, T: RelativePose, psi: DistortionSet,
                             gamma: float, opts, h: float = FD_STEP,
                             include_pose: bool = True):
    """Central finite-difference gradient of the local loss in (T, psi).

    The voxel field is held constant.  Pose perturbations require
    re-rendering the batch; distortion perturbations only move the depth
    targets, so they reuse a single cached render of the batch.

    Parameters
    ----------
    field : distfield.field.VoxelField
    batch : distfield.field.RayBatch
    T, psi : current relative pose and distortion estimates.
    gamma : depth-loss weight.
    opts : distfield.field.RenderOptions
    h : finite-difference step (radians for phi, world units elsewhere).
    include_pose : skip the 12 pose re-renders when False (returns zeros).

    Returns
    -------
    pose_grad : ndarray, shape (6,)
        Gradient in (phi, trans) order.
    alpha_grad, beta_grad : ndarray, shape (n_images,)
        Per-image distortion gradients; zero for images absent from the batch.
    """
    from . import field as _field

    def loss_at(x):
        trial = RelativePose(x[:3], x[3:])
        return _field.local_loss(field, batch, trial, psi, gamma, opts)

    if include_pose:
        x0 = np.concatenate([T.phi, T.trans])
        pose_grad = central_difference(loss_at, x0, h)
    else:
        pose_grad = np.zeros(6)

    n_images = len(psi)
    alpha_grad = np.zeros(n_images)
    beta_grad = np.zeros(n_images)
    if gamma > 0.0 and np.any(batch.depth_valid):
        # one render, then finite differences on the cached depth estimates
        _, depth_hat, _ = _field.render_batch(field, batch, T, opts)

        def depth_term(a, b):
            target = a[batch.image_index] * batch.depth + b[batch.image_index]
            resid = np.where(batch.depth_valid, depth_hat - target, 0.0)
            n_valid = max(int(batch.depth_valid.sum()), 1)
            return gamma * float(resid @ resid) / n_valid

        for m in np.unique(batch.image_index[batch.depth_valid]):
            for arr, grad in ((psi.alpha, alpha_grad), (psi.beta, beta_grad)):
                plus = arr.copy()
                minus = arr.copy()
                plus[m] += h
                minus[m] -= h
                if arr is psi.alpha:
                    up = depth_term(plus, psi.beta)
                    dn = depth_term(minus, psi.beta)
                else:
                    up = depth_term(psi.alpha, plus)
                    dn = depth_term(psi.alpha, minus)
                grad[m] = (up - dn) / (2.0 * h)
    return pose_grad, alpha_grad, beta_grad
