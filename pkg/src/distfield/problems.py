"""Local problems plugged into the consensus engine.

``LeastSquaresProblem`` is the convex workhorse used to validate the engine
against closed-form solutions; ``RadianceFieldProblem`` binds an agent's
private image set to the voxel field, the pose and the distortion variables.
"""

from __future__ import annotations

import numpy as np

from . import field as vf
from .pose import canonicalize_axis_angle, grad_pose_and_distortion


class LeastSquaresProblem:
    """Quadratic data term ``L(theta) = ||A theta - b||^2`` for one agent."""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float).reshape(-1)
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError("row count mismatch between A and b")

    def lipschitz(self) -> float:
        """Gradient Lipschitz constant 2*lambda_max(A^T A), for step sizing."""
        s = np.linalg.svd(self.A, compute_uv=False)
        return 2.0 * float(s[0] ** 2) if s.size else 0.0

    def sample_batch(self, cfg, rng):
        return None

    def loss_and_grad(self, agent, batch, cfg):
        r = self.A @ agent.theta - self.b
        return float(r @ r), 2.0 * (self.A.T @ r)


class RadianceFieldProblem:
    """An agent's rendering loss over its private images.

    Caches per-image local-frame rays once; batches are (image, pixel)
    pairs drawn uniformly.  Pose and distortion refinement run one
    finite-difference gradient step per inner optimizer step.
    """

    def __init__(self, dataset, opts: vf.RenderOptions, *, pose_lr=0.005,
                 distortion_lr=0.2, fd_step=1e-4, optimize_pose=True,
                 optimize_distortion=True, template: vf.VoxelField = None):
        self.dataset = dataset
        self.opts = opts
        self.pose_lr = pose_lr
        self.distortion_lr = distortion_lr
        self.fd_step = fd_step
        self.optimize_pose = optimize_pose
        self.optimize_distortion = optimize_distortion
        self.template = template

        K = dataset.intrinsics
        M = len(dataset.local_poses)
        hw = K.H * K.W
        self.origins = np.empty((M, 3))
        self.dirs = np.empty((M, hw, 3))
        for m, pose in enumerate(dataset.local_poses):
            o, d = vf.camera_rays(pose, K)
            self.origins[m] = o
            self.dirs[m] = d
        self.rgb = np.asarray(dataset.images, dtype=float).reshape(M, hw, 3)
        self.depth = np.asarray(dataset.mono_depth, dtype=float).reshape(M, hw)
        self.valid = np.asarray(dataset.depth_valid, dtype=bool).reshape(M, hw)
        self.n_images = M
        self.n_pixels = hw

    def field_for(self, theta) -> vf.VoxelField:
        return self.template.from_params(theta)

    def sample_batch(self, cfg, rng) -> vf.RayBatch:
        B = cfg.batch_size
        img = rng.integers(0, self.n_images, B)
        pix = rng.integers(0, self.n_pixels, B)
        jitter = rng.random((B, self.opts.n_samples))
        return vf.RayBatch(
            origins=self.origins[img],
            dirs=self.dirs[img, pix],
            rgb=self.rgb[img, pix],
            depth=self.depth[img, pix],
            image_index=img,
            depth_valid=self.valid[img, pix],
            jitter=jitter,
        )

    def loss_and_grad(self, agent, batch, cfg):
        field = self.field_for(agent.theta)
        return vf.loss_and_grad_field(field, batch, agent.pose,
                                      agent.distortion, cfg.gamma, self.opts)

    def update_locals(self, agent, batch, cfg, rng):
        if not (self.optimize_pose or (self.optimize_distortion and cfg.gamma > 0)):
            return
        field = self.field_for(agent.theta)
        pose_grad, a_grad, b_grad = grad_pose_and_distortion(
            field, batch, agent.pose, agent.distortion, cfg.gamma, self.opts,
            h=self.fd_step, include_pose=self.optimize_pose)
        if self.optimize_pose:
            agent.pose.phi = canonicalize_axis_angle(
                agent.pose.phi - self.pose_lr * pose_grad[:3])
            agent.pose.trans = agent.pose.trans - self.pose_lr * pose_grad[3:]
        if self.optimize_distortion and cfg.gamma > 0:
            agent.distortion.alpha -= self.distortion_lr * a_grad
            agent.distortion.beta -= self.distortion_lr * b_grad
            agent.distortion.clamp()

    def project(self, theta):
        return vf.project_params(theta, self.template.n_cells)

    def rebase(self, agent, gauge):
        agent.theta = vf.warp_params(agent.theta, self.template.resolution,
                                     self.template.lo, self.template.hi, gauge)
