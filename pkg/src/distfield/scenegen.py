"""Synthetic ground-truth worlds and per-agent datasets.

Scenes are voxel fields with a handful of opaque colored primitives.
Cameras sit on a circle around the origin, looking inward; each agent owns
an angular sector widened by the requested view overlap.  Every agent's
poses are re-expressed in a private frame displaced by a known rigid offset,
and its ground-truth depth maps are corrupted by known per-image affine
distortions, so both quantities can be recovered and verified exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import field as vf
from .metrics import psnr
from .pose import DistortionSet, LocalPose, RelativePose, compose_global, inverse

WORLD_LO = (-1.0, -1.0, -1.0)
WORLD_HI = (1.0, 1.0, 1.0)
CAMERA_RADIUS = 3.0
CAMERA_ELEVATION_DEG = 25.0

# Per-image affine depth corruption is drawn from these ranges; the shift
# range is a fraction of the scene diameter.
ALPHA_RANGE = (0.7, 1.3)
BETA_FRACTION = 0.2

# A ray counts as carrying depth signal when the ground-truth render is at
# least this opaque.
DEPTH_VALID_OPACITY = 0.5


@dataclass
class Scene:
    """Ground-truth world: a voxel field plus shared camera geometry."""

    gt_field: vf.VoxelField
    render: vf.RenderOptions
    camera_radius: float = CAMERA_RADIUS
    camera_elevation_deg: float = CAMERA_ELEVATION_DEG
    background: tuple = (0.0, 0.0, 0.0)

    @property
    def diameter(self) -> float:
        lo, hi = self.gt_field.bounds
        return float(np.linalg.norm(hi - lo))


@dataclass
class AgentDataset:
    """One robot's private training data, all in its own coordinate frame."""

    images: np.ndarray        # (M, H, W, 3)
    mono_depth: np.ndarray    # (M, H, W) distorted depth, t units
    depth_valid: np.ndarray   # (M, H, W) bool
    local_poses: list         # M LocalPose in the private frame
    gt_relative_pose: RelativePose
    gt_distortions: DistortionSet
    intrinsics: vf.Intrinsics
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        m = self.images.shape[0]
        if not (self.mono_depth.shape[0] == m == len(self.local_poses)
                and len(self.gt_distortions) == m
                and self.depth_valid.shape[0] == m):
            raise ValueError("per-image containers disagree on image count")

    @property
    def n_images(self) -> int:
        return self.images.shape[0]


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> LocalPose:
    """Camera pose at ``eye`` with -z pointing at ``target``."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    z = -fwd
    x = np.cross(np.asarray(up, dtype=float), z)
    n = np.linalg.norm(x)
    if n < 1e-9:
        raise ValueError("camera forward direction is parallel to up")
    x = x / n
    y = np.cross(z, x)
    return LocalPose(np.stack([x, y, z], axis=1), eye)


def circle_pose(scene: Scene, azimuth, elevation_deg=None) -> LocalPose:
    """World-frame camera on the viewing circle, looking at the origin."""
    el = np.deg2rad(scene.camera_elevation_deg if elevation_deg is None
                    else elevation_deg)
    r = scene.camera_radius
    eye = r * np.array([np.cos(el) * np.cos(azimuth),
                        np.cos(el) * np.sin(azimuth),
                        np.sin(el)])
    return look_at(eye)


def default_intrinsics(image_size: int = 64, focal: float = None) -> vf.Intrinsics:
    return vf.Intrinsics(f=focal if focal is not None else float(image_size),
                         W=image_size, H=image_size)


# ---------------------------------------------------------------------------
# ground-truth fields

_PALETTE = np.array([
    [0.95, 0.15, 0.10],
    [0.10, 0.55, 0.95],
    [0.15, 0.85, 0.20],
    [0.95, 0.80, 0.10],
    [0.80, 0.15, 0.85],
])


def _vertex_grid(resolution):
    nx, ny, nz = resolution
    axes = [np.linspace(WORLD_LO[i], WORLD_HI[i], (nx, ny, nz)[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def make_scene(kind: str, seed: int, resolution: int = 32,
               n_primitives: int = None) -> Scene:
    """Deterministic ground-truth scene with a few opaque colored primitives.

    ``blobs`` places smooth Gaussian density bumps (wide, photometrically
    distinct, friendly to pose refinement); ``boxes`` places hard-edged
    axis-aligned boxes.  The primitive count defaults to 2-5, seeded.
    """
    rng = np.random.default_rng([seed, 0xD1CE])
    if n_primitives is None:
        n_primitives = int(rng.integers(2, 6))
    res = (resolution, resolution, resolution)
    fld = vf.VoxelField(res, (WORLD_LO, WORLD_HI))
    pts = _vertex_grid(res)

    colors = _PALETTE[rng.permutation(len(_PALETTE))[:max(n_primitives, 1)]]
    if n_primitives > len(_PALETTE):
        extra = rng.random((n_primitives - len(_PALETTE), 3))
        colors = np.vstack([colors, extra])

    density = np.zeros(res)
    color_num = np.zeros(res + (3,))
    if kind == "blobs":
        # peak densities ~10 are already opaque across a blob-sized chord and
        # keep the training dynamics well conditioned
        for i in range(n_primitives):
            center = rng.uniform(-0.5, 0.5, 3)
            width = rng.uniform(0.24, 0.38)
            amp = rng.uniform(8.0, 14.0)
            d2 = np.sum((pts - center) ** 2, axis=-1)
            contrib = amp * np.exp(-d2 / (2.0 * width**2))
            density += contrib
            color_num += contrib[..., None] * colors[i]
    elif kind == "boxes":
        for i in range(n_primitives):
            center = rng.uniform(-0.45, 0.45, 3)
            half = rng.uniform(0.18, 0.32, 3)
            inside = np.all(np.abs(pts - center) <= half, axis=-1)
            contrib = 25.0 * inside
            density = np.maximum(density, contrib)
            color_num[inside] = 25.0 * colors[i]
    else:
        raise ValueError(f"unknown scene kind: {kind!r}")

    fld.density[...] = density
    safe = np.maximum(density, 1e-12)
    fld.color[...] = np.clip(color_num / safe[..., None], 0.0, 1.0)
    vf.project_params(fld.params, fld.n_cells)
    return Scene(fld, vf.RenderOptions())


# ---------------------------------------------------------------------------
# trajectories and datasets

def render_views(scene: Scene, poses, K: vf.Intrinsics):
    """Render RGB/depth/opacity stacks for world-frame poses (midpoint rule)."""
    n = len(poses)
    rgb = np.empty((n, K.H, K.W, 3))
    depth = np.empty((n, K.H, K.W))
    acc = np.empty((n, K.H, K.W))
    for i, p in enumerate(poses):
        rgb[i], depth[i], acc[i] = vf.render_image(scene.gt_field, p, K, scene.render)
    return rgb, depth, acc


def make_trajectories(scene: Scene, n_agents: int, overlap_pct: float,
                      images_per_agent: int, offsets=None, seed: int = 0,
                      intrinsics: vf.Intrinsics = None,
                      alpha_range=ALPHA_RANGE, beta_fraction=BETA_FRACTION,
                      azimuth_jitter: float = 0.15):
    """Synthesize one private dataset per agent.

    Cameras sit on the viewing circle; agent ``i`` owns a sector of
    ``360/n`` degrees centered at ``360*i/n``, widened by ``overlap_pct``
    percent.  The first agent is the reference: its offset is forced to the
    identity so the global frame coincides with the world frame.  Returns a
    list of :class:`AgentDataset`.
    """
    if not (0.0 <= overlap_pct < 100.0):
        raise ValueError("overlap_pct must lie in [0, 100)")
    if n_agents < 1:
        raise ValueError("need at least one agent")
    if images_per_agent < 1:
        raise ValueError("need at least one image per agent")
    K = intrinsics if intrinsics is not None else default_intrinsics()

    if offsets is None:
        offsets = [RelativePose.identity() for _ in range(n_agents)]
    offsets = [o.copy() for o in offsets]
    if len(offsets) != n_agents:
        raise ValueError("need one offset per agent")
    offsets[0] = RelativePose.identity()

    sector = 2.0 * np.pi / n_agents
    span = sector if n_agents == 1 else sector * (1.0 + overlap_pct / 100.0)
    spacing = span / images_per_agent
    if spacing < np.deg2rad(0.1):
        raise ValueError("sector too narrow for the requested image count")

    rng = np.random.default_rng([seed, 0xCA11])
    beta_half = beta_fraction * scene.diameter / 2.0

    datasets = []
    for i in range(n_agents):
        center = sector * i
        lo = center - span / 2.0
        az = lo + spacing * (np.arange(images_per_agent) + 0.5)
        az = az + rng.uniform(-azimuth_jitter, azimuth_jitter, images_per_agent) * spacing
        el = scene.camera_elevation_deg + rng.uniform(-4.0, 4.0, images_per_agent)

        world_poses = [circle_pose(scene, a, e) for a, e in zip(az, el)]
        images, depth, acc = render_views(scene, world_poses, K)

        alpha = rng.uniform(alpha_range[0], alpha_range[1], images_per_agent)
        beta = rng.uniform(-beta_half, beta_half, images_per_agent)
        mono = alpha[:, None, None] * depth + beta[:, None, None]
        valid = acc > DEPTH_VALID_OPACITY

        T = offsets[i]
        T_inv = inverse(T)
        local_poses = [LocalPose(T_inv.rotation() @ p.R,
                                 T_inv.rotation() @ p.t + T_inv.trans)
                       for p in world_poses]

        datasets.append(AgentDataset(
            images=images, mono_depth=mono, depth_valid=valid,
            local_poses=local_poses, gt_relative_pose=T.copy(),
            gt_distortions=DistortionSet(alpha, beta), intrinsics=K,
            meta={"azimuth_lo": float(lo), "azimuth_hi": float(lo + span),
                  "azimuths": az.tolist(), "sector_center": float(center)},
        ))
    return datasets


def make_eval_views(scene: Scene, n_views: int = 16,
                    intrinsics: vf.Intrinsics = None):
    """Held-out world-frame poses spread uniformly around the circle.

    Azimuths are offset by a half step plus a small irrational shift so they
    never coincide with generated training views.
    """
    K = intrinsics if intrinsics is not None else default_intrinsics()
    az = 2.0 * np.pi * (np.arange(n_views) + 0.5 + 0.123) / n_views
    poses = [circle_pose(scene, a) for a in az]
    images, depth, acc = render_views(scene, poses, K)
    return poses, images


def observed_cells(scene: Scene, dataset: AgentDataset, pixel_stride: int = 4):
    """Boolean mask over grid cells touched by the agent's (world-frame) rays.

    Used to quantify how much of the scene two agents both observe.
    """
    fld = scene.gt_field
    nx, ny, nz = fld.resolution
    mask = np.zeros(nx * ny * nz, dtype=bool)
    K = dataset.intrinsics
    opts = scene.render
    T = dataset.gt_relative_pose
    for pose in dataset.local_poses:
        world = compose_global(T, pose)
        o, d = vf.camera_rays(world, K)
        d = d.reshape(K.H, K.W, 3)[::pixel_stride, ::pixel_stride].reshape(-1, 3)
        ts = np.linspace(opts.t_near, opts.t_far, opts.n_samples)
        pts = o[None, None, :] + ts[None, :, None] * d[:, None, :]
        pts = pts.reshape(-1, 3)
        inb = np.all((pts >= fld.lo) & (pts <= fld.hi), axis=-1)
        if not np.any(inb):
            continue
        g = (pts[inb] - fld.lo) / (fld.hi - fld.lo) * (np.array([nx, ny, nz]) - 1.0)
        idx = np.minimum(g.astype(np.int64), np.array([nx - 2, ny - 2, nz - 2]))
        flat = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
        mask[flat] = True
    return mask


# ---------------------------------------------------------------------------
# centralized oracle

def initial_params(template: vf.VoxelField, density: float = 0.1,
                   grey: float = 0.5) -> np.ndarray:
    """Starting parameters: faint uniform fog with mid-grey color.

    An all-zero field is a stationary point of the photometric loss (zero
    density kills every rendering weight), so training starts from a small
    uniform density instead.
    """
    f = vf.VoxelField.uniform(template.resolution, template.bounds,
                              density=density, rgb=(grey, grey, grey))
    return f.flatten()


def centralized_baseline(scene: Scene, datasets, cfg, eval_views=None,
                         init: np.ndarray = None):
    """Train one field on the union of all data with known (global) poses.

    Runs ``cfg.rounds * cfg.steps_per_round`` plain gradient steps on the
    photometric loss only, with the same learning rate and batch size as the
    distributed runs.  Returns the trained field and a metrics dict with the
    mean held-out PSNR.
    """
    from .field import RayBatch
    from .pose import DistortionSet as DS

    K = datasets[0].intrinsics
    hw = K.H * K.W
    origins, dirs, rgbs = [], [], []
    for ds in datasets:
        for m, pose in enumerate(ds.local_poses):
            world = compose_global(ds.gt_relative_pose, pose)
            o, d = vf.camera_rays(world, K)
            origins.append(np.broadcast_to(o, (hw, 3)))
            dirs.append(d)
            rgbs.append(ds.images[m].reshape(hw, 3))
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    rgbs = np.concatenate(rgbs)
    n_pix = origins.shape[0]

    template = scene.gt_field
    theta = initial_params(template) if init is None else np.array(init, dtype=float)
    identity = RelativePose.identity()
    psi = DS.identity(1)
    rng = np.random.default_rng([cfg.seed, 0xBA5E])
    total_steps = cfg.rounds * cfg.steps_per_round
    for _ in range(total_steps):
        sel = rng.integers(0, n_pix, cfg.batch_size)
        batch = RayBatch(origins=origins[sel], dirs=dirs[sel], rgb=rgbs[sel],
                         depth=np.zeros(cfg.batch_size),
                         image_index=np.zeros(cfg.batch_size, dtype=int),
                         depth_valid=np.zeros(cfg.batch_size, dtype=bool),
                         jitter=rng.random((cfg.batch_size, scene.render.n_samples)))
        field = template.from_params(theta)
        loss, grad = vf.loss_and_grad_field(field, batch, identity, psi, 0.0,
                                            scene.render)
        if not np.isfinite(loss):
            raise FloatingPointError("baseline training diverged")
        theta = vf.project_params(theta - cfg.lr * grad, template.n_cells)

    trained = template.from_params(theta)
    metrics = {}
    if eval_views is not None:
        poses, gt_images = eval_views
        vals = []
        for pose, gt in zip(poses, gt_images):
            img, _, _ = vf.render_image(trained, pose, K, scene.render)
            vals.append(psnr(img, gt))
        metrics["psnr_per_view"] = vals
        metrics["psnr"] = float(np.mean(vals))
    return trained, metrics


# ---------------------------------------------------------------------------
# persistence

MANIFEST_NAME = "manifest.json"


def save_datasets(dirpath, datasets) -> None:
    """Persist datasets as a manifest plus flat little-endian binary arrays.

    Images and depth maps are float32, row-major; validity masks are uint8.
    Poses are stored as rotation rows plus translations, relative poses as
    (phi, trans) pairs.
    """
    os.makedirs(dirpath, exist_ok=True)
    manifest = {"version": 1, "n_agents": len(datasets), "agents": []}
    for i, ds in enumerate(datasets, start=1):
        K = ds.intrinsics
        entry = {
            "id": i,
            "n_images": ds.n_images,
            "intrinsics": {"f": K.f, "W": K.W, "H": K.H},
            "gt_relative_pose": {"phi": ds.gt_relative_pose.phi.tolist(),
                                 "trans": ds.gt_relative_pose.trans.tolist()},
            "gt_distortions": {"alpha": ds.gt_distortions.alpha.tolist(),
                               "beta": ds.gt_distortions.beta.tolist()},
            "local_poses": [{"R": p.R.reshape(-1).tolist(), "t": p.t.tolist()}
                            for p in ds.local_poses],
            "meta": ds.meta,
            "files": {
                "images": f"agent{i:02d}_images.f32",
                "depth": f"agent{i:02d}_depth.f32",
                "valid": f"agent{i:02d}_valid.u8",
            },
        }
        manifest["agents"].append(entry)
        ds.images.astype("<f4").tofile(os.path.join(dirpath, entry["files"]["images"]))
        ds.mono_depth.astype("<f4").tofile(os.path.join(dirpath, entry["files"]["depth"]))
        ds.depth_valid.astype(np.uint8).tofile(os.path.join(dirpath, entry["files"]["valid"]))
    with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_datasets(dirpath):
    """Inverse of :func:`save_datasets` (images come back as float64)."""
    with open(os.path.join(dirpath, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    datasets = []
    for entry in manifest["agents"]:
        ki = entry["intrinsics"]
        K = vf.Intrinsics(ki["f"], ki["W"], ki["H"])
        m = entry["n_images"]
        shape_rgb = (m, K.H, K.W, 3)
        shape_map = (m, K.H, K.W)
        images = np.fromfile(os.path.join(dirpath, entry["files"]["images"]),
                             dtype="<f4").reshape(shape_rgb).astype(float)
        depth = np.fromfile(os.path.join(dirpath, entry["files"]["depth"]),
                            dtype="<f4").reshape(shape_map).astype(float)
        valid = np.fromfile(os.path.join(dirpath, entry["files"]["valid"]),
                            dtype=np.uint8).reshape(shape_map).astype(bool)
        poses = [LocalPose(np.array(p["R"]).reshape(3, 3), np.array(p["t"]))
                 for p in entry["local_poses"]]
        rel = entry["gt_relative_pose"]
        dist = entry["gt_distortions"]
        datasets.append(AgentDataset(
            images=images, mono_depth=depth, depth_valid=valid,
            local_poses=poses,
            gt_relative_pose=RelativePose(rel["phi"], rel["trans"]),
            gt_distortions=DistortionSet(dist["alpha"], dist["beta"]),
            intrinsics=K, meta=entry.get("meta", {}),
        ))
    return datasets
