"""Deterministic synthetic scenes, trajectories and rendered sequences.

Scenes are view-consistent by construction: a textured surface lives in the
world frame (a plane or a gently varying "wall" heightfield z = h(x, y)) and
every rendered pixel evaluates the same procedural texture at its world
intersection point. Trajectories are translation-only (the camera keeps
facing the wall), so straight, square-loop and circle shapes all keep the
surface in view; rotations enter through odometry noise and through the
pose-perturbation tests built on top of these renders.

Everything is a pure function of (spec, seed): lattice noise is backed by
integer hashing, so renders are bit-identical across runs.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, PoseSE3, backproject_rays, se3_exp

_FIXED_POINT_ITERS = 60


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "heightfield"  # "heightfield" or "plane"
    depth_range: tuple = (4.0, 12.0)  # wall distance band, heightfield only
    plane_normal: tuple = (0.0, 0.0, 1.0)
    plane_distance: float = 5.0
    texture_octaves: int = 4
    texture_scale: float = 2.0  # meters, coarsest octave
    texture_contrast: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("heightfield", "plane"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        lo, hi = self.depth_range
        if not (0 < lo < hi):
            raise ValueError("depth_range must be positive and increasing")
        if self.texture_octaves < 1:
            raise ValueError("texture_octaves must be >= 1")


@dataclass(frozen=True)
class TrajectorySpec:
    shape: str = "straight"  # "straight", "square-loop" or "circle"
    step_length: float = 0.05
    steps: int = 40
    sigma_rot_deg: float = 0.0
    sigma_trans_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.shape not in ("straight", "square-loop", "circle"):
            raise ValueError(f"unknown trajectory shape {self.shape!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.shape == "square-loop" and self.steps % 4 != 0:
            raise ValueError("square-loop needs a multiple of 4 steps")
        if self.sigma_rot_deg < 0 or self.sigma_trans_frac < 0:
            raise ValueError("noise sigmas must be non-negative")


def default_intrinsics(width=640, height=480):
    """fx = fy = width/2, principal point at the raster center."""
    return Intrinsics(
        fx=width / 2.0,
        fy=width / 2.0,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )


def _hash01(ix, iy, salt):
    # splitmix64-style mixing on the integer lattice; uint64 wraps by design
    with np.errstate(over="ignore"):
        h = ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.int64).astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
        h += np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return h.astype(np.float64) / float(2**64)


def _value_noise(x, y, salt):
    ix = np.floor(x)
    iy = np.floor(y)
    fx = x - ix
    fy = y - iy
    i = ix.astype(np.int64)
    j = iy.astype(np.int64)
    v00 = _hash01(i, j, salt)
    v10 = _hash01(i + 1, j, salt)
    v01 = _hash01(i, j + 1, salt)
    v11 = _hash01(i + 1, j + 1, salt)
    return (
        (1 - fx) * (1 - fy) * v00
        + fx * (1 - fy) * v10
        + (1 - fx) * fy * v01
        + fx * fy * v11
    )


def texture_at(scene, x, y):
    """Band-limited texture in [0, 1], evaluated at world (x, y)."""
    total = np.zeros_like(np.asarray(x, dtype=float))
    weight = 0.0
    for octave in range(scene.texture_octaves):
        scale = scene.texture_scale / (2.0**octave)
        amp = 0.5**octave
        salt = (scene.seed * 1000003 + 7919 * octave + 13) & 0xFFFFFFFFFFFFFFFF
        total = total + amp * _value_noise(x / scale, y / scale, salt)
        weight += amp
    field = total / weight
    out = 0.5 + scene.texture_contrast * (field - 0.5)
    return np.clip(out, 0.0, 1.0)


def _height_at(scene, x, y):
    """Wall distance z = h(x, y); gentle slopes keep ray marching contractive."""
    lo, hi = scene.depth_range
    mid = 0.5 * (lo + hi)
    amp = 0.425 * (hi - lo)
    salt0 = (scene.seed * 1000003 + 104729) & 0xFFFFFFFFFFFFFFFF
    salt1 = (scene.seed * 1000003 + 1299709) & 0xFFFFFFFFFFFFFFFF
    f = (2.0 * _value_noise(x / 24.0, y / 24.0, salt0) - 1.0) * (2.0 / 3.0) + (
        2.0 * _value_noise(x / 12.0, y / 12.0, salt1) - 1.0
    ) * (1.0 / 3.0)
    return mid + amp * f


def render_view(scene, K, pose):
    """Render (image, depth) seen from pose (world <- camera).

    Rays are intersected with the surface analytically (plane) or by a
    fixed-point iteration that converges to machine precision for the
    slope-bounded heightfields generated here. Pixels whose ray misses the
    surface get depth 0 (invalid) and intensity 0.
    """
    rays_cam = backproject_rays(K)
    dirs = rays_cam @ pose.rotation.T
    origin = pose.translation

    if scene.kind == "plane":
        n = np.asarray(scene.plane_normal, dtype=float)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        num = scene.plane_distance - origin @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = num / denom
        valid = (np.abs(denom) > 1e-12) & (s > 1e-6)
    else:
        dz = dirs[..., 2]
        valid = dz > 0.05  # camera must roughly face the wall
        dzsafe = np.where(valid, dz, 1.0)
        s = np.full(dirs.shape[:2], (_mid_depth(scene) - origin[2]))
        s = s / dzsafe
        for _ in range(_FIXED_POINT_ITERS):
            x = origin[0] + s * dirs[..., 0]
            y = origin[1] + s * dirs[..., 1]
            s = (_height_at(scene, x, y) - origin[2]) / dzsafe
        valid &= s > 1e-6

    ssafe = np.where(valid, s, 1.0)
    hit_x = origin[0] + ssafe * dirs[..., 0]
    hit_y = origin[1] + ssafe * dirs[..., 1]
    image = np.where(valid, texture_at(scene, hit_x, hit_y), 0.0)
    depth = np.where(valid, ssafe, 0.0)
    return image, depth


def _mid_depth(scene):
    lo, hi = scene.depth_range
    return 0.5 * (lo + hi)


def _positions(spec):
    s = spec.step_length
    n = spec.steps
    pos = np.zeros((n + 1, 3))
    if spec.shape == "straight":
        pos[:, 0] = np.arange(n + 1) * s
    elif spec.shape == "square-loop":
        side = n // 4
        for i in range(n + 1):
            k, r = divmod(i % n, side) if i < n else (0, 0)
            if i == n:
                continue  # exact closure: stays at the origin row
            if k == 0:
                pos[i] = (r * s, 0.0, 0.0)
            elif k == 1:
                pos[i] = (side * s, r * s, 0.0)
            elif k == 2:
                pos[i] = ((side - r) * s, side * s, 0.0)
            else:
                pos[i] = (0.0, (side - r) * s, 0.0)
    else:  # circle, exact revisit via the modular angle
        radius = s * n / (2.0 * np.pi)
        theta = 2.0 * np.pi * (np.arange(n + 1) % n) / n
        pos[:, 0] = radius * (np.cos(theta) - 1.0)
        pos[:, 1] = radius * np.sin(theta)
    return pos


def generate_trajectory(spec):
    """True poses (world <- camera) plus true and noise-perturbed step poses.

    Returns (poses, rel_true, rel_noisy); rel[i] maps frame i+1 into frame i.
    With zero sigmas rel_noisy equals rel_true exactly.
    """
    pos = _positions(spec)
    poses = [PoseSE3(np.eye(3), p) for p in pos]
    rel_true = [
        poses[i].inverse().compose(poses[i + 1]) for i in range(spec.steps)
    ]
    rng = np.random.default_rng(spec.seed)
    sr = np.deg2rad(spec.sigma_rot_deg)
    st = spec.sigma_trans_frac * spec.step_length
    rel_noisy = []
    for rel in rel_true:
        if sr == 0.0 and st == 0.0:
            rel_noisy.append(rel.copy())
            continue
        w = rng.normal(0.0, sr, 3) if sr > 0 else np.zeros(3)
        v = rng.normal(0.0, st, 3) if st > 0 else np.zeros(3)
        rel_noisy.append(se3_exp(np.concatenate([w, v])).compose(rel))
    return poses, rel_true, rel_noisy


def generate_sequence(scene, trajectory, K):
    """Render a full sequence: (images, depths, true poses, noisy odometry)."""
    poses, _, rel_noisy = generate_trajectory(trajectory)
    images = []
    depths = []
    for pose in poses:
        img, dep = render_view(scene, K, pose)
        images.append(img)
        depths.append(dep)
    return images, depths, poses, rel_noisy


def save_dataset(out_dir, scene, trajectory, K, frame_hz=10.0):
    """Materialize a rendered sequence in the on-disk dataset layout.

    Writes raw 16-bit images, millimeter-quantized depth maps, a manifest and
    the ground-truth trajectory, exactly as the pipeline consumes them.
    """
    from . import dataio

    images, depths, poses, _ = generate_sequence(scene, trajectory, K)
    timestamps = [i / frame_hz for i in range(len(images))]
    raw = [np.round(img * 65535.0).astype(np.uint16) for img in images]
    return dataio.write_dataset(out_dir, raw, depths, timestamps, K, poses)
