"""Pinhole geometry, SE(3) algebra, depth-based projection and inverse warping.

Conventions used throughout the package:

- Gray images are float64 arrays of shape (height, width) with values in
  [0, 1]. Pixel (u, v) means column u / row v and sits at continuous
  coordinate (u, v) exactly (no half-pixel offset).
- Depth maps share the image shape; a pixel is valid iff its depth is finite
  and > 0. Invalid pixels are stored as 0.
- A PoseSE3 maps points from its source frame into its destination frame,
  X_dst = R @ X_src + t. The warp pose maps target-frame points into the
  source frame.
- Twists are 6-vectors [wx, wy, wz, vx, vy, vz]: rotational part first
  (radians), translational part second (meters). Pose perturbations are
  left-multiplicative: T <- se3_exp(xi) @ T.
"""

from dataclasses import dataclass

import numpy as np

# Transformed depths at or below this are treated as behind the camera.
Z_EPS = 1e-9

# se3_log refuses rotations this close to pi, where the axis is ill-conditioned.
LOG_ANGLE_LIMIT = np.pi - 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width):
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")

    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


class PoseSE3:
    """Rigid transform: 3x3 rotation plus translation vector (meters)."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        rotation = np.asarray(rotation, dtype=float)
        translation = np.asarray(translation, dtype=float).reshape(3)
        if rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValueError("pose entries must be finite")
        self.rotation = rotation
        self.translation = translation

    @staticmethod
    def identity():
        return PoseSE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T):
        T = np.asarray(T, dtype=float)
        if T.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        return PoseSE3(T[:3, :3], T[:3, 3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other):
        """self applied after other: (self * other)(x) = self(other(x))."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points):
        """Transform one point (3,) or many points (..., 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def copy(self):
        return PoseSE3(self.rotation.copy(), self.translation.copy())

    def __repr__(self):
        return f"PoseSE3(t={self.translation}, R=\n{self.rotation})"


def so3_hat(w):
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def rotation_angle(R):
    """Geodesic rotation angle in radians, in [0, pi]."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _exp_coefficients(theta):
    # A = sin/t, B = (1-cos)/t^2, C = (t-sin)/t^3, with series below 1e-8.
    if theta < 1e-8:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
        c = 1.0 / 6.0 - t2 / 120.0
    else:
        t2 = theta * theta
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / t2
        c = (theta - np.sin(theta)) / (t2 * theta)
    return a, b, c


def se3_exp(xi):
    """Exponential map se(3) -> SE(3), twist ordered [w, v]."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    K = so3_hat(w)
    K2 = K @ K
    a, b, c = _exp_coefficients(theta)
    R = np.eye(3) + a * K + b * K2
    V = np.eye(3) + b * K + c * K2
    return PoseSE3(R, V @ v)


def se3_log(T):
    """Logarithm map SE(3) -> se(3); raises for rotations within 1e-6 of pi."""
    R = T.rotation
    theta = rotation_angle(R)
    if theta >= LOG_ANGLE_LIMIT:
        raise ValueError(f"se3_log: rotation angle {theta:.6f} too close to pi")
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        # theta/sin(theta) ~ 1 + t^2/6
        w = vee * (1.0 + theta * theta / 6.0)
    else:
        w = vee * (theta / np.sin(theta))
    K = so3_hat(w)
    K2 = K @ K
    if theta < 1e-8:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        a, b, _ = _exp_coefficients(theta)
        d = (1.0 - a / (2.0 * b)) / (theta * theta)
    Vinv = np.eye(3) - 0.5 * K + d * K2
    v = Vinv @ T.translation
    return np.concatenate([w, v])


@dataclass
class SampleResult:
    """One bilinear lookup: value, the four corner weights, validity flag.

    Weight order is (top-left, top-right, bottom-left, bottom-right), i.e.
    corners (i, j), (i+1, j), (i, j+1), (i+1, j+1) with i = floor(u),
    j = floor(v).
    """

    value: float
    weights: np.ndarray
    valid: bool


@dataclass
class WarpResult:
    """Inverse-warp output rasters, all shaped like the target image.

    synthesized: source image sampled where target pixels project.
    validity: pixels with valid target depth, positive transformed depth and
        all four bilinear neighbors (intensity and source depth) in bounds.
    projected_depth: z after transforming the target point into the source
        frame (0 where invalid).
    sampled_depth: source depth bilinearly interpolated at the projection
        (0 where invalid).
    """

    synthesized: np.ndarray
    validity: np.ndarray
    projected_depth: np.ndarray
    sampled_depth: np.ndarray


def depth_valid_mask(depth):
    return np.isfinite(depth) & (depth > 0)


def _check_raster(arr, K, name):
    if arr.shape != (K.height, K.width):
        raise ValueError(
            f"{name} shape {arr.shape} does not match intrinsics "
            f"({K.height}, {K.width})"
        )


def pixel_grid(K):
    """Column/row coordinate arrays (u, v), each (height, width)."""
    us, vs = np.meshgrid(
        np.arange(K.width, dtype=float), np.arange(K.height, dtype=float)
    )
    return us, vs


def backproject_rays(K):
    """Unit-depth camera rays [(u-cx)/fx, (v-cy)/fy, 1], shape (H, W, 3)."""
    us, vs = pixel_grid(K)
    return np.stack(
        [(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us)], axis=-1
    )


def project_pixel(p, depth, K, T):
    """Back-project pixel p at the given depth, transform by T, reproject.

    Returns ((u', v'), z') where z' is the transformed depth. z' <= Z_EPS
    marks the projection invalid (point at or behind the camera); the
    returned coordinates are NaN in that case.
    """
    if depth <= 0:
        raise ValueError("depth must be positive")
    u, v = float(p[0]), float(p[1])
    X = depth * np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    Xp = T.rotation @ X + T.translation
    z = float(Xp[2])
    if z <= Z_EPS:
        return np.array([np.nan, np.nan]), z
    return (
        np.array([K.fx * Xp[0] / z + K.cx, K.fy * Xp[1] / z + K.cy]),
        z,
    )


def bilinear_sample(image, p):
    """Sample image at continuous pixel p; valid iff all 4 neighbors exist."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    u, v = float(p[0]), float(p[1])
    if not (np.isfinite(u) and np.isfinite(v)):
        return SampleResult(0.0, np.zeros(4), False)
    i = int(np.floor(u))
    j = int(np.floor(v))
    if i < 0 or j < 0 or i + 1 > w - 1 or j + 1 > h - 1:
        return SampleResult(0.0, np.zeros(4), False)
    a = u - i
    b = v - j
    weights = np.array([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b])
    value = (
        weights[0] * image[j, i]
        + weights[1] * image[j, i + 1]
        + weights[2] * image[j + 1, i]
        + weights[3] * image[j + 1, i + 1]
    )
    return SampleResult(float(value), weights, True)


def bilinear_grid(image, u, v):
    """Vectorized bilinear lookup with in-cell gradients.

    Returns (value, d/du, d/dv, inbounds); outputs are 0 where out of bounds.
    """
    h, w = image.shape
    finite = np.isfinite(u) & np.isfinite(v)
    uf = np.where(finite, u, -1.0)
    vf = np.where(finite, v, -1.0)
    i0 = np.floor(uf).astype(np.int64)
    j0 = np.floor(vf).astype(np.int64)
    inb = finite & (i0 >= 0) & (j0 >= 0) & (i0 + 1 <= w - 1) & (j0 + 1 <= h - 1)
    i0c = np.clip(i0, 0, w - 2)
    j0c = np.clip(j0, 0, h - 2)
    a = np.where(inb, uf - i0c, 0.0)
    b = np.where(inb, vf - j0c, 0.0)
    f00 = image[j0c, i0c]
    f10 = image[j0c, i0c + 1]
    f01 = image[j0c + 1, i0c]
    f11 = image[j0c + 1, i0c + 1]
    value = (1 - a) * (1 - b) * f00 + a * (1 - b) * f10 + (1 - a) * b * f01 + a * b * f11
    du = (1 - b) * (f10 - f00) + b * (f11 - f01)
    dv = (1 - a) * (f01 - f00) + a * (f11 - f10)
    zero = np.zeros_like(value)
    return (
        np.where(inb, value, zero),
        np.where(inb, du, zero),
        np.where(inb, dv, zero),
        inb,
    )


def warp_projection(D_t, T, K):
    """Project every target pixel through its depth into the source frame.

    Returns (u', v', z', transformed points (H, W, 3), target-depth validity).
    Coordinates are safe to use only where z' > Z_EPS.
    """
    _check_raster(D_t, K, "D_t")
    rays = backproject_rays(K)
    valid_d = depth_valid_mask(D_t)
    X = rays * D_t[..., None]
    Xp = X @ T.rotation.T + T.translation
    z = Xp[..., 2]
    zsafe = np.where(z > Z_EPS, z, 1.0)
    u = K.fx * Xp[..., 0] / zsafe + K.cx
    v = K.fy * Xp[..., 1] / zsafe + K.cy
    return u, v, z, Xp, valid_d


def inverse_warp(I_s, D_t, T, K, D_s):
    """Warp the source image/depth into the target frame (one pose T: t -> s).

    Per target pixel: project through D_t and T, bilinearly sample I_s and
    D_s, and record the transformed depth. Validity needs a valid target
    depth, z' > 0, in-bounds sampling and four valid source-depth neighbors.
    """
    I_s = np.asarray(I_s, dtype=float)
    D_t = np.asarray(D_t, dtype=float)
    D_s = np.asarray(D_s, dtype=float)
    for name, arr in (("I_s", I_s), ("D_t", D_t), ("D_s", D_s)):
        _check_raster(arr, K, name)

    u, v, z, _, valid_d = warp_projection(D_t, T, K)
    ok_z = z > Z_EPS
    synth, _, _, inb_i = bilinear_grid(I_s, u, v)
    dsamp, _, _, inb_d = bilinear_grid(D_s, u, v)
    neighbors_valid = _four_neighbors_valid(D_s, u, v, inb_d)
    valid = valid_d & ok_z & inb_i & neighbors_valid
    return WarpResult(
        synthesized=np.where(valid, synth, 0.0),
        validity=valid,
        projected_depth=np.where(valid, z, 0.0),
        sampled_depth=np.where(valid, dsamp, 0.0),
    )


def _four_neighbors_valid(D_s, u, v, inb):
    h, w = D_s.shape
    good = depth_valid_mask(D_s)
    uf = np.where(inb, u, 0.0)
    vf = np.where(inb, v, 0.0)
    i0 = np.clip(np.floor(uf).astype(np.int64), 0, w - 2)
    j0 = np.clip(np.floor(vf).astype(np.int64), 0, h - 2)
    all4 = (
        good[j0, i0] & good[j0, i0 + 1] & good[j0 + 1, i0] & good[j0 + 1, i0 + 1]
    )
    return inb & all4


def backproject_depth(D, K, T_world):
    """One world-frame point per valid depth pixel, row-major order, (N, 3)."""
    D = np.asarray(D, dtype=float)
    _check_raster(D, K, "D")
    valid = depth_valid_mask(D)
    rays = backproject_rays(K)
    pts_cam = rays[valid] * D[valid][:, None]
    return T_world.apply(pts_cam)
