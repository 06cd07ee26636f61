"""Trajectory and depth evaluation: ATE, rotational RPE, depth metrics.

Trajectories are ordered (timestamp, PoseSE3) sequences. Monocular estimates
are compared after a least-squares similarity (or rigid) alignment of the
positions; relative-pose error cancels any global transform by construction.
Trajectory files use the TUM line format `timestamp tx ty tz qx qy qz qw`.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import EmptyResultError, InputError
from .geometry import PoseSE3, rotation_angle

DEFAULT_MAX_TDIFF = 0.05  # half the 10 Hz frame period


@dataclass
class DepthEvalReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    a1: float
    a2: float
    a3: float


def validate_trajectory(traj):
    times = [t for t, _ in traj]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("timestamps must be strictly increasing")
    return traj


def associate(estimate, reference, max_tdiff=DEFAULT_MAX_TDIFF):
    """Greedy nearest-timestamp pairing; each pose is matched at most once.

    Returns (pairs, n_dropped_estimate, n_dropped_reference) with pairs as
    (estimate_index, reference_index) sorted by estimate time.
    """
    cands = []
    for i, (te, _) in enumerate(estimate):
        for j, (tr, _) in enumerate(reference):
            d = abs(te - tr)
            if d <= max_tdiff:
                cands.append((d, te, tr, i, j))
    cands.sort()
    used_e, used_r = set(), set()
    pairs = []
    for _, _, _, i, j in cands:
        if i in used_e or j in used_r:
            continue
        used_e.add(i)
        used_r.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs, len(estimate) - len(pairs), len(reference) - len(pairs)


def align_trajectories(estimate, reference, with_scale=False):
    """Least-squares alignment of estimate onto reference positions.

    Returns (aligned_estimate, (scale, rotation, translation)). Uses the
    closed-form similarity solution on matched positions; with_scale=False
    fixes the scale at 1. Collinear or coincident point sets are rejected.
    """
    if len(estimate) != len(reference):
        raise ValueError("trajectories must be associated (equal lengths)")
    if len(estimate) < 3:
        raise ValueError("need at least 3 correspondences")
    X = np.array([p.translation for _, p in estimate])
    Y = np.array([p.translation for _, p in reference])
    mx = X.mean(axis=0)
    my = Y.mean(axis=0)
    Xc = X - mx
    Yc = Y - my
    span = np.linalg.svd(Xc, compute_uv=False)
    if span[0] < 1e-12 or span[1] < 1e-9 * span[0]:
        raise ValueError("degenerate (coincident or collinear) point set")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_x = (Xc**2).sum() / len(X)
        scale = float(np.trace(np.diag(D) @ S) / var_x)
    else:
        scale = 1.0
    t = my - scale * R @ mx
    aligned = [
        (ts, PoseSE3(R @ p.rotation, scale * R @ p.translation + t))
        for ts, p in estimate
    ]
    return aligned, (scale, R, t)


def ate_rmse(estimate, reference):
    """Root-mean-square translational error over associated pose pairs."""
    if len(estimate) != len(reference) or not estimate:
        raise EmptyResultError("no associated poses")
    d = np.array(
        [p.translation - q.translation for (_, p), (_, q) in zip(estimate, reference)]
    )
    return float(np.sqrt((d**2).sum(axis=1).mean()))


def rpe_rotation(estimate, reference, delta=1):
    """Mean geodesic angle (degrees) between per-step relative rotations."""
    n = len(estimate)
    if len(reference) != n:
        raise ValueError("trajectories must be associated")
    if n <= delta:
        raise EmptyResultError(f"need more than delta={delta} poses")
    angles = []
    for i in range(n - delta):
        p_rel = estimate[i][1].inverse().compose(estimate[i + delta][1])
        q_rel = reference[i][1].inverse().compose(reference[i + delta][1])
        err = q_rel.inverse().compose(p_rel)
        angles.append(rotation_angle(err.rotation))
    return float(np.rad2deg(np.mean(angles)))


def depth_metrics(pred, gt, median_scale=True, min_d=0.5, max_d=80.0):
    """Table-style depth metrics over pixels with valid in-range ground truth.

    abs_rel = mean |p-g|/g, sq_rel = mean (p-g)^2/g, rmse, and threshold
    accuracies a_k = fraction with max(p/g, g/p) < 1.25^k. median_scale
    rescales pred by median(gt)/median(pred) first.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError("depth shapes must match")
    valid = np.isfinite(gt) & (gt >= min_d) & (gt <= max_d)
    valid &= np.isfinite(pred) & (pred > 0)
    if not valid.any():
        raise EmptyResultError("no valid depth pixels to evaluate")
    p = pred[valid]
    g = gt[valid]
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    ratio = np.maximum(p / g, g / p)
    return DepthEvalReport(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25**2)),
        a3=float(np.mean(ratio < 1.25**3)),
    )


def read_tum(path):
    """Parse a TUM trajectory file; '#' lines are comments."""
    traj = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise InputError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
            try:
                vals = [float(x) for x in fields]
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            R = Rotation.from_quat(vals[4:8]).as_matrix()
            traj.append((vals[0], PoseSE3(R, np.array(vals[1:4]))))
    return validate_trajectory(traj)


def write_tum(path, traj):
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in traj:
            q = Rotation.from_matrix(pose.rotation).as_quat()
            t = pose.translation
            fh.write(
                f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )
