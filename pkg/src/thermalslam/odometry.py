"""Frame-to-frame pose estimation by direct minimization over a pyramid.

Levenberg-Marquardt on the 6-dof twist of the warp pose, coarse to fine.
Each candidate step is exp(delta) @ T and is accepted only if it strictly
reduces the photometric + geometric objective (see losses.pose_objective);
the smoothness term does not depend on pose and is skipped.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateOverlapError
from .geometry import Intrinsics, PoseSE3, se3_exp
from .losses import LossWeights, pose_objective

_DAMPING_MAX = 1e12


@dataclass(frozen=True)
class OdometryParams:
    pyramid_levels: int = 4
    max_iterations: int = 50  # per level
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    convergence_tol: float = 1e-7
    min_valid_fraction: float = 0.25

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol <= 0 or self.damping_init <= 0:
            raise ValueError("tolerances must be positive")
        if not (0 < self.min_valid_fraction <= 1):
            raise ValueError("min_valid_fraction must lie in (0, 1]")


@dataclass
class OdometryResult:
    pose: PoseSE3
    final_loss: float
    iterations_used: int
    converged: bool
    valid_fraction: float
    loss_history: list = field(default_factory=list)  # accepted objective values


def build_pyramid(image, levels):
    """Level 0 is the input; each level halves (floor) via 2x2 box averaging."""
    image = np.asarray(image, dtype=float)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = image.shape
    if min(h, w) < 2 ** (levels - 1):
        raise ValueError(f"raster {image.shape} too small for {levels} levels")
    out = [image]
    for _ in range(levels - 1):
        cur = out[-1]
        h2, w2 = cur.shape[0] // 2, cur.shape[1] // 2
        blocks = cur[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2)
        out.append(blocks.mean(axis=(1, 3)))
    return out


def _depth_pyramid(depth, levels):
    # a coarse pixel is valid only if its whole 2x2 block is
    out = [np.asarray(depth, dtype=float)]
    for _ in range(levels - 1):
        cur = out[-1]
        h2, w2 = cur.shape[0] // 2, cur.shape[1] // 2
        blocks = cur[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2)
        good = np.isfinite(blocks) & (blocks > 0)
        allgood = good.all(axis=(1, 3))
        mean = blocks.mean(axis=(1, 3))
        out.append(np.where(allgood, mean, 0.0))
    return out


def _halve_intrinsics(K):
    # coarse coordinate u_c maps to fine u_f = 2 u_c + 0.5
    return Intrinsics(
        fx=K.fx / 2.0,
        fy=K.fy / 2.0,
        cx=(K.cx - 0.5) / 2.0,
        cy=(K.cy - 0.5) / 2.0,
        width=K.width // 2,
        height=K.height // 2,
    )


def estimate_relative_pose(
    I_t, I_s, D_t, D_s, K, params=OdometryParams(), init=None,
    weights=LossWeights(),
):
    """Estimate the warp pose T (target -> source) for an image pair.

    Runs damped Gauss-Newton coarsest-to-finest, warm-starting each level
    with the previous one. Raises DegenerateOverlapError when the final
    warp covers less than params.min_valid_fraction of the image.
    """
    I_t = np.asarray(I_t, dtype=float)
    I_s = np.asarray(I_s, dtype=float)
    if not (I_t.shape == I_s.shape == np.shape(D_t) == np.shape(D_s)):
        raise ValueError("image and depth shapes must all agree")
    T = init.copy() if init is not None else PoseSE3.identity()

    levels = params.pyramid_levels
    pyr_it = build_pyramid(I_t, levels)
    pyr_is = build_pyramid(I_s, levels)
    pyr_dt = _depth_pyramid(D_t, levels)
    pyr_ds = _depth_pyramid(D_s, levels)
    ks = [K]
    for _ in range(levels - 1):
        ks.append(_halve_intrinsics(ks[-1]))

    total_iters = 0
    converged = False
    history = []
    loss = None
    for lvl in range(levels - 1, -1, -1):
        it, is_, dt, ds, k = pyr_it[lvl], pyr_is[lvl], pyr_dt[lvl], pyr_ds[lvl], ks[lvl]
        loss, grad, hess, _ = pose_objective(
            it, is_, dt, ds, T, k, weights, derivatives=True
        )
        history.append(loss)
        lam = params.damping_init
        converged = False
        for _ in range(params.max_iterations):
            total_iters += 1
            damped = hess + lam * np.diag(np.maximum(np.diag(hess), 1e-12))
            try:
                delta = np.linalg.solve(damped, -grad)
            except np.linalg.LinAlgError:
                lam *= params.damping_up
                continue
            step = float(np.linalg.norm(delta))
            if step < params.convergence_tol:
                converged = True
                break
            candidate = se3_exp(delta).compose(T)
            new_loss, _ = pose_objective(it, is_, dt, ds, candidate, k, weights)
            if new_loss < loss:
                T = candidate
                loss, grad, hess, _ = pose_objective(
                    it, is_, dt, ds, T, k, weights, derivatives=True
                )
                history.append(loss)
                lam = max(lam * params.damping_down, 1e-12)
            else:
                lam *= params.damping_up
                if lam > _DAMPING_MAX:
                    break

    final_loss, valid_fraction = pose_objective(
        pyr_it[0], pyr_is[0], pyr_dt[0], pyr_ds[0], T, ks[0], weights
    )
    if valid_fraction < params.min_valid_fraction:
        raise DegenerateOverlapError(
            f"valid warp fraction {valid_fraction:.3f} below "
            f"{params.min_valid_fraction:.3f} at the finest level"
        )
    return OdometryResult(
        pose=T,
        final_loss=final_loss,
        iterations_used=total_iters,
        converged=converged,
        valid_fraction=valid_fraction,
        loss_history=history,
    )
