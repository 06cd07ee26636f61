"""Self-supervised photometric objective: loss terms, masks and gradients.

The total loss is

    l_total = l_rec + lambda_gc * l_gc + lambda_sm * l_sm

where l_rec blends a per-pixel L1 residual with an SSIM dissimilarity
(lambda_pm is the L1 weight), l_gc penalizes the relative difference between
the transformed target depth and the interpolated source depth, and l_sm is
an edge-aware smoothness term on the mean-normalized depth. Two masks shape
l_rec: the warp validity mask and a strict auto-mask (warped residual below
the unwarped residual) gate pixel inclusion, and the dynamic mask
m_sd = 1 - d_diff weights each included pixel.

Gradients are analytic. Pose gradients are taken with respect to a
left-multiplicative twist perturbation se3_exp(xi) @ T; depth gradients are
per-pixel. The binary masks are treated as locally constant (they are
piecewise constant in pose and depth); the SSIM term is differentiated
exactly through its window statistics.

SSIM uses a 3x3 uniform window with stabilizers C1 = 0.01^2, C2 = 0.03^2 on
unit dynamic range. Windows are renormalized at borders and, inside the
objective, over valid-warp pixels only.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import (
    Z_EPS,
    backproject_rays,
    bilinear_grid,
    depth_valid_mask,
    inverse_warp,
    warp_projection,
)

C1 = 0.01**2
C2 = 0.03**2

# IRLS floor used only when shaping Gauss-Newton Hessians.
_EPS_IRLS = 1e-4


@dataclass(frozen=True)
class LossWeights:
    lambda_pm: float = 0.15  # L1 share of the photometric term, in [0, 1]
    lambda_gc: float = 0.5
    lambda_sm: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.lambda_pm <= 1.0):
            raise ValueError("lambda_pm must lie in [0, 1]")
        if self.lambda_gc < 0 or self.lambda_sm < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class MaskStack:
    validity: np.ndarray  # bool, from the warp
    auto: np.ndarray  # bool, strict photometric improvement test
    dynamic: np.ndarray  # float in [0, 1], 1 - d_diff


@dataclass
class LossBreakdown:
    l_rec: float
    l_gc: float
    l_sm: float
    l_total: float
    valid_count: int


def _box3(a):
    p = np.pad(a, 1)
    return (
        p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
        + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
        + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]
    )


class _SsimCache:
    __slots__ = ("x", "y", "m", "n", "mu_x", "mu_y", "n1", "n2", "d1", "d2", "s")


def _ssim_forward(x, y, mask):
    """Masked-window SSIM map; windows renormalize over mask pixels."""
    m = mask.astype(float)
    n = _box3(m)
    good = n > 0
    nsafe = np.where(good, n, 1.0)
    mu_x = _box3(x * m) / nsafe
    mu_y = _box3(y * m) / nsafe
    sxx = _box3(x * x * m) / nsafe
    syy = _box3(y * y * m) / nsafe
    sxy = _box3(x * y * m) / nsafe
    var_x = sxx - mu_x * mu_x
    var_y = syy - mu_y * mu_y
    cov = sxy - mu_x * mu_y
    n1 = 2.0 * mu_x * mu_y + C1
    n2 = 2.0 * cov + C2
    d1 = mu_x * mu_x + mu_y * mu_y + C1
    d2 = var_x + var_y + C2
    s = np.where(good, (n1 * n2) / (d1 * d2), 0.0)
    cache = _SsimCache()
    cache.x, cache.y, cache.m, cache.n = x, y, m, nsafe
    cache.mu_x, cache.mu_y = mu_x, mu_y
    cache.n1, cache.n2, cache.d1, cache.d2, cache.s = n1, n2, d1, d2, s
    return s, cache


def _ssim_backprop_y(cache, g):
    """Adjoint of the SSIM map w.r.t. y: returns sum_p g[p] * dS[p]/dy[q]."""
    dd = cache.d1 * cache.d2
    a_mu = (
        2.0 * cache.mu_x * (cache.n2 - cache.n1) / dd
        - 2.0 * cache.mu_y * cache.s / cache.d1
        + 2.0 * cache.mu_y * cache.s / cache.d2
    )
    a_sxy = 2.0 * cache.n1 / dd
    a_syy = -cache.s / cache.d2
    t1 = _box3(g * a_mu / cache.n)
    t2 = _box3(g * a_sxy / cache.n)
    t3 = _box3(g * a_syy / cache.n)
    return cache.m * (t1 + cache.x * t2 + 2.0 * cache.y * t3)


def ssim_map(a, b, mask=None):
    """Per-pixel SSIM in [-1, 1] over a 3x3 uniform window.

    Border windows are renormalized; an optional boolean mask restricts the
    window statistics to masked pixels (unmasked outputs are 0).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    s, _ = _ssim_forward(a, b, mask)
    return s


def auto_mask(I_t, I_s, warped):
    """True exactly where the warped residual strictly beats the unwarped one."""
    I_t = np.asarray(I_t, dtype=float)
    I_s = np.asarray(I_s, dtype=float)
    return np.abs(I_t - warped.synthesized) < np.abs(I_t - I_s)


def geometric_consistency(warped):
    """Relative depth inconsistency |a - b| / (a + b) on valid pixels.

    Returns (l_gc, d_diff, m_sd): the mean of d_diff over the validity mask
    (0 where invalid) and the dynamic mask 1 - d_diff.
    """
    v = warped.validity
    a = warped.projected_depth
    b = warped.sampled_depth
    denom = np.where(v, a + b, 1.0)
    d_diff = np.where(v, np.abs(a - b) / denom, 0.0)
    nv = int(v.sum())
    l_gc = float(d_diff[v].sum() / nv) if nv else 0.0
    return l_gc, d_diff, 1.0 - d_diff


def photometric_loss(I_t, warped, mask, w=LossWeights()):
    """Masked mean of lambda_pm * L1 + (1 - lambda_pm)/2 * (1 - SSIM).

    Pixels where validity and the auto-mask both hold are averaged, each
    weighted by the dynamic mask; SSIM windows renormalize over validity.
    Returns 0 when no pixel qualifies.
    """
    I_t = np.asarray(I_t, dtype=float)
    if I_t.shape != warped.synthesized.shape:
        raise ValueError("image/warp shape mismatch")
    gate = mask.validity & mask.auto
    n = int(gate.sum())
    if n == 0:
        return 0.0
    pm = w.lambda_pm * np.abs(I_t - warped.synthesized)
    if w.lambda_pm < 1.0:
        s, _ = _ssim_forward(I_t, warped.synthesized, mask.validity)
        pm = pm + 0.5 * (1.0 - w.lambda_pm) * (1.0 - s)
    return float((mask.dynamic * pm)[gate].sum() / n)


def _smoothness_forward(D, I):
    valid = depth_valid_mask(D)
    nv = int(valid.sum())
    if nv == 0:
        return 0.0, None
    mu = float(D[valid].mean())
    wx = np.exp(-np.abs(I[:, 1:] - I[:, :-1]))
    wy = np.exp(-np.abs(I[1:, :] - I[:-1, :]))
    mx = valid[:, 1:] & valid[:, :-1]
    my = valid[1:, :] & valid[:-1, :]
    dx = np.where(mx, (D[:, 1:] - D[:, :-1]) / mu, 0.0)
    dy = np.where(my, (D[1:, :] - D[:-1, :]) / mu, 0.0)
    tx = wx * wx * dx * dx
    ty = wy * wy * dy * dy
    n_terms = int(mx.sum()) + int(my.sum())
    if n_terms == 0:
        return 0.0, None
    value = float((tx.sum() + ty.sum()) / n_terms)
    cache = (valid, nv, mu, wx, wy, mx, my, dx, dy, n_terms, value)
    return value, cache


def _smoothness_backward(cache):
    valid, nv, mu, wx, wy, mx, my, dx, dy, n_terms, value = cache
    grad = np.zeros(valid.shape)
    gx = 2.0 * wx * wx * dx * mx / (mu * n_terms)
    gy = 2.0 * wy * wy * dy * my / (mu * n_terms)
    grad[:, 1:] += gx
    grad[:, :-1] -= gx
    grad[1:, :] += gy
    grad[:-1, :] -= gy
    # the normalization depth mean couples every valid pixel
    grad[valid] += -2.0 * value / (mu * nv)
    return grad


def smoothness_loss(D_t, I_t):
    """Edge-weighted squared forward differences of depth / mean(depth).

    Per axis, each pair of valid neighbors contributes
    (exp(-|dI|) * d(D/mean D))^2; the result is the mean over all
    contributing pairs of both axes.
    """
    D_t = np.asarray(D_t, dtype=float)
    I_t = np.asarray(I_t, dtype=float)
    if D_t.shape != I_t.shape:
        raise ValueError("depth/image shape mismatch")
    value, _ = _smoothness_forward(D_t, I_t)
    return value


class _Evaluation:
    __slots__ = (
        "breakdown", "grad_twist", "grad_depth", "hessian",
        "valid_count", "valid_fraction",
    )


def _evaluate(
    I_t, I_s, D_t, D_s, T, K, w,
    *,
    use_auto_mask=True,
    include_smooth=True,
    need_grad=False,
    need_depth_grad=False,
    need_hessian=False,
):
    """Shared engine: loss breakdown plus optional analytic derivatives."""
    I_t = np.asarray(I_t, dtype=float)
    I_s = np.asarray(I_s, dtype=float)
    D_t = np.asarray(D_t, dtype=float)
    D_s = np.asarray(D_s, dtype=float)

    u, v, z, Xp, valid_d = warp_projection(D_t, T, K)
    ok_z = z > Z_EPS
    ihat, iu, iv, inb_i = bilinear_grid(I_s, u, v)
    dsamp, du, dv, inb_d = bilinear_grid(D_s, u, v)
    from .geometry import _four_neighbors_valid

    V = valid_d & ok_z & inb_i & _four_neighbors_valid(D_s, u, v, inb_d)
    ihat = np.where(V, ihat, 0.0)
    dsamp = np.where(V, dsamp, 0.0)
    zv = np.where(V, z, 0.0)
    n_valid = int(V.sum())

    r = I_t - ihat
    gate = V & (np.abs(r) < np.abs(I_t - I_s)) if use_auto_mask else V
    n_gate = int(gate.sum())

    denom = np.where(V, zv + dsamp, 1.0)
    sgn_ab = np.sign(zv - dsamp)
    ddiff = np.where(V, np.abs(zv - dsamp) / denom, 0.0)
    msd = 1.0 - ddiff

    lam = w.lambda_pm
    pm = lam * np.abs(r)
    ssim_cache = None
    if lam < 1.0:
        s, ssim_cache = _ssim_forward(I_t, ihat, V)
        pm = pm + 0.5 * (1.0 - lam) * (1.0 - s)
    l_rec = float((msd * pm)[gate].sum() / n_gate) if n_gate else 0.0
    l_gc = float(ddiff[V].sum() / n_valid) if n_valid else 0.0

    sm_cache = None
    l_sm = 0.0
    if include_smooth:
        l_sm, sm_cache = _smoothness_forward(D_t, I_t)

    out = _Evaluation()
    out.breakdown = LossBreakdown(
        l_rec=l_rec,
        l_gc=l_gc,
        l_sm=l_sm,
        l_total=l_rec + w.lambda_gc * l_gc + w.lambda_sm * l_sm,
        valid_count=n_valid,
    )
    out.valid_count = n_valid
    out.valid_fraction = n_valid / V.size
    out.grad_twist = None
    out.grad_depth = None
    out.hessian = None
    if not (need_grad or need_depth_grad or need_hessian):
        return out

    # --- backward pass -----------------------------------------------------
    gatef = gate.astype(float)
    Vf = V.astype(float)
    inv_gate = 1.0 / n_gate if n_gate else 0.0
    inv_valid = 1.0 / n_valid if n_valid else 0.0

    # coefficient of the loss w.r.t. the synthesized intensity
    c_ihat = -(lam * np.sign(r) * msd * gatef) * inv_gate
    if lam < 1.0 and n_gate:
        g_ssim = gatef * msd * (0.5 * (1.0 - lam) * inv_gate)
        c_ihat = c_ihat - _ssim_backprop_y(ssim_cache, g_ssim)

    # coefficient w.r.t. d_diff (dynamic-mask product rule + geometric term)
    c_ddiff = -(pm * gatef) * inv_gate + w.lambda_gc * Vf * inv_valid
    c_a = np.where(V, c_ddiff * (sgn_ab - ddiff) / denom, 0.0)
    c_b = np.where(V, c_ddiff * (-sgn_ab - ddiff) / denom, 0.0)

    zsafe = np.where(ok_z, z, 1.0)
    gu = np.stack(
        [K.fx / zsafe, np.zeros_like(z), -K.fx * Xp[..., 0] / (zsafe * zsafe)],
        axis=-1,
    )
    gv = np.stack(
        [np.zeros_like(z), K.fy / zsafe, -K.fy * Xp[..., 1] / (zsafe * zsafe)],
        axis=-1,
    )
    wu = c_ihat * iu + c_b * du
    wv = c_ihat * iv + c_b * dv
    # translational direction field; the rotational part is Xp x (that field)
    t3 = wu[..., None] * gu + wv[..., None] * gv
    t3[..., 2] += c_a
    t3 *= Vf[..., None]

    if need_grad:
        rot = _cross3(Xp, t3)
        out.grad_twist = np.concatenate(
            [rot.reshape(-1, 3).sum(axis=0), t3.reshape(-1, 3).sum(axis=0)]
        )

    if need_depth_grad:
        rays = backproject_rays(K)
        h = rays @ T.rotation.T
        du_dd = np.einsum("hwk,hwk->hw", gu, h)
        dv_dd = np.einsum("hwk,hwk->hw", gv, h)
        g_depth = Vf * (wu * du_dd + wv * dv_dd + c_a * h[..., 2])
        if include_smooth and sm_cache is not None:
            g_depth = g_depth + w.lambda_sm * _smoothness_backward(sm_cache)
        out.grad_depth = g_depth

    if need_hessian:
        out.hessian = _gauss_newton_hessian(
            V, Vf, msd, r, ddiff, sgn_ab, denom, iu, iv, du, dv,
            gu, gv, Xp, lam, w, inv_valid, ssim_cache,
        )
    return out


def _cross3(a, b):
    out = np.empty(np.broadcast(a, b).shape)
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def _six_vec(Xp, trans_field):
    return np.concatenate([_cross3(Xp, trans_field), trans_field], axis=-1)


def _weighted_outer(weight, J):
    return (J * weight[:, None]).T @ J


def _gauss_newton_hessian(
    V, Vf, msd, r, ddiff, sgn_ab, denom, iu, iv, du, dv,
    gu, gv, Xp, lam, w, inv_valid, ssim_cache,
):
    """IRLS-style Gauss-Newton 6x6 Hessian of the pose objective."""
    idx = V
    H = np.zeros((6, 6))
    weight_scale = inv_valid
    Xv = Xp[idx]
    guv = gu[idx]
    gvv = gv[idx]

    # L1 channel: residual r with derivative d(ihat)/dxi
    tI = iu[idx, None] * guv + iv[idx, None] * gvv
    JI = _six_vec(Xv, tI)
    if lam > 0.0:
        wl1 = lam * weight_scale * (msd[idx] / (np.abs(r[idx]) + _EPS_IRLS))
        H += _weighted_outer(wl1, JI)

    # geometric channel: signed relative depth difference
    tD = du[idx, None] * guv + dv[idx, None] * gvv
    e3 = np.zeros_like(tD)
    e3[:, 2] = 1.0
    fs = (sgn_ab * ddiff)[idx, None]  # signed relative depth difference
    tG = (e3 - tD - fs * (e3 + tD)) / denom[idx, None]
    JG = _six_vec(Xv, tG)
    wgc = w.lambda_gc * weight_scale / (ddiff[idx] + _EPS_IRLS)
    H += _weighted_outer(wgc, JG)

    # SSIM channel: per-pixel dS/dxi via box-filtered intensity Jacobians
    if lam < 1.0 and ssim_cache is not None:
        c = ssim_cache
        dd = c.d1 * c.d2
        a_mu = (
            2.0 * c.mu_x * (c.n2 - c.n1) / dd
            - 2.0 * c.mu_y * c.s / c.d1
            + 2.0 * c.mu_y * c.s / c.d2
        )
        a_sxy = 2.0 * c.n1 / dd
        a_syy = -c.s / c.d2
        shape = V.shape
        jk_img = np.zeros(shape)
        dS = np.empty_like(JI)
        for k in range(6):
            jk_img[idx] = JI[:, k]
            dS[:, k] = (
                (
                    a_mu * _box3(jk_img)
                    + a_sxy * _box3(c.x * jk_img)
                    + a_syy * _box3(2.0 * c.y * jk_img)
                )
                / c.n
            )[idx]
        wss = (
            0.5 * (1.0 - lam) * weight_scale
            * (msd[idx] / (np.abs(1.0 - c.s[idx]) + _EPS_IRLS))
        )
        H += _weighted_outer(wss, dS)
    return H


def total_loss(I_t, I_s, D_t, D_s, T, K, w=LossWeights()):
    """Full objective: inverse-warp, build the masks, combine all terms."""
    out = _evaluate(I_t, I_s, D_t, D_s, T, K, w)
    return out.breakdown


def loss_gradient(I_t, I_s, D_t, D_s, T, K, w=LossWeights()):
    """Analytic gradient of total_loss.

    Returns (d/dxi, d/dD): the 6-vector for a left-multiplicative twist
    perturbation of T and a per-pixel raster for the target depth.
    """
    out = _evaluate(
        I_t, I_s, D_t, D_s, T, K, w,
        need_grad=True, need_depth_grad=True,
    )
    return out.grad_twist, out.grad_depth


def pose_objective(I_t, I_s, D_t, D_s, T, K, w=LossWeights(), *, derivatives=False):
    """Pose-dependent objective used by direct odometry.

    Photometric term over the validity mask weighted by the dynamic mask
    (no auto-mask gate: at an identity initialization the strict inequality
    of the auto-mask empties the gate and freezes the optimizer), plus the
    geometric-consistency term. Smoothness is constant in pose and skipped.

    With derivatives=True returns (value, grad6, hess6x6, valid_fraction),
    otherwise (value, valid_fraction).
    """
    out = _evaluate(
        I_t, I_s, D_t, D_s, T, K, w,
        use_auto_mask=False,
        include_smooth=False,
        need_grad=derivatives,
        need_hessian=derivatives,
    )
    if derivatives:
        return out.breakdown.l_total, out.grad_twist, out.hessian, out.valid_fraction
    return out.breakdown.l_total, out.valid_fraction
