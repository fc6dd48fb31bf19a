"""Direct RGB-D tracking against a keyframe.

The cost is a photometric term over keyframe points plus ``lambda`` times a
geometric term comparing predicted and measured inverse depth (or depth),
both normalized by their variances and robustified with Geman-McClure IRLS.

Gain and bias convention: the current frame is modeled as
``I_f = a * I_k - b``, so the photometric residual of a keyframe point is
``r = a * I_k(u) - b - I_f(u')``.  A frame with intensities ``1.2 I - 10``
is recovered as ``a = 1.2, b = 10``.

The solver works on the keyframe-to-frame transform ``T_fk = X_f^-1 X_k``
(``X`` camera-to-world) and updates it inverse-compositionally,
``T_fk <- T_fk exp(xi)^-1``, which is the world-pose update
``X_f <- X_f exp(xi)`` seen from the keyframe side.  Photometric pose
Jacobians are therefore evaluated once per level on the keyframe image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .image import Frame, interpolate, interpolate_with_gradient
from .mapping import Keyframe, PointSet
from .se3 import PinholeIntrinsics, Pose, exp_se3, sigma_depth, sigma_inverse_depth

MODES = ("PS", "PD", "GIDS", "GIDD", "GIDD_FULL", "PS_GIDD", "PS_GDD")
MAD_SCALE = 1.482


class TrackingLostError(RuntimeError):
    """Too few residuals at the finest level or a non-finite cost."""

    def __init__(self, message: str, stats: ResidualStats | None = None):
        super().__init__(message)
        self.stats = stats


@dataclass(frozen=True)
class ResidualConfig:
    mode: str = "PS_GIDD"
    lam: float = 1.0
    robust_k: float = 2.0
    max_iterations: tuple[int, ...] = (20, 20, 10, 10)
    epsilon: float = 1e-6
    sigma_ph_init: float = 15.0
    sigma_ph_floor: float = 1.0
    mad_scale: float = MAD_SCALE
    min_residuals: int = 20
    max_halvings: int = 5
    cond_limit: float = 1e12
    damping: float = 1e-6
    depth_guard: float = 0.2

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown tracking mode {self.mode!r}; expected one of {MODES}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @property
    def photometric(self) -> bool:
        return self.mode in ("PS", "PD", "PS_GIDD", "PS_GDD")

    @property
    def geometric(self) -> bool:
        if self.mode in ("PS_GIDD", "PS_GDD"):
            return self.lam > 0
        return self.mode in ("GIDS", "GIDD", "GIDD_FULL")

    @property
    def depth_parametrization(self) -> bool:
        return self.mode == "PS_GDD"

    @property
    def n_params(self) -> int:
        return 8 if self.photometric else 6


@dataclass(frozen=True)
class TrackingState:
    pose: Pose  # camera-to-world of the tracked frame
    a: float = 1.0
    b: float = 0.0
    reference_id: int = -1
    iterations: tuple[int, ...] = ()
    converged: bool = False

    def __post_init__(self) -> None:
        if not self.a > 0:
            raise ValueError(f"gain must be positive, got {self.a}")
        if not -255.0 <= self.b <= 255.0:
            raise ValueError(f"brightness {self.b} outside [-255, 255]")


@dataclass
class ResidualStats:
    sigma_ph: tuple[float, ...]
    sigma_g: float
    inlier_fraction: float
    cost: float
    n_residuals: int
    iterations: tuple[int, ...] = ()
    level_costs: tuple[float, ...] = ()

    def as_dict(self) -> dict:
        return {
            "sigma_ph": list(self.sigma_ph), "sigma_g": self.sigma_g,
            "inlier_fraction": self.inlier_fraction, "cost": self.cost,
            "n_residuals": self.n_residuals, "iterations": list(self.iterations),
            "level_costs": list(self.level_costs),
        }


def geman_mcclure_weight(r: np.ndarray | float, sigma: np.ndarray | float, k: float = 2.0):
    """IRLS weight ``1 / (1 + (r/c)^2)^2`` with ``c = k * sigma``."""
    x = np.asarray(r, dtype=np.float64) / (k * np.asarray(sigma, dtype=np.float64))
    return 1.0 / np.square(1.0 + x * x)


def update_sigma_ph(residuals: np.ndarray, previous: float = 15.0, floor: float = 1.0, scale: float = MAD_SCALE) -> float:
    """``1.482 * MAD`` of raw photometric residuals, floored; ``previous`` if empty."""
    r = np.asarray(residuals, dtype=np.float64).ravel()
    r = r[np.isfinite(r)]
    if r.size == 0:
        return previous
    mad = float(np.median(np.abs(r - np.median(r))))
    return max(floor, scale * mad)


def _projection_jacobian(q: np.ndarray, intr: PinholeIntrinsics) -> np.ndarray:
    """``d pi / d q`` as ``(N, 2, 3)``."""
    z = q[:, 2]
    iz = 1.0 / z
    J = np.zeros((len(q), 2, 3))
    J[:, 0, 0] = intr.fx * iz
    J[:, 0, 2] = -intr.fx * q[:, 0] * iz * iz
    J[:, 1, 1] = intr.fy * iz
    J[:, 1, 2] = -intr.fy * q[:, 1] * iz * iz
    return J


def _point_twist_jacobian(p: np.ndarray) -> np.ndarray:
    """``d (exp(xi) p) / d xi`` at zero: ``[-[p]x, I]`` as ``(N, 3, 6)``."""
    n = len(p)
    J = np.zeros((n, 3, 6))
    J[:, 0, 1], J[:, 0, 2] = p[:, 2], -p[:, 1]
    J[:, 1, 0], J[:, 1, 2] = -p[:, 2], p[:, 0]
    J[:, 2, 0], J[:, 2, 1] = p[:, 1], -p[:, 0]
    J[:, :, 3:] = np.eye(3)
    return J


def photometric_template_jacobian(points: PointSet, intr: PinholeIntrinsics) -> np.ndarray:
    """Pose part of the photometric Jacobian at ``a = 1``, ``(N, 6)``.

    Uses the keyframe's central-difference gradient at each point's pixel.
    """
    if len(points) == 0:
        return np.zeros((0, 6))
    Jp = _projection_jacobian(points.points, intr)
    gJ = np.einsum("ni,nij->nj", points.grad, Jp)
    return np.einsum("nj,njk->nk", gJ, _point_twist_jacobian(points.points))


@dataclass
class ResidualSet:
    """Residuals, Jacobians and weights for one term; arrays span all points and
    ``valid`` marks the usable ones."""

    r: np.ndarray
    J: np.ndarray
    valid: np.ndarray
    sigma: np.ndarray
    weight: np.ndarray = field(default=None)

    @property
    def count(self) -> int:
        return int(self.valid.sum())


def eval_photometric(points: PointSet, J0: np.ndarray, image: np.ndarray, intr: PinholeIntrinsics,
                     T_fk: Pose, a: float, b: float, sigma_ph: float) -> ResidualSet:
    q = T_fk.apply(points.points) if len(points) else np.zeros((0, 3))
    front = q[:, 2] > 1e-6
    zs = np.where(front, q[:, 2], 1.0)
    u = intr.fx * q[:, 0] / zs + intr.cx
    v = intr.fy * q[:, 1] / zs + intr.cy
    vals, ok = interpolate(image, u, v)
    valid = ok & front
    r = a * points.intensity - b - vals
    J = np.empty((len(points), 8))
    J[:, :6] = a * J0
    J[:, 6] = points.intensity
    J[:, 7] = -1.0
    # keyframe inverse-depth noise moves the point along its ray; the keyframe
    # gradient stands in for the frame gradient, as in the template Jacobian
    sig = np.full(len(points), float(sigma_ph))
    if len(points):
        qs = np.where(front[:, None], q, np.array([0.0, 0.0, 1.0]))
        dq_drho = -(points.points @ T_fk.R.T) / np.maximum(points.rho, 1e-12)[:, None]
        duv_drho = np.einsum("nij,nj->ni", _projection_jacobian(qs, intr), dq_drho)
        dr_drho = np.einsum("ni,ni->n", points.grad, duv_drho)
        sig = np.sqrt(sig ** 2 + np.square(dr_drho * points.sigma))
    return ResidualSet(r, J, valid, sig)


def sample_depth_guarded(dmap: np.ndarray, u: np.ndarray, v: np.ndarray, guard: float = 0.2):
    """Bilinear depth-map sample that refuses to blend across discontinuities.

    A sample is valid only if its four neighbours are all valid (> 0) and
    their spread is at most ``guard`` times their mean.  Returns
    ``(value, d/du, d/dv, valid)``.
    """
    h, w = dmap.shape
    val, du, dv, inside = interpolate_with_gradient(dmap, u, v)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    u0 = np.minimum(np.floor(uc).astype(np.intp), w - 2)
    v0 = np.minimum(np.floor(vc).astype(np.intp), h - 2)
    n = np.stack([dmap[v0, u0], dmap[v0, u0 + 1], dmap[v0 + 1, u0], dmap[v0 + 1, u0 + 1]])
    lo, hi, mean = n.min(axis=0), n.max(axis=0), n.mean(axis=0)
    valid = inside & (lo > 0) & (hi - lo <= guard * mean)
    return val, du, dv, valid


def interpolation_variance_factor(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Variance of a bilinear sample of i.i.d. unit-variance pixels.

    It is 1 on pixel centers and 1/4 midway between four of them.  Scaling
    the measurement variance by it keeps the cost from pulling samples
    toward half-pixel offsets where interpolated noise looks smaller.
    """
    fu = u - np.floor(u)
    fv = v - np.floor(v)
    return ((1 - fu) ** 2 + fu ** 2) * ((1 - fv) ** 2 + fv ** 2)


def eval_geometric(points: PointSet, dmap: np.ndarray, intr: PinholeIntrinsics, T_fk: Pose,
                   depth_mode: bool = False, guard: float = 0.2) -> ResidualSet:
    """Geometric residual ``1/q_z - D_f(pi(q))`` (or ``q_z - Z_f`` in depth mode).

    The Jacobian is taken at the current warp for the update
    ``T_fk <- T_fk exp(xi)^-1``, i.e. ``dq/dxi = R_fk [[p]x, -I]``.
    """
    p = points.points
    n = len(points)
    if n == 0:
        z = np.zeros(0)
        return ResidualSet(z, np.zeros((0, 6)), np.zeros(0, bool), z)
    q = T_fk.apply(p)
    front = q[:, 2] > 1e-6
    qz = np.where(front, q[:, 2], 1.0)
    qs = q.copy()
    qs[:, 2] = qz
    u = intr.fx * q[:, 0] / qz + intr.cx
    v = intr.fy * q[:, 1] / qz + intr.cy
    D, Du, Dv, ok = sample_depth_guarded(dmap, u, v, guard)
    valid = ok & front
    s = interpolation_variance_factor(np.where(valid, u, 0.0), np.where(valid, v, 0.0))
    Jp = _projection_jacobian(qs, intr)
    dD = Du[:, None] * Jp[:, 0, :] + Dv[:, None] * Jp[:, 1, :]
    drdq = -dD
    # a keyframe point moves along its ray when its inverse depth changes: dq/drho = -q'/rho
    dq_drho = -(p @ T_fk.R.T) * (1.0 / np.maximum(points.rho, 1e-12))[:, None]
    if depth_mode:
        r = qz - D
        drdq[:, 2] += 1.0
        meas = s * np.square(sigma_depth(np.where(valid, D, 0.0), intr))
    else:
        r = 1.0 / qz - D
        drdq[:, 2] -= 1.0 / (qz * qz)
        meas = s * sigma_inverse_depth(intr) ** 2
    dr_drho = np.einsum("ni,ni->n", drdq, dq_drho)
    sig = np.sqrt(np.square(dr_drho * points.sigma) + meas)
    # dq/dxi = R [ [p]x , -I ]
    A = np.zeros((n, 3, 6))
    A[:, 0, 1], A[:, 0, 2] = -p[:, 2], p[:, 1]
    A[:, 1, 0], A[:, 1, 2] = p[:, 2], -p[:, 0]
    A[:, 2, 0], A[:, 2, 1] = -p[:, 1], p[:, 0]
    A[:, :, 3:] = -np.eye(3)
    dqdxi = np.einsum("ij,njk->nik", T_fk.R, A)
    J = np.einsum("ni,nik->nk", drdq, dqdxi)
    return ResidualSet(np.where(valid, r, 0.0), J, valid, sig)


def photometric_residuals(frame: Frame, keyframe: Keyframe, state: TrackingState, level: int | None = None,
                          sigma_ph: float = 15.0, mode: str = "PS") -> ResidualSet:
    """Photometric residual set of ``frame`` against ``keyframe`` at ``state``."""
    level = frame.finest if level is None else level
    pts = keyframe.data.dense_photometric[level] if mode == "PD" else keyframe.photometric[level]
    intr = frame.intrinsics[level]
    T_fk = state.pose.inverse().compose(keyframe.pose)
    rs = eval_photometric(pts, photometric_template_jacobian(pts, intr), frame.gray[level], intr,
                          T_fk, state.a, state.b, sigma_ph)
    rs.weight = geman_mcclure_weight(rs.r, rs.sigma)
    return rs


def geometric_point_set(keyframe: Keyframe, mode: str, level: int) -> PointSet:
    if mode == "GIDS":
        return keyframe.photometric[level]
    if mode == "GIDD_FULL":
        return keyframe.data.dense[level]
    return keyframe.geometric[level]


def geometric_residuals(frame: Frame, keyframe: Keyframe, state: TrackingState, parametrization: str = "inverse_depth",
                        level: int | None = None, mode: str = "GIDD", guard: float = 0.2) -> ResidualSet:
    level = frame.finest if level is None else level
    depth_mode = parametrization == "depth"
    dmap = frame.depth[level] if depth_mode else frame.inv_depth[level]
    T_fk = state.pose.inverse().compose(keyframe.pose)
    rs = eval_geometric(geometric_point_set(keyframe, mode, level), dmap, frame.intrinsics[level], T_fk, depth_mode, guard)
    rs.weight = geman_mcclure_weight(rs.r, rs.sigma)
    return rs


@dataclass
class _LevelProblem:
    ph_points: PointSet | None
    J0: np.ndarray | None
    image: np.ndarray
    g_points: PointSet | None
    dmap: np.ndarray | None
    intr: PinholeIntrinsics
    cfg: ResidualConfig
    sigma_ph: float

    def evaluate(self, T_fk: Pose, a: float, b: float):
        ph = g = None
        if self.ph_points is not None:
            ph = eval_photometric(self.ph_points, self.J0, self.image, self.intr, T_fk, a, b, self.sigma_ph)
        if self.g_points is not None:
            g = eval_geometric(self.g_points, self.dmap, self.intr, T_fk, self.cfg.depth_parametrization,
                               self.cfg.depth_guard)
        return ph, g

    def weights(self, ph, g):
        """IRLS weights with the variance normalization and lambda folded in.

        They are held fixed across a step so the line search compares one
        quadratic form.
        """
        k = self.cfg.robust_k
        wph = wg = None
        if ph is not None:
            wph = geman_mcclure_weight(ph.r, ph.sigma, k) * ph.valid / np.square(ph.sigma)
        if g is not None:
            sg = np.where(g.valid, g.sigma, 1.0)
            wg = self.lam_g * geman_mcclure_weight(g.r, sg, k) * g.valid / np.square(sg)
        return wph, wg

    def cost(self, ph, g, wph, wg, mask_ph=None, mask_g=None) -> float:
        c = 0.0
        if ph is not None:
            m = ph.valid if mask_ph is None else mask_ph
            c += float(np.sum(np.where(m, wph * np.square(ph.r), 0.0)))
        if g is not None:
            m = g.valid if mask_g is None else mask_g
            c += float(np.sum(np.where(m, wg * np.square(g.r), 0.0)))
        return c

    @property
    def lam_g(self) -> float:
        return self.cfg.lam if self.cfg.photometric else 1.0

    def normal_equations(self, ph, g, wph, wg):
        n = self.cfg.n_params
        H = np.zeros((n, n))
        rhs = np.zeros(n)
        if ph is not None:
            m = ph.valid
            J, w = ph.J[m], wph[m]
            H += J.T @ (J * w[:, None])
            rhs += J.T @ (w * ph.r[m])
        if g is not None:
            m = g.valid
            J, w = g.J[m], wg[m]
            H[:6, :6] += J.T @ (J * w[:, None])
            rhs[:6] += J.T @ (w * g.r[m])
        return H, rhs


def solve_normal_equations(H: np.ndarray, rhs: np.ndarray, cond_limit: float = 1e12, damping: float = 1e-6) -> np.ndarray | None:
    """Solve ``H x = -rhs``; damps the diagonal by ``damping * trace`` when
    the condition number exceeds ``cond_limit``.  ``None`` if ``H`` carries no information."""
    tr = float(np.trace(H))
    if not np.isfinite(tr) or tr <= 0:
        return None
    if np.linalg.cond(H) > cond_limit:
        H = H + damping * tr * np.eye(len(H))
    try:
        return -linalg.cho_solve(linalg.cho_factor(H), rhs)
    except linalg.LinAlgError:
        return -np.linalg.lstsq(H, rhs, rcond=None)[0]


def _apply(T_fk: Pose, a: float, b: float, delta: np.ndarray):
    T = T_fk.compose(exp_se3(delta[:6]).inverse())
    if len(delta) > 6:
        return T, a + float(delta[6]), b + float(delta[7])
    return T, a, b


def solve_level(problem: _LevelProblem, T_fk: Pose, a: float, b: float, max_iterations: int):
    """Gauss-Newton with IRLS and step halving at one pyramid level.

    Returns ``(T_fk, a, b, iterations, converged, (ph, g), cost)``.
    """
    cfg = problem.cfg
    ph, g = problem.evaluate(T_fk, a, b)
    converged = False
    its = 0
    cost = math.nan
    for its in range(1, max_iterations + 1):
        wph, wg = problem.weights(ph, g)
        cost = problem.cost(ph, g, wph, wg)
        if not np.isfinite(cost):
            break
        H, rhs = problem.normal_equations(ph, g, wph, wg)
        delta = solve_normal_equations(H, rhs, cfg.cond_limit, cfg.damping)
        if delta is None or not np.all(np.isfinite(delta)):
            break
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            T2, a2, b2 = _apply(T_fk, a, b, delta)
            if a2 <= 0:
                delta = 0.5 * delta
                continue
            ph2, g2 = problem.evaluate(T2, a2, b2)
            # fixed weights, compared over points usable in both states
            mph = ph.valid & ph2.valid if ph is not None else None
            mg = g.valid & g2.valid if g is not None else None
            before = problem.cost(ph, g, wph, wg, mph, mg)
            after = problem.cost(ph2, g2, wph, wg, mph, mg)
            if after <= before:
                accepted = True
                break
            delta = 0.5 * delta
        if not accepted:
            converged = True  # no descent direction left at this level
            break
        T_fk, a, b, ph, g = T2, a2, b2, ph2, g2
        if float(np.linalg.norm(delta[:6])) < cfg.epsilon:
            converged = True
            break
    wph, wg = problem.weights(ph, g)
    cost = problem.cost(ph, g, wph, wg)
    return T_fk, a, b, its, converged, (ph, g), cost


def _level_problem(frame: Frame, keyframe: Keyframe, level: int, cfg: ResidualConfig, sigma_ph: float) -> _LevelProblem:
    intr = frame.intrinsics[level]
    ph_pts = J0 = g_pts = dmap = None
    if cfg.photometric:
        ph_pts = keyframe.data.dense_photometric[level] if cfg.mode == "PD" else keyframe.photometric[level]
        J0 = photometric_template_jacobian(ph_pts, intr)
    if cfg.geometric:
        g_pts = geometric_point_set(keyframe, cfg.mode, level)
        dmap = frame.depth[level] if cfg.depth_parametrization else frame.inv_depth[level]
    return _LevelProblem(ph_pts, J0, frame.gray[level], g_pts, dmap, intr, cfg, sigma_ph)


def track_frame(frame: Frame, keyframe: Keyframe, init: TrackingState, cfg: ResidualConfig = ResidualConfig(),
                sigma_ph: tuple[float, ...] | None = None) -> tuple[TrackingState, ResidualStats]:
    """Coarse-to-fine alignment of ``frame`` to ``keyframe`` starting at ``init``.

    ``sigma_ph`` holds the per-level photometric scales from the previous
    frame; the returned stats carry the scales for the next one.
    Raises :class:`TrackingLostError` when tracking fails.
    """
    if not (init.pose.is_valid(1e-6)):
        raise ValueError("initial pose is not a valid rigid transform")
    n_levels = frame.n_levels
    if sigma_ph is None:
        sigma_ph = (cfg.sigma_ph_init,) * n_levels
    T_fk = init.pose.inverse().compose(keyframe.pose)
    a, b = (init.a, init.b) if cfg.photometric else (1.0, 0.0)
    iters, costs, new_sigma = [], [], []
    converged = False
    ph = g = None
    for level in range(n_levels):
        prob = _level_problem(frame, keyframe, level, cfg, sigma_ph[level])
        max_it = cfg.max_iterations[min(level, len(cfg.max_iterations) - 1)]
        T_fk, a, b, it, converged, (ph, g), cost = solve_level(prob, T_fk, a, b, max_it)
        iters.append(it)
        costs.append(cost)
        new_sigma.append(
            update_sigma_ph(ph.r[ph.valid], sigma_ph[level], cfg.sigma_ph_floor, cfg.mad_scale) if ph is not None else sigma_ph[level]
        )
    n_res = (ph.count if ph is not None else 0) + (g.count if g is not None else 0)
    inl, tot = 0, 0
    for rs in (ph, g):
        if rs is not None and rs.count:
            inl += int(np.sum(np.abs(rs.r[rs.valid]) < cfg.robust_k * rs.sigma[rs.valid]))
            tot += rs.count
    sg = float(np.median(g.sigma[g.valid])) if g is not None and g.count else 0.0
    stats = ResidualStats(tuple(new_sigma), sg, inl / tot if tot else 0.0, costs[-1], n_res, tuple(iters), tuple(costs))
    if n_res < cfg.min_residuals or not np.isfinite(costs[-1]):
        raise TrackingLostError(f"tracking lost: {n_res} residuals, cost {costs[-1]}", stats)
    pose = keyframe.pose.compose(T_fk.inverse())
    state = TrackingState(pose, a, float(np.clip(b, -255.0, 255.0)), keyframe.id, tuple(iters), converged)
    return state, stats


def normal_matrix(frame: Frame, keyframe: Keyframe, state: TrackingState, cfg: ResidualConfig,
                  level: int | None = None, sigma_ph: float = 15.0) -> np.ndarray:
    """Weighted normal matrix of the active terms at ``state`` (for degeneracy checks)."""
    level = frame.finest if level is None else level
    prob = _level_problem(frame, keyframe, level, cfg, sigma_ph)
    T_fk = state.pose.inverse().compose(keyframe.pose)
    ph, g = prob.evaluate(T_fk, state.a, state.b)
    wph, wg = prob.weights(ph, g)
    return prob.normal_equations(ph, g, wph, wg)[0]


@dataclass
class AlignmentCheck:
    median_abs_photometric: float
    median_abs_geometric_sigmas: float
    n_photometric: int
    n_geometric: int


def alignment_residuals(frame: Frame, keyframe: Keyframe, pose: Pose, guard: float = 0.2) -> AlignmentCheck:
    """Median residual magnitudes at the finest level with ``a = 1, b = 0``.

    Geometric residuals are expressed in units of their own sigma.
    """
    lvl = frame.finest
    state = TrackingState(pose)
    ph = photometric_residuals(frame, keyframe, state, lvl)
    g = geometric_residuals(frame, keyframe, state, "inverse_depth", lvl, "GIDD", guard)
    mp = float(np.median(np.abs(ph.r[ph.valid]))) if ph.count else math.inf
    mg = float(np.median(np.abs(g.r[g.valid] / g.sigma[g.valid]))) if g.count else math.inf
    return AlignmentCheck(mp, mg, ph.count, g.count)
