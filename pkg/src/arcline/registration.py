"""Arc-to-line registration between the camera and the TRUS frame.

Each pair couples a laser line in the camera frame (unknown depth ``lambda``
along it) with an arc in the TRUS frame (known radius, unknown angle
``theta'`` within the slice-thickness window around the scan angle). The
solver alternates

1. descent on the pose and all ``lambda`` with ``theta'`` held fixed,
2. the exact per-pair angle update with pose and ``lambda`` held fixed,

until the summed Euclidean mismatch stops decreasing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .geometry import Line3, PmObservation, RigidTransform, TrusGeometry, skew

log = logging.getLogger(__name__)

# summands with a smaller residual (mm) contribute no (sub)gradient
ZERO_RESIDUAL = 1e-12
DEFAULT_THETA_BOUND_RAD = math.radians(6.0)
DEFAULT_LAMBDA_INIT_MM = 50.0


class DegenerateProblem(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RegistrationProblem:
    pairs: list[tuple[Line3, PmObservation]]
    geometry: TrusGeometry = field(default_factory=TrusGeometry)
    theta_bound_rad: float = DEFAULT_THETA_BOUND_RAD
    lambda_init_mm: float = DEFAULT_LAMBDA_INIT_MM

    def __post_init__(self):
        pairs = [tuple(p) for p in self.pairs]
        object.__setattr__(self, "pairs", pairs)
        if len(pairs) < 3:
            raise DegenerateProblem(f"registration needs at least 3 pairs, got {len(pairs)}")
        if not self.theta_bound_rad > 0:
            raise ValueError("theta_bound_rad must be > 0")
        if not self.lambda_init_mm > 0:
            raise ValueError("lambda_init_mm must be > 0")
        lines = [p[0] for p in pairs]
        obs = [p[1] for p in pairs]
        # packed arrays for the vectorized cost
        object.__setattr__(self, "_origins", np.array([l.origin for l in lines]))
        object.__setattr__(self, "_dirs", np.array([l.direction for l in lines]))
        scan = np.array([o.scan_angle_rad for o in obs])
        object.__setattr__(self, "_scan", scan)
        object.__setattr__(self, "_radius", np.array([o.radius_mm for o in obs]))
        r = self.geometry.radius_mm
        object.__setattr__(
            self, "_elements",
            np.column_stack([[o.lateral_mm for o in obs], r * np.sin(scan), r * np.cos(scan)]),
        )

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def lines(self) -> list[Line3]:
        return [p[0] for p in self.pairs]

    @property
    def observations(self) -> list[PmObservation]:
        return [p[1] for p in self.pairs]

    def arc_points(self, thetas) -> np.ndarray:
        th = np.asarray(thetas, dtype=float)
        rad = self._radius
        return self._elements + np.column_stack([np.zeros_like(th), rad * np.sin(th), rad * np.cos(th)])

    def laser_points(self, lambdas) -> np.ndarray:
        return self._origins + np.asarray(lambdas, dtype=float)[:, None] * self._dirs

    def subset(self, idx) -> RegistrationProblem:
        return replace(self, pairs=[self.pairs[i] for i in idx])


@dataclass(frozen=True)
class RegistrationConfig:
    tol_rel: float = 1e-8
    tol_abs: float = 1e-10
    max_outer: int = 200
    inner_tol_rel: float = 1e-10
    max_inner: int = 500
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 50
    # "scaled": gradient premultiplied by the inverse of the reweighted
    # Gauss-Newton matrix; "steepest": raw negative gradient.
    descent: str = "scaled"
    # after each pose/angle round, one descent pass over all variables
    # at once; plain alternation zigzags and crawls near the optimum
    joint_refine: bool = True
    # smoothing radius of the curvature model, relative to the mean residual
    smoothing: float = 1e-3
    # final smoothing radius of the polishing pass (relative, as above) and
    # its step budget per radius; polish_steps = 0 skips the pass
    min_smoothing: float = 1e-9
    polish_steps: int = 50
    radial_curvature: float = 0.0
    adaptive_damping: bool = True
    damping_streak: int = 12
    # extra starting poses: the initial alignment flipped by 180 deg about
    # the principal axes of the TRUS-side points (at most 3)
    restarts: int = 0
    # inner-step budget of the single outer round used to rank the starts
    screen_inner: int = 25
    restart_margin: float = 0.5
    # before the descent, solve the squared-residual version of the problem
    # from the initial alignment and start from there; the sum of norms has
    # extra minima that fit a subset of pairs exactly and ignore the rest
    warm_start: bool = True
    # weight (mm) of the beam-direction prior in the warm start; 0 disables
    # it together with the direction-aware second start
    beam_prior_mm: float = 1.0


@dataclass
class SolverState:
    f_reg: RigidTransform
    lambdas: np.ndarray
    thetas: np.ndarray
    stalled: bool = False


@dataclass
class RegistrationResult:
    f_reg: RigidTransform
    lambdas_mm: np.ndarray
    thetas_rad: np.ndarray
    final_cost_mm: float
    outer_iterations: int
    converged: bool
    cost_trace: list[float]

    def delta_thetas(self, prob: RegistrationProblem) -> np.ndarray:
        return self.thetas_rad - prob._scan


def _check_lengths(prob: RegistrationProblem, lambdas, thetas) -> tuple[np.ndarray, np.ndarray]:
    lam = np.asarray(lambdas, dtype=float).reshape(-1)
    th = np.asarray(thetas, dtype=float).reshape(-1)
    if len(lam) != len(prob) or len(th) != len(prob):
        raise ValueError(f"expected {len(prob)} lambdas and thetas, got {len(lam)} and {len(th)}")
    return lam, th


def residuals(f: RigidTransform, lambdas, thetas, prob: RegistrationProblem) -> np.ndarray:
    """Per-pair vectors ``F * laser_point - arc_point``, shape (n, 3)."""
    lam, th = _check_lengths(prob, lambdas, thetas)
    return f.apply(prob.laser_points(lam)) - prob.arc_points(th)


def cost(f: RigidTransform, lambdas, thetas, prob: RegistrationProblem) -> float:
    """Sum over pairs of the Euclidean distance between the mapped laser point and the arc point."""
    return float(np.sum(np.linalg.norm(residuals(f, lambdas, thetas, prob), axis=1)))


def _expm_so3(w) -> np.ndarray:
    """Rodrigues' formula for ``exp([w]x)``."""
    a = math.sqrt(float(w @ w))
    k = skew(w)
    if a < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    return np.eye(3) + (math.sin(a) / a) * k + ((1.0 - math.cos(a)) / (a * a)) * (k @ k)


def _left_jacobian_so3(w) -> np.ndarray:
    """``d exp([w]x) u / dw = -[exp([w]x) u]x J(w)``."""
    a = math.sqrt(float(w @ w))
    k = skew(w)
    if a < 1e-6:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    return np.eye(3) + ((1.0 - math.cos(a)) / (a * a)) * k + ((a - math.sin(a)) / a ** 3) * (k @ k)


def retract(f: RigidTransform, xi, pivot) -> RigidTransform:
    """Apply the local increment ``xi = (omega, delta)`` about ``pivot`` (TRUS frame).

    ``y -> exp([omega]x) (y - pivot) + pivot + delta`` composed after ``f``.
    """
    xi = np.asarray(xi, dtype=float)
    e = Rotation.from_rotvec(xi[:3]).as_matrix()
    c = np.asarray(pivot, dtype=float)
    return RigidTransform(e @ f.rotation, e @ (f.translation - c) + c + xi[3:6])


def gradient(f: RigidTransform, lambdas, thetas, prob: RegistrationProblem, pivot=None) -> np.ndarray:
    """Gradient of :func:`cost` w.r.t. ``(omega, delta, lambdas, thetas)`` at the zero increment.

    Layout: 3 rotation entries, 3 translation entries, n lambdas, n thetas.
    """
    lam, th = _check_lengths(prob, lambdas, thetas)
    y = f.apply(prob.laser_points(lam))
    if pivot is None:
        pivot = y.mean(axis=0)
    r = y - prob.arc_points(th)
    u = _unit_rows(r)
    v = y - pivot
    rn = prob._dirs @ f.rotation.T
    dq = prob._radius[:, None] * np.column_stack([np.zeros_like(th), np.cos(th), -np.sin(th)])
    return np.concatenate([
        np.cross(v, u).sum(axis=0),
        u.sum(axis=0),
        np.einsum("ij,ij->i", u, rn),
        -np.einsum("ij,ij->i", u, dq),
    ])


def _unit_rows(r: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(r, axis=1)
    u = np.zeros_like(r)
    ok = norms >= ZERO_RESIDUAL
    u[ok] = r[ok] / norms[ok, None]
    return u


def _bounded_direction(g, h, fixed) -> np.ndarray:
    """``-H^-1 g`` on the free variables, zero on the ones pinned at a bound."""
    d = np.zeros_like(g)
    free = ~fixed
    if not free.any():
        return d
    if h is None:
        d[free] = -g[free]
        return d
    hf = h[np.ix_(free, free)]
    hf[np.diag_indices_from(hf)] += 1e-10 * max(np.max(np.diag(hf)), 1.0)
    try:
        d[free] = -np.linalg.solve(hf, g[free])
    except np.linalg.LinAlgError:
        d[free] = -g[free]
    if not np.all(np.isfinite(d)) or g @ d >= 0:
        d[:] = 0.0
        d[free] = -g[free]
    return d


def _norm_metric(jac, r, norms, eps, keep=0.0) -> np.ndarray:
    """Gauss-Newton curvature of ``sum_i sqrt(|r_i|^2 + eps^2)``.

    Per pair ``J^T (I/s - r r^T / s^3) J`` with ``s = sqrt(|r|^2 + eps^2)``:
    the exact norm curvature across the residual, and a stiff ``1/eps``
    pull on residuals that have (nearly) vanished.
    """
    eps = max(eps, 1e-9)
    s = np.sqrt(norms ** 2 + eps ** 2)
    m = np.eye(3)[None] / s[:, None, None] - (1.0 - keep) * np.einsum("ik,il->ikl", r, r) / (s ** 3)[:, None, None]
    return np.einsum("ikm,ikl,iln->mn", jac, m, jac)


def _stacked_jacobian(v, rn, th, prob: RegistrationProblem, free_angles: bool) -> np.ndarray:
    """Jacobian of the residual vectors, shape (n, 3, m).

    Columns: rotation increment about the pivot (``v`` are the mapped laser
    points relative to it), translation, each lambda (``rn`` the mapped beam
    directions) and, when ``free_angles``, each arc angle.
    """
    n = len(prob)
    rows = np.arange(n)
    jac = np.zeros((n, 3, 6 + n + (n if free_angles else 0)))
    jac[:, 0, 1], jac[:, 0, 2] = v[:, 2], -v[:, 1]
    jac[:, 1, 0], jac[:, 1, 2] = -v[:, 2], v[:, 0]
    jac[:, 2, 0], jac[:, 2, 1] = v[:, 1], -v[:, 0]
    jac[:, :, 3:6] = np.eye(3)
    jac[rows, :, 6 + rows] = rn
    if free_angles:
        dq = prob._radius[:, None] * np.column_stack([np.zeros(n), np.cos(th), -np.sin(th)])
        jac[rows, :, 6 + n + rows] = -dq
    return jac


def _descend(state: SolverState, prob: RegistrationProblem, config: RegistrationConfig,
             free_angles: bool) -> SolverState:
    """Projected descent with Armijo backtracking on pose, lambdas and optionally the angles.

    Variables: rotation increment (3), translation increment (3), lambdas (n)
    and, when ``free_angles``, arc angles (n). ``lambda >= 0`` and the angle
    window are enforced by projection; variables sitting on a bound with the
    gradient pointing outwards are frozen for the step.
    """
    n = len(prob)
    f = state.f_reg
    lam = np.maximum(np.asarray(state.lambdas, dtype=float), 0.0)
    th = np.asarray(state.thetas, dtype=float)
    lo = prob._scan - prob.theta_bound_rad
    hi = prob._scan + prob.theta_bound_rad
    dirs = prob._dirs
    a0 = prob._origins
    m = 6 + n + (n if free_angles else 0)

    # the pose is carried as a bare (R, t) inside the loop; building a
    # validated RigidTransform per line-search trial dominates the run time
    rot, trans = f.rotation, f.translation

    def evaluate(rot_, trans_, lam_, th_):
        y_ = (a0 + lam_[:, None] * dirs) @ rot_.T + trans_
        r_ = y_ - prob.arc_points(th_)
        return y_, r_, float(np.sum(np.sqrt(np.einsum("ij,ij->i", r_, r_))))

    y, r, j = evaluate(rot, trans, lam, th)
    mu, streak = 0.0, 0
    for _ in range(config.max_inner):
        if j <= config.tol_abs:
            break
        norms = np.linalg.norm(r, axis=1)
        pivot = y.mean(axis=0)
        jac = _stacked_jacobian(y - pivot, dirs @ rot.T, th, prob, free_angles)
        u = np.where((norms >= ZERO_RESIDUAL)[:, None], r / np.maximum(norms, ZERO_RESIDUAL)[:, None], 0.0)
        g = np.einsum("ik,ikm->m", u, jac)
        if np.linalg.norm(g) < 1e-14:
            break

        fixed = np.zeros(m, dtype=bool)
        fixed[6:6 + n] = (lam <= 0.0) & (g[6:6 + n] > 0)
        if free_angles:
            ga = g[6 + n:]
            fixed[6 + n:] = ((th <= lo) & (ga > 0)) | ((th >= hi) & (ga < 0))
        h = None
        if config.descent == "scaled":
            h = _norm_metric(jac, r, norms, config.smoothing * j / n, config.radial_curvature)
        elif config.descent == "irls":
            w = 1.0 / np.maximum(norms, 1e-9)
            h = np.einsum("i,ikm,ikl->ml", w, jac, jac)
        if h is not None and config.adaptive_damping:
            h = h + mu * np.diag(np.maximum(np.diag(h), 1e-12))
        d = _bounded_direction(g, h, fixed)

        alpha = 1.0
        for tries in range(config.max_backtracks):
            step = alpha * d
            lam_t = np.maximum(lam + step[6:6 + n], 0.0)
            th_t = np.clip(th + step[6 + n:], lo, hi) if free_angles else th
            e = _expm_so3(step[:3])
            rot_t, trans_t = e @ rot, e @ (trans - pivot) + pivot + step[3:6]
            y_t, r_t, j_t = evaluate(rot_t, trans_t, lam_t, th_t)
            taken = np.concatenate([step[:6], lam_t - lam, (th_t - th) if free_angles else []])
            if j_t <= j + config.armijo_c * float(g @ taken):
                break
            alpha *= config.shrink
        else:
            return SolverState(RigidTransform(rot, trans), lam, th, stalled=True)
        # Marquardt-style damping, switched on only by a run of cut steps
        # (the undamped metric then keeps overshooting) and off again by
        # the first full step
        if tries == 0:
            mu, streak = 0.0, 0
        else:
            streak += 1
            if streak >= config.damping_streak:
                mu = min(max(mu, 1e-4) * 2.0 ** tries, 1e8)
        rel = (j - j_t) / max(j, 1e-12)
        rot, trans, lam, th, y, r, j = rot_t, trans_t, lam_t, th_t, y_t, r_t, j_t
        if rel < config.inner_tol_rel:
            break
    return SolverState(RigidTransform(rot, trans), lam, th)


def polish(state: SolverState, prob: RegistrationProblem,
           config: RegistrationConfig = RegistrationConfig()) -> SolverState:
    """Drive a converged state onto the kinks of the true cost.

    Minimizes ``sum_i sqrt(|r_i|^2 + eps^2)`` for a shrinking ``eps``, each
    time by Gauss-Newton with a line search on that same smooth function.
    Its minimizer tends to the minimizer of the sum of norms as ``eps -> 0``,
    which a line search on the nonsmooth cost itself approaches only slowly
    once several residuals have vanished.
    """
    n = len(prob)
    lo = prob._scan - prob.theta_bound_rad
    hi = prob._scan + prob.theta_bound_rad
    dirs, a0 = prob._dirs, prob._origins
    rot, trans = state.f_reg.rotation, state.f_reg.translation
    lam = np.maximum(np.asarray(state.lambdas, dtype=float), 0.0)
    th = np.asarray(state.thetas, dtype=float)

    def evaluate(rot_, trans_, lam_, th_, eps):
        y_ = (a0 + lam_[:, None] * dirs) @ rot_.T + trans_
        r_ = y_ - prob.arc_points(th_)
        return y_, r_, float(np.sum(np.sqrt(np.einsum("ij,ij->i", r_, r_) + eps * eps)))

    scale = cost(state.f_reg, lam, th, prob) / n
    if scale <= config.tol_abs:
        return state
    eps = config.smoothing * scale
    while True:
        y, r, js = evaluate(rot, trans, lam, th, eps)
        for _ in range(config.polish_steps):
            s = np.sqrt(np.einsum("ij,ij->i", r, r) + eps * eps)
            pivot = y.mean(axis=0)
            jac = _stacked_jacobian(y - pivot, dirs @ rot.T, th, prob, True)
            g = np.einsum("ik,ikm->m", r / s[:, None], jac)
            fixed = np.zeros(6 + 2 * n, dtype=bool)
            fixed[6:6 + n] = (lam <= 0.0) & (g[6:6 + n] > 0)
            ga = g[6 + n:]
            fixed[6 + n:] = ((th <= lo) & (ga > 0)) | ((th >= hi) & (ga < 0))
            d = _bounded_direction(g, _norm_metric(jac, r, np.sqrt(s * s - eps * eps), eps), fixed)
            alpha = 1.0
            for _ in range(config.max_backtracks):
                step = alpha * d
                lam_t = np.maximum(lam + step[6:6 + n], 0.0)
                th_t = np.clip(th + step[6 + n:], lo, hi)
                e = _expm_so3(step[:3])
                rot_t, trans_t = e @ rot, e @ (trans - pivot) + pivot + step[3:6]
                y_t, r_t, js_t = evaluate(rot_t, trans_t, lam_t, th_t, eps)
                taken = np.concatenate([step[:6], lam_t - lam, th_t - th])
                if js_t <= js + config.armijo_c * float(g @ taken):
                    break
                alpha *= config.shrink
            else:
                break
            rel = (js - js_t) / js
            rot, trans, lam, th, y, r, js = rot_t, trans_t, lam_t, th_t, y_t, r_t, js_t
            if rel < 1e-15:
                break
        if eps <= config.min_smoothing * scale:
            break
        eps = max(eps * 1e-2, config.min_smoothing * scale)
    return SolverState(RigidTransform(rot, trans), lam, th)


def solve_step_pose(state: SolverState, prob: RegistrationProblem,
                    config: RegistrationConfig = RegistrationConfig()) -> SolverState:
    """Descend on pose and ``lambda`` with the arc angles frozen.

    The returned state never costs more than the input. If the line search
    runs out of backtracks the best state so far comes back with ``stalled``.
    """
    return _descend(state, prob, config, free_angles=False)


def solve_step_joint(state: SolverState, prob: RegistrationProblem,
                     config: RegistrationConfig = RegistrationConfig()) -> SolverState:
    """Same descent as :func:`solve_step_pose` but with the arc angles free inside their window."""
    return _descend(state, prob, config, free_angles=True)


def best_arc_angles(points, prob: RegistrationProblem, bound=None) -> np.ndarray:
    """Per pair, the arc angle in ``scan +/- bound`` closest to ``points`` (TRUS frame).

    The squared distance to the arc is ``const - 2 r rho cos(theta - phi)``
    with ``phi`` the polar angle of the point about the element, so the
    windowed optimum is ``phi`` clamped to the window. Ties (point on the
    rotation axis, or exactly opposite the scan angle) go to the smaller angle.
    """
    bound = prob.theta_bound_rad if bound is None else bound
    d = np.asarray(points, dtype=float) - prob._elements
    scan = prob._scan
    phi = np.arctan2(d[:, 1], d[:, 2])
    off = np.remainder(phi - scan + np.pi, 2 * np.pi) - np.pi
    rho = np.hypot(d[:, 1], d[:, 2])
    tie = (rho < 1e-15) | (np.abs(np.abs(off) - np.pi) < 1e-15)
    off = np.where(tie, -bound, np.clip(off, -bound, bound))
    # a zero-radius arc is a single point: any angle is optimal
    off = np.where(prob._radius == 0, -bound, off)
    return scan + off


def solve_step_angles(state: SolverState, prob: RegistrationProblem) -> np.ndarray:
    lam = np.asarray(state.lambdas, dtype=float)
    y = state.f_reg.apply(prob.laser_points(lam))
    return best_arc_angles(y, prob)


def rigid_align(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` points onto ``dst`` points."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    rot, _ = Rotation.align_vectors(dst - cd, src - cs)
    r = rot.as_matrix()
    return RigidTransform(r, cd - r @ cs)


def _collinear(points: np.ndarray) -> bool:
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    return s[1] <= 1e-9 * max(s[0], 1.0)


def initialize(prob: RegistrationProblem) -> tuple[RigidTransform, np.ndarray, np.ndarray]:
    n = len(prob)
    lam = np.full(n, prob.lambda_init_mm)
    th = prob._scan.copy()
    cam = prob.laser_points(lam)
    trus = prob.arc_points(th)
    if _collinear(cam) or _collinear(trus):
        raise DegenerateProblem("degenerate initialization; vary PM placement")
    if n == 3:
        log.warning("only 3 pairs: the registration is barely determined")
    return rigid_align(cam, trus), lam, th


def flipped_starts(prob: RegistrationProblem, f: RigidTransform, count: int) -> list[RigidTransform]:
    """``f`` followed by half-turns about the principal axes of the initial TRUS points."""
    pts = prob.arc_points(prob._scan)
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c)
    out = []
    for axis in vt[:count]:
        half_turn = 2.0 * np.outer(axis, axis) - np.eye(3)
        out.append(RigidTransform(half_turn, c - half_turn @ c) @ f)
    return out


def _outer_round(state: SolverState, prob: RegistrationProblem, config: RegistrationConfig) -> tuple[SolverState, float]:
    state = solve_step_pose(state, prob, config)
    j_pose = cost(state.f_reg, state.lambdas, state.thetas, prob)
    old_thetas = state.thetas
    state.thetas = solve_step_angles(state, prob)
    j = cost(state.f_reg, state.lambdas, state.thetas, prob)
    if j > j_pose:
        # the closed-form angle can lose the last ulp; keep the old one then
        state.thetas, j = old_thetas, j_pose
    if config.joint_refine:
        state = solve_step_joint(state, prob, config)
        j = cost(state.f_reg, state.lambdas, state.thetas, prob)
    return state, j


def inward_directions(prob: RegistrationProblem, thetas) -> np.ndarray:
    """Unit vectors from each arc point towards the probe axis (TRUS frame)."""
    th = np.asarray(thetas, dtype=float)
    return -np.column_stack([np.zeros_like(th), np.sin(th), np.cos(th)])


def oriented_initialize(prob: RegistrationProblem, direction_scale_mm: float = 50.0
                        ) -> tuple[RigidTransform, np.ndarray, np.ndarray]:
    """Like :func:`initialize`, but the beams also vote on the rotation.

    Each beam is matched to the inward radial direction at its PM (the
    laser reaches the tissue from the far side of the probe), entering the
    cross-covariance as a vector pair of length ``direction_scale_mm``.
    """
    _, lam, th = initialize(prob)
    cam = prob.laser_points(lam)
    trus = prob.arc_points(th)
    cs, ct = cam.mean(axis=0), trus.mean(axis=0)
    src = np.vstack([cam - cs, direction_scale_mm * prob._dirs])
    dst = np.vstack([trus - ct, direction_scale_mm * inward_directions(prob, th)])
    rot, _ = Rotation.align_vectors(dst, src)
    r = rot.as_matrix()
    return RigidTransform(r, ct - r @ cs), lam, th


def least_squares_start(prob: RegistrationProblem, f0: RigidTransform, lambdas, thetas,
                        beam_weight: float = 0.0) -> tuple[tuple[RigidTransform, np.ndarray, np.ndarray], float]:
    """Bounded least-squares fit of all residual components, started at ``(f0, lambdas, thetas)``.

    ``beam_weight`` (mm per unit of direction mismatch) adds a weak pull of
    every mapped beam towards the inward radial direction at its PM. It
    picks one member of the zero-cost family when there are too few pairs
    to pin the pose down, and barely moves a well-determined fit. Returns
    the solution and its objective value.
    """
    n = len(prob)
    lam0 = np.maximum(np.asarray(lambdas, dtype=float), 0.0)
    lo = np.r_[np.full(6, -np.inf), np.zeros(n), prob._scan - prob.theta_bound_rad]
    hi = np.r_[np.full(6, np.inf), np.full(n, np.inf), prob._scan + prob.theta_bound_rad]
    th0 = np.clip(np.asarray(thetas, dtype=float), lo[6 + n:], hi[6 + n:])
    pivot = f0.apply(prob.laser_points(lam0)).mean(axis=0)

    r0, t0 = f0.rotation, f0.translation
    o0 = prob._origins @ r0.T + t0 - pivot
    d0 = prob._dirs @ r0.T

    def unpack(x):
        return retract(f0, x[:6], pivot), x[6:6 + n], x[6 + n:]

    def parts(x):
        e = _expm_so3(x[:3])
        lam, th = x[6:6 + n], x[6 + n:]
        v = (o0 + lam[:, None] * d0) @ e.T
        r = v + pivot + x[3:6] - prob.arc_points(th)
        return e, v, r, th

    def fun(x):
        e, _, r, th = parts(x)
        r = r.ravel()
        if beam_weight > 0:
            mis = d0 @ e.T - inward_directions(prob, th)
            r = np.r_[r, beam_weight * mis.ravel()]
        return r

    def jac(x):
        e, v, _, th = parts(x)
        jl = _left_jacobian_so3(x[:3])
        rn = d0 @ e.T
        j = _stacked_jacobian(v, rn, th, prob, True)
        j[:, :, :3] = j[:, :, :3] @ jl
        j = j.reshape(3 * n, -1)
        if beam_weight > 0:
            jp = np.zeros((n, 3, 6 + 2 * n))
            jp[:, 0, 1], jp[:, 0, 2] = rn[:, 2], -rn[:, 1]
            jp[:, 1, 0], jp[:, 1, 2] = -rn[:, 2], rn[:, 0]
            jp[:, 2, 0], jp[:, 2, 1] = rn[:, 1], -rn[:, 0]
            jp[:, :, :3] = jp[:, :, :3] @ jl
            rows = np.arange(n)
            jp[rows, :, 6 + n + rows] = np.column_stack([np.zeros(n), np.cos(th), -np.sin(th)])
            j = np.vstack([j, beam_weight * jp.reshape(3 * n, -1)])
        return j

    sol = least_squares(fun, np.r_[np.zeros(6), lam0, th0], jac=jac, bounds=(lo, hi), method="trf",
                        x_scale="jac")
    f, lam, th = unpack(sol.x)
    return (f, np.maximum(lam, 0.0), np.clip(th, lo[6 + n:], hi[6 + n:])), float(sol.cost)


def register(prob: RegistrationProblem, config: RegistrationConfig = RegistrationConfig(),
             init: tuple[RigidTransform, np.ndarray, np.ndarray] | None = None) -> RegistrationResult:
    """Minimize the summed arc-to-line distances.

    Without ``init`` the problem is initialized in closed form and, with
    ``config.warm_start``, moved to its least-squares solution first; the
    cost trace starts at the point the descent starts from.
    """
    if init is None:
        f, lam, th = initialize(prob)
        if config.warm_start:
            starts = [(f, lam, th)]
            if config.beam_prior_mm > 0:
                starts.append(oriented_initialize(prob))
            fits = [least_squares_start(prob, *s0, beam_weight=config.beam_prior_mm) for s0 in starts]
            f, lam, th = min(fits, key=lambda fv: fv[1])[0]
            if config.beam_prior_mm > 0:
                # drop the prior again; with enough pairs it only biases the fit
                f, lam, th = least_squares_start(prob, f, lam, th)[0]
    else:
        f, lam, th = init
    state = SolverState(f, np.asarray(lam, dtype=float), np.asarray(th, dtype=float))
    trace = [cost(state.f_reg, state.lambdas, state.thetas, prob)]
    converged = trace[0] <= config.tol_abs
    if config.restarts > 0 and not converged:
        screen = replace(config, max_inner=config.screen_inner)
        starts = [state.f_reg] + flipped_starts(prob, state.f_reg, min(config.restarts, 3))
        ranked = [_outer_round(SolverState(s, state.lambdas.copy(), state.thetas.copy()), prob, screen)
                  for s in starts]
        # a flipped start must beat the primary one clearly; with few pairs
        # several starts fit equally well and the primary is the better prior
        best = min(ranked[1:], key=lambda sj: sj[1])
        state, j = best if best[1] < config.restart_margin * ranked[0][1] else ranked[0]
        trace.append(j)
        converged = j <= config.tol_abs
    k = 0
    while not converged and k < config.max_outer:
        k += 1
        state, j = _outer_round(state, prob, config)
        prev = trace[-1]
        trace.append(j)
        if j <= config.tol_abs or abs(prev - j) / max(prev, 1e-12) < config.tol_rel:
            converged = True
    if converged and config.polish_steps > 0 and trace[-1] > config.tol_abs:
        polished = polish(state, prob, config)
        j = cost(polished.f_reg, polished.lambdas, polished.thetas, prob)
        if j < trace[-1]:
            state = polished
            trace.append(j)
    if not converged:
        log.info("registration stopped after %d outer iterations without converging", k)
    return RegistrationResult(
        f_reg=state.f_reg,
        lambdas_mm=state.lambdas,
        thetas_rad=state.thetas,
        final_cost_mm=cost(state.f_reg, state.lambdas, state.thetas, prob),
        outer_iterations=k,
        converged=converged,
        cost_trace=trace,
    )
