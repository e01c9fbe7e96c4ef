"""Greedy nonnegative sparse recovery of an APS from grid-averaged RSRP.

All arithmetic is in linear power. Three column-selection rules share one
loop: geometry-weighted correlation (GM-NNOMP), plain correlation (NNOMP)
and correlation plus column-magnitude share (WNOMP).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import null_space

from mrlscm.channel_model import AngularGrid, MeasurementMatrix, wrap_degrees
from mrlscm.errors import InvalidArgumentError, NumericalError

SOLVERS = ("gm", "nnomp", "wnomp")


@dataclass(frozen=True, eq=False)
class ApsEstimate:
    x: np.ndarray
    support: np.ndarray
    residual_norm: float
    residual_trace: tuple = ()

    def pairs(self):
        """(angle_index, power) for every nonzero entry."""
        return [(int(i), float(self.x[i])) for i in self.support]


@dataclass(frozen=True)
class GeometryPrior:
    grid_centroid: tuple
    bs_location: tuple
    sigma_theta: float = 10.0
    sigma_phi: float = 10.0

    def __post_init__(self):
        if not (self.sigma_theta > 0 and self.sigma_phi > 0):
            raise InvalidArgumentError("kernel widths must be positive")


def relative_angle(prior: GeometryPrior):
    """Bearing and elevation (degrees) of the grid centroid seen from the BS.

    ``theta`` is the planar bearing ``atan2(dy, dx)``; ``phi`` is the
    elevation ``atan(h_bs / planar_distance)``.
    """
    x, y = prior.grid_centroid[:2]
    xb, yb, hb = prior.bs_location
    dx, dy = x - xb, y - yb
    dist = np.hypot(dx, dy)
    if dist == 0:
        raise InvalidArgumentError("grid centroid coincides with the BS planar position")
    theta = np.degrees(np.arctan2(dy, dx))
    phi = np.degrees(np.arctan(hb / dist))
    return float(theta), float(phi)


def geometric_weights(prior: GeometryPrior, grid: AngularGrid) -> np.ndarray:
    """RBF weight per flat angle index.

    The bearing is compared with the grid azimuth (difference wrapped to
    (-180, 180]) and the elevation with the grid tilt, so the LoS direction
    (downtilt positive) gets weight 1.
    """
    theta, phi = relative_angle(prior)
    tilt, az = grid.angles()
    d_az = wrap_degrees(az - theta)
    d_tilt = tilt - phi
    return np.exp(-(d_az ** 2) / prior.sigma_theta ** 2 - (d_tilt ** 2) / prior.sigma_phi ** 2)


# --------------------------------------------------------------------------
# constrained NNLS

def _solve_active_set(E, f, G, h, max_iter):
    """min ||E z - f||^2  s.t.  z >= 0, G z <= h, started from z = 0.

    Primal active-set method. Bounds are handled by fixing variables at 0;
    general constraints in the working set are enforced through a null-space
    basis of their rows restricted to the free variables.
    """
    n = E.shape[1]
    z = np.zeros(n)
    free = np.zeros(n, dtype=bool)
    work = []                       # active general constraints
    tol = 1e-12
    for _ in range(max_iter):
        F = np.flatnonzero(free)
        r = f - E @ z
        p = np.zeros(n)
        if F.size:
            EF = E[:, F]
            if work:
                Z = null_space(G[np.ix_(work, F)])
            else:
                Z = np.eye(F.size)
            if Z.shape[1]:
                u = np.linalg.lstsq(EF @ Z, r, rcond=None)[0]
                p[F] = Z @ u
        if np.linalg.norm(p) <= tol * (1.0 + np.linalg.norm(z)):
            grad = -2.0 * E.T @ r
            lam = np.zeros(len(work))
            if work and F.size:
                lam = np.linalg.lstsq(G[np.ix_(work, F)].T, -grad[F], rcond=None)[0]
            elif work:
                lam = np.zeros(len(work))
            # bound multipliers: grad + G_w^T lam - mu = 0 on fixed variables
            mu = grad + (G[work].T @ lam if work else 0.0)
            mu_fixed = np.where(free, np.inf, mu)
            candidates = []
            if lam.size:
                candidates.append((lam.min(), "g", int(np.argmin(lam))))
            if (~free).any():
                candidates.append((mu_fixed.min(), "b", int(np.argmin(mu_fixed))))
            if not candidates:
                return z
            val, kind, idx = min(candidates, key=lambda c: c[0])
            scale = 1.0 + np.abs(grad).max()
            if val >= -1e-10 * scale:
                return z
            if kind == "g":
                work.pop(idx)
            else:
                free[idx] = True
            continue
        # ratio test
        alpha, block = 1.0, None
        neg = F[p[F] < 0]
        if neg.size:
            ratios = -z[neg] / p[neg]
            k = int(np.argmin(ratios))
            if ratios[k] < alpha:
                alpha, block = ratios[k], ("b", int(neg[k]))
        if G.shape[0]:
            gp = G @ p
            slack = h - G @ z
            for i in range(G.shape[0]):
                if i in work or gp[i] <= 1e-15 * (1.0 + np.abs(G[i]).sum()):
                    continue
                ai = max(slack[i], 0.0) / gp[i]
                if ai < alpha:
                    alpha, block = ai, ("g", i)
        z = z + alpha * p
        if block is not None:
            kind, idx = block
            if kind == "b":
                z[idx] = 0.0
                free[idx] = False
            else:
                work.append(idx)
        z[~free] = 0.0
    raise NumericalError(f"constrained NNLS did not converge in {max_iter} iterations")


def constrained_nnls(a_obs, y_obs, a_miss=None, y_min=None, max_iter=None) -> np.ndarray:
    """Nonnegative least squares with an upper bound on unobserved rows.

    Minimises ``||a_obs z - y_obs||^2`` over ``z >= 0`` with
    ``a_miss z <= y_min`` entrywise. With no ``a_miss`` rows this is plain NNLS.
    The problem is rescaled internally so the result is scale covariant.
    """
    a_obs = np.atleast_2d(np.asarray(a_obs, dtype=float))
    y_obs = np.asarray(y_obs, dtype=float).ravel()
    n = a_obs.shape[1]
    if n < 1 or a_obs.shape[0] < 1:
        raise InvalidArgumentError("need at least one observed row and one column")
    if a_obs.shape[0] != y_obs.size:
        raise InvalidArgumentError("a_obs and y_obs row counts differ")
    if a_miss is None:
        a_miss = np.zeros((0, n))
    a_miss = np.asarray(a_miss, dtype=float).reshape(-1, n)
    if a_miss.shape[0] and (y_min is None or not y_min > 0):
        raise InvalidArgumentError("y_min must be positive when missing rows are constrained")

    ys = max(np.abs(y_obs).max(), y_min if a_miss.shape[0] else 0.0)
    if ys == 0:
        return np.zeros(n)
    col = np.sqrt((a_obs ** 2).sum(0) + (a_miss ** 2).sum(0))
    col[col == 0] = 1.0
    E = a_obs / col
    G = a_miss / col
    h = np.full(a_miss.shape[0], (y_min or 0.0) / ys)
    if max_iter is None:
        max_iter = 50 * (n + a_miss.shape[0] + 1)
    zs = _solve_active_set(E, y_obs / ys, G, h, max_iter)
    return np.maximum(zs, 0.0) * ys / col


def kkt_residual(a_obs, y_obs, a_miss, y_min, z, active_tol=1e-9):
    """Relative stationarity residual of a candidate constrained-NNLS solution.

    Multipliers of the active constraints are fitted by NNLS, so a small value
    certifies a KKT point independently of the solver that produced ``z``.
    """
    from scipy.optimize import nnls

    a_obs = np.atleast_2d(np.asarray(a_obs, dtype=float))
    n = a_obs.shape[1]
    a_miss = np.zeros((0, n)) if a_miss is None else np.asarray(a_miss, float).reshape(-1, n)
    grad = 2.0 * a_obs.T @ (a_obs @ z - y_obs)
    rows = [-np.eye(n)[j] for j in range(n) if z[j] <= active_tol * max(1.0, np.abs(z).max())]
    if a_miss.shape[0]:
        slack = y_min - a_miss @ z
        rows += [a_miss[i] for i in range(a_miss.shape[0])
                 if slack[i] <= active_tol * max(1.0, abs(y_min))]
    scale = max(1.0, np.linalg.norm(2.0 * a_obs.T @ y_obs))
    if not rows:
        return np.linalg.norm(grad) / scale
    Gt = np.array(rows).T
    _, res = nnls(Gt, -grad)
    return res / scale


# --------------------------------------------------------------------------
# greedy solvers

def _check_inputs(y_bar, mask, a, c):
    A = a.a if isinstance(a, MeasurementMatrix) else np.asarray(a, dtype=float)
    y = np.asarray(y_bar, dtype=float).ravel()
    mask = np.ones(y.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    if c < 1:
        raise InvalidArgumentError("sparsity level must be >= 1")
    if y.size != A.shape[0] or mask.size != A.shape[0]:
        raise InvalidArgumentError("y, mask and A row counts differ")
    if not mask.any():
        raise InvalidArgumentError("at least one valid beam is required")
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        raise InvalidArgumentError("measurement matrix has all-zero columns")
    return A, y, mask, norms


def _greedy(y_bar, mask, a, c, rule, weights=None, constrained=True, max_iter=None):
    A, y, mask, norms = _check_inputs(y_bar, mask, a, c)
    n_a = A.shape[1]
    A_hat = A / norms
    A_o, A_m = A[mask], A[~mask]
    Ahat_o = A_hat[mask]
    y_o = y[mask]
    y_min = float(y_o.min())
    use_miss = constrained and A_m.shape[0] > 0 and y_min > 0
    mag_share = norms / norms.sum()

    x = np.zeros(n_a)
    support = np.zeros(0, dtype=int)
    r = y_o.copy()
    y_norm = np.linalg.norm(y_o)
    trace = [float(np.linalg.norm(r))]
    tabu = set()
    if max_iter is None:
        max_iter = 10 * c + 10
    if y_norm == 0:
        return ApsEstimate(x, support, 0.0, tuple(trace))

    for _ in range(max_iter):
        corr = Ahat_o.T @ r
        if rule == "gm":
            score = weights * corr
        elif rule == "nnomp":
            score = corr.copy()
        else:
            denom = np.linalg.norm(corr)
            score = (corr / denom if denom > 0 else np.zeros_like(corr)) + mag_share
        score[support] = -np.inf
        if tabu:
            score[list(tabu)] = -np.inf
        if not np.isfinite(score.max()):
            break
        q = int(np.argmax(score))  # first maximum: lowest index wins ties
        cols = np.union1d(support, [q])
        if use_miss:
            z = constrained_nnls(A_o[:, cols], y_o, A_m[:, cols], y_min)
        else:
            z = constrained_nnls(A_o[:, cols], y_o)
        x_new = np.zeros(n_a)
        x_new[cols] = z
        new_support = np.flatnonzero(x_new > 0)
        if np.array_equal(new_support, support):
            tabu.add(q)
        else:
            tabu.clear()
        x, support = x_new, new_support
        r = y_o - A_o @ x
        trace.append(float(np.linalg.norm(r)))
        if support.size >= c:
            break
        if np.linalg.norm(r) <= 1e-12 * y_norm:
            break
        rest = np.ones(n_a, dtype=bool)
        rest[support] = False
        if (Ahat_o.T @ r)[rest].max() < 0:
            break
    return ApsEstimate(x, support, float(np.linalg.norm(y_o - A_o @ x)), tuple(trace))


def _prior_weights(a, prior):
    grid = a.grid if isinstance(a, MeasurementMatrix) else None
    if prior is None:
        n = (a.a if isinstance(a, MeasurementMatrix) else np.asarray(a)).shape[1]
        return np.ones(n)
    if grid is None:
        raise InvalidArgumentError("geometry prior needs a measurement matrix with an angular grid")
    return geometric_weights(prior, grid)


def gm_nnomp(y_bar, mask, a, prior: Optional[GeometryPrior], c: int,
             weights=None, max_iter=None) -> ApsEstimate:
    """Geometry- and missing-value-aware NNOMP.

    ``weights`` overrides the prior-derived column weights (useful when ``a``
    carries no angular grid). ``prior=None`` means uniform weights.
    """
    if weights is None:
        weights = _prior_weights(a, prior)
    return _greedy(y_bar, mask, a, c, "gm", weights=np.asarray(weights, dtype=float),
                   constrained=True, max_iter=max_iter)


def nnomp(y_bar, mask, a, c: int, max_iter=None) -> ApsEstimate:
    return _greedy(y_bar, mask, a, c, "nnomp", constrained=False, max_iter=max_iter)


def wnomp(y_bar, mask, a, c: int, max_iter=None) -> ApsEstimate:
    return _greedy(y_bar, mask, a, c, "wnomp", constrained=False, max_iter=max_iter)


def estimate_aps(solver, y_bar, mask, a, c, prior=None):
    """Dispatch by solver name: 'gm', 'nnomp' or 'wnomp'."""
    if solver == "gm":
        return gm_nnomp(y_bar, mask, a, prior, c)
    if solver == "nnomp":
        return nnomp(y_bar, mask, a, c)
    if solver == "wnomp":
        return wnomp(y_bar, mask, a, c)
    raise InvalidArgumentError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
