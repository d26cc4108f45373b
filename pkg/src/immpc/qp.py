"""Dense convex QP solver with equality/inequality rows, plus the polyhedral
inner approximation of sum-of-norms (second-order-cone) constraint rows.

minimize    0.5 x'Hx + f'x
subject to  Aeq x = beq,  Aineq x <= bineq

The solver reduces equalities to a null-space problem (QR with redundancy
elimination), runs a Mehrotra predictor-corrector interior-point method on the
reduced problem, and polishes the result by re-solving the KKT system of the
detected active set against the unregularized data.  Residuals are reported
for the row-normalized, objective-normalized problem; reaching "optimal"
status requires all of them to be at most 1e-7.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

KKT_TOL = 1e-7
EQ_RANK_TOL = 1e-10
H_CLAMP = 1e-9
MAX_ITER = 60


@dataclass
class QPProblem:
    """Dense convex QP; H is symmetrized on construction.

    ``offset`` is a constant added to the reported objective (pinned history
    terms in the MPC land there).  ``cache_key`` lets a caller that reuses the
    same structural matrices across many solves skip content hashing; equal
    keys promise identical H/Aeq/Aineq.
    """

    H: np.ndarray
    f: np.ndarray
    Aeq: np.ndarray
    beq: np.ndarray
    Aineq: np.ndarray
    bineq: np.ndarray
    names: dict | None = None
    offset: float = 0.0
    cache_key: str | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if not np.array_equal(self.H, self.H.T):
            self.H = 0.5 * (self.H + self.H.T)
        self.f = np.asarray(self.f, dtype=float).ravel()
        d = self.f.size
        if self.H.shape != (d, d):
            raise ValueError("H/f dimensions inconsistent")
        self.Aeq = np.asarray(self.Aeq, dtype=float).reshape(-1, d)
        self.beq = np.asarray(self.beq, dtype=float).ravel()
        self.Aineq = np.asarray(self.Aineq, dtype=float).reshape(-1, d)
        self.bineq = np.asarray(self.bineq, dtype=float).ravel()
        if self.Aeq.shape[0] != self.beq.size or self.Aineq.shape[0] != self.bineq.size:
            raise ValueError("constraint row counts inconsistent")

    @property
    def dim(self):
        return self.f.size


@dataclass
class QPSolution:
    x_star: np.ndarray
    objective: float
    status: str  # optimal | infeasible | max_iter
    kkt_residuals: tuple  # (stationarity, primal_eq, primal_ineq, complementarity)
    lam_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    farkas: tuple | None = None  # (nu_eq, lam_ineq) certificate rows combination
    iterations: int = 0


class _BoundedCache(OrderedDict):
    def __init__(self, maxlen=48):
        super().__init__()
        self.maxlen = maxlen

    def put(self, key, value):
        self[key] = value
        if len(self) > self.maxlen:
            self.popitem(last=False)


_eq_cache = _BoundedCache()
_mat_cache = _BoundedCache()


def _content_key(tag, *arrays):
    h = hashlib.blake2b(digest_size=16)
    h.update(tag.encode())
    for a in arrays:
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _row_normalize(A, b):
    if A.shape[0] == 0:
        return A, b, np.zeros(0)
    scale = np.linalg.norm(A, axis=1)
    scale[scale == 0.0] = 1.0
    return A / scale[:, None], b / scale, scale


class _EqReduction:
    """QR-based elimination of redundant equality rows plus null-space basis."""

    def __init__(self, A_norm):
        e, d = A_norm.shape
        if e == 0:
            self.kept = np.zeros(0, dtype=int)
            self.dropped = np.zeros(0, dtype=int)
            self.Q1 = np.zeros((d, 0))
            self.R1 = np.zeros((0, 0))
            self.Z = np.eye(d)
            return
        Q, R, piv = scipy.linalg.qr(A_norm.T, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        ref = diag[0] if diag.size else 0.0
        rank = int(np.sum(diag > EQ_RANK_TOL * max(ref, 1e-300)))
        self.kept = piv[:rank]
        self.dropped = piv[rank:]
        A_r = A_norm[self.kept]
        Qf, Rf = scipy.linalg.qr(A_r.T, mode="full")
        self.Q1 = Qf[:, :rank]
        self.R1 = Rf[:rank, :rank]
        self.Z = Qf[:, rank:]

    def particular(self, b_norm):
        """Min-norm solution of the kept rows."""
        if self.kept.size == 0:
            return np.zeros(self.Z.shape[0])
        y = scipy.linalg.solve_triangular(self.R1.T, b_norm[self.kept], lower=True)
        return self.Q1 @ y

    def rowspace_coeffs(self, v):
        """mu with A_r' mu = v for v in the row space of the kept rows."""
        return scipy.linalg.solve_triangular(self.R1, self.Q1.T @ v, lower=False)


def _eq_reduction(Aeq_norm, cache_key):
    key = ((cache_key, Aeq_norm.shape) if cache_key
           else _content_key("eq", Aeq_norm))
    hit = _eq_cache.get(key)
    if hit is None:
        hit = _EqReduction(Aeq_norm)
        _eq_cache.put(key, hit)
    return hit


def _reduced_mats(H_used, H_raw, f_scaled, red, Aineq_norm, cache_key):
    key = (cache_key or _content_key("mats", H_used, Aineq_norm),
           H_used.shape, Aineq_norm.shape)
    hit = _mat_cache.get(key)
    if hit is None:
        Z = red.Z
        ZtHu = Z.T @ H_used
        hit = {
            "M_used": ZtHu @ Z,
            "M_raw": Z.T @ H_raw @ Z,
            "ZtHu": ZtHu,
            "ZtHr": Z.T @ H_raw,
            "G": Aineq_norm @ Z if Aineq_norm.shape[0] else np.zeros((0, Z.shape[1])),
        }
        _mat_cache.put(key, hit)
    return hit


def _chol_solve(M, rhs, ridge=0.0):
    k = M.shape[0]
    for bump in (ridge, 1e-12, 1e-10, 1e-8, 1e-6):
        try:
            c, low = scipy.linalg.cho_factor(M + bump * np.eye(k), lower=True,
                                             check_finite=False)
            return scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        except scipy.linalg.LinAlgError:
            continue
    return np.linalg.lstsq(M, rhs, rcond=None)[0]


def _ipm(M, g, G, h, z0=None, max_iter=MAX_ITER):
    """Mehrotra predictor-corrector for min 0.5 z'Mz + g'z s.t. Gz <= h.

    Returns (z, lam, converged, iters).  M must be positive definite.
    """
    r = M.shape[0]
    ell = G.shape[0]
    if ell == 0:
        return _chol_solve(M, -g), np.zeros(0), True, 0
    z = z0 if z0 is not None else _chol_solve(M, -g)
    s = h - G @ z
    s = np.where(s < 1.0, 1.0, s)
    lam = np.ones(ell)
    scale = max(1.0, float(np.max(np.abs(g))) if g.size else 1.0,
                float(np.max(np.abs(h))) if h.size else 1.0)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r_d = M @ z + g + G.T @ lam
        r_p = G @ z + s - h
        mu = float(s @ lam) / ell
        if max(np.max(np.abs(r_d)), np.max(np.abs(r_p)), mu) <= 1e-10 * scale:
            converged = True
            break
        d = lam / s
        K = M + (G.T * d) @ G
        # affine (predictor) step
        rc = s * lam
        rhs = -r_d - G.T @ ((lam * r_p - rc) / s)
        dz_aff = _chol_solve(K, rhs)
        ds_aff = -r_p - G @ dz_aff
        dlam_aff = (lam * r_p + lam * (G @ dz_aff) - rc) / s
        a_p = _max_step(s, ds_aff)
        a_d = _max_step(lam, dlam_aff)
        mu_aff = float((s + a_p * ds_aff) @ (lam + a_d * dlam_aff)) / ell
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector step
        rc = s * lam + ds_aff * dlam_aff - sigma * mu
        rhs = -r_d - G.T @ ((lam * r_p - rc) / s)
        dz = _chol_solve(K, rhs)
        ds = -r_p - G @ dz
        dlam = (lam * r_p + lam * (G @ dz) - rc) / s
        alpha = 0.9995 * min(_max_step(s, ds), _max_step(lam, dlam))
        alpha = min(1.0, alpha)
        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dlam
        if np.max(lam) > 1e12 * scale:
            break  # diverging duals, let the caller classify
    return z, lam, converged, it


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _polish(M_raw, g_raw, G, h, z, lam):
    """Re-solve the active-set KKT system against unregularized data."""
    if G.shape[0] == 0:
        z_new = np.linalg.lstsq(M_raw, -g_raw, rcond=None)[0]
        return z_new, lam, True
    slack = h - G @ z
    active = np.flatnonzero((lam > 1e-9) & (lam >= slack))
    r = M_raw.shape[0]
    a = active.size
    K = np.zeros((r + a, r + a))
    K[:r, :r] = M_raw
    if a:
        K[:r, r:] = G[active].T
        K[r:, :r] = G[active]
    rhs = np.concatenate([-g_raw, h[active]])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    z_new = sol[:r]
    lam_new = np.zeros(G.shape[0])
    lam_new[active] = sol[r:]
    ok = (np.all(lam_new >= -1e-9)
          and (G.shape[0] == 0 or np.max(G @ z_new - h) <= 1e-9))
    return z_new, np.maximum(lam_new, 0.0), ok


def _h_min_eig(H, cache_key):
    key = ("heig", cache_key) if cache_key else _content_key("heig", H)
    hit = _mat_cache.get(key)
    if hit is None:
        hit = float(np.linalg.eigvalsh(H)[0]) if H.size else 0.0
        _mat_cache.put(key, hit)
    return hit


def solve_qp(problem: QPProblem, warm_start=None) -> QPSolution:
    """Solve a dense convex QP to KKT-certified optimality.

    Returns status "optimal" only when the independent residual recomputation
    on the row-normalized problem passes at 1e-7; inconsistent equalities or
    empty inequality systems yield "infeasible" with a Farkas-type certificate.
    """
    d = problem.dim
    H_raw = problem.H
    lam_min = _h_min_eig(H_raw, problem.cache_key)
    if lam_min < -H_CLAMP * max(1.0, float(np.max(np.abs(H_raw))) if H_raw.size else 1.0):
        raise ValueError("H is not positive semidefinite")
    H_used = H_raw
    if lam_min < 1e-8:
        H_used = H_raw + H_CLAMP * np.eye(d)

    s_obj = max(1.0, float(np.max(np.abs(H_raw))) if H_raw.size else 0.0,
                float(np.max(np.abs(problem.f))) if problem.f.size else 0.0)
    Hs = H_used / s_obj
    Hs_raw = H_raw / s_obj
    fs = problem.f / s_obj

    Aeq_n, beq_n, eq_scale = _row_normalize(problem.Aeq, problem.beq)
    Ain_n, bin_n, in_scale = _row_normalize(problem.Aineq, problem.bineq)

    red = _eq_reduction(Aeq_n, problem.cache_key)
    x_p = red.particular(beq_n)

    # dropped-row consistency: a violated dependent row certifies emptiness
    if red.dropped.size:
        resid = Aeq_n[red.dropped] @ x_p - beq_n[red.dropped]
        bad = np.flatnonzero(np.abs(resid) > 1e-8)
        if bad.size:
            j = red.dropped[bad[0]]
            mu = red.rowspace_coeffs(Aeq_n[j])
            nu = np.zeros(problem.Aeq.shape[0])
            nu[red.kept] = -mu
            nu[j] = 1.0
            if nu @ beq_n > 0:
                nu = -nu
            return QPSolution(x_p, float("nan"), "infeasible",
                              (float("nan"),) * 4, farkas=(nu, np.zeros(Ain_n.shape[0])))

    mats = _reduced_mats(Hs, Hs_raw, fs, red, Ain_n, problem.cache_key)
    Z = red.Z
    g = mats["ZtHu"] @ x_p + Z.T @ fs
    g_raw = mats["ZtHr"] @ x_p + Z.T @ fs
    G = mats["G"]
    h = bin_n - (Ain_n @ x_p if Ain_n.shape[0] else np.zeros(0))

    z0 = None
    if warm_start is not None:
        z0 = Z.T @ (np.asarray(warm_start, dtype=float).ravel() - x_p)

    z, lam, converged, iters = _ipm(mats["M_used"], g, G, h, z0=z0)

    if not converged and G.shape[0]:
        feas, lam_ph, cert = _phase1(mats["M_used"], G, h)
        if not feas:
            nu = _lift_eq_multipliers(red, Ain_n, lam_ph, problem.Aeq.shape[0])
            return QPSolution(x_p + Z @ z, float("nan"), "infeasible",
                              (float("nan"),) * 4, farkas=(nu, lam_ph),
                              iterations=iters)

    z_pol, lam_pol, ok = _polish(mats["M_raw"], g_raw, G, h, z, lam)
    if ok:
        z, lam = z_pol, lam_pol

    x = x_p + Z @ z
    nu_full = _stationarity_eq_multipliers(red, Hs_raw, fs, Ain_n, x, lam,
                                           problem.Aeq.shape[0])
    resid = _kkt_residuals(Hs_raw, fs, Aeq_n, beq_n, Ain_n, bin_n, x, nu_full, lam)
    status = "optimal" if (converged or ok) and max(resid) <= KKT_TOL else "max_iter"
    obj = float(0.5 * x @ (H_raw @ x) + problem.f @ x + problem.offset)
    lam_eq_raw = s_obj * nu_full / eq_scale if eq_scale.size else nu_full
    lam_in_raw = s_obj * lam / in_scale if in_scale.size else lam
    return QPSolution(x, obj, status, resid, lam_eq=lam_eq_raw,
                      lam_ineq=lam_in_raw, iterations=iters)


def _phase1(M, G, h):
    """min 0.5 t^2 + tiny ||z||^2 s.t. Gz - t <= h.  t* > tol proves emptiness."""
    r = M.shape[0]
    ell = G.shape[0]
    M1 = np.zeros((r + 1, r + 1))
    M1[:r, :r] = 1e-8 * np.eye(r)
    M1[r, r] = 1.0
    G1 = np.hstack([G, -np.ones((ell, 1))])
    t0 = max(1.0, float(-np.min(h)) + 1.0)
    z0 = np.concatenate([np.zeros(r), [t0]])
    zt, lam, converged, _ = _ipm(M1, np.zeros(r + 1), G1, h, z0=z0, max_iter=100)
    t_star = zt[r]
    if t_star > 1e-6:
        total = lam.sum()
        lam = lam / total if total > 0 else lam
        return False, lam, t_star
    return True, lam, t_star


def _lift_eq_multipliers(red, Ain_n, lam, n_eq):
    nu = np.zeros(n_eq)
    if red.kept.size and Ain_n.shape[0]:
        v = Ain_n.T @ lam
        nu[red.kept] = -red.rowspace_coeffs(v - red.Z @ (red.Z.T @ v))
    return nu


def _stationarity_eq_multipliers(red, Hs_raw, fs, Ain_n, x, lam, n_eq):
    """Least-squares equality multipliers from the stationarity condition."""
    grad = Hs_raw @ x + fs
    if Ain_n.shape[0]:
        grad = grad + Ain_n.T @ lam
    nu = np.zeros(n_eq)
    if red.kept.size:
        nu[red.kept] = -red.rowspace_coeffs(grad - red.Z @ (red.Z.T @ grad))
    return nu


def _kkt_residuals(Hs_raw, fs, Aeq_n, beq_n, Ain_n, bin_n, x, nu, lam):
    grad = Hs_raw @ x + fs
    if Aeq_n.shape[0]:
        grad = grad + Aeq_n.T @ nu
    if Ain_n.shape[0]:
        grad = grad + Ain_n.T @ lam
    stat = float(np.max(np.abs(grad))) if grad.size else 0.0
    peq = float(np.max(np.abs(Aeq_n @ x - beq_n))) if Aeq_n.shape[0] else 0.0
    if Ain_n.shape[0]:
        viol = Ain_n @ x - bin_n
        pin = float(max(0.0, np.max(viol)))
        comp = float(np.max(np.abs(lam * viol)))
    else:
        pin = 0.0
        comp = 0.0
    return (stat, peq, pin, comp)


def soc_rows(row_groups, bounds, K: int):
    """Polyhedral inner approximation of sum-of-norms rows.

    Each group is (z0_row, [(row_a, row_b), ...]) of coefficient rows over the
    base decision vector; the true constraint is
        z0 + sum_j ||(a_j, b_j)|| <= bound.
    Every norm gets an auxiliary facet variable t_j with K facets
        cos(phi_k) a_j + sin(phi_k) b_j <= t_j,
    and the budget row is tightened by cos(pi/K) so that any point satisfying
    the linear rows satisfies the true row (inner, conservative).  Groups with
    no pairs emit one plain untightened linear row.

    Returns (A, b, n_aux) with A over [base_vars; aux_vars].
    """
    if K < 8 or K % 2 != 0:
        raise ValueError("facet count K must be even and at least 8")
    groups = list(row_groups)
    bounds = np.asarray(bounds, dtype=float).ravel()
    if len(groups) != bounds.size:
        raise ValueError("one bound per row group required")
    d = groups[0][0].size if groups else 0
    n_aux = sum(len(pairs) for _, pairs in groups)
    cosK = np.cos(np.pi / K)
    phis = 2.0 * np.pi * np.arange(K) / K
    rows = []
    rhs = []
    aux_ofs = 0
    for (z0_row, pairs), bound in zip(groups, bounds):
        z0_row = np.asarray(z0_row, dtype=float).ravel()
        if not pairs:
            row = np.zeros(d + n_aux)
            row[:d] = z0_row
            rows.append(row)
            rhs.append(bound)
            continue
        for (ra, rb) in pairs:
            ra = np.asarray(ra, dtype=float).ravel()
            rb = np.asarray(rb, dtype=float).ravel()
            for phi in phis:
                row = np.zeros(d + n_aux)
                row[:d] = np.cos(phi) * ra + np.sin(phi) * rb
                row[d + aux_ofs] = -1.0
                rows.append(row)
                rhs.append(0.0)
            aux_ofs += 1
        budget = np.zeros(d + n_aux)
        budget[:d] = cosK * z0_row
        budget[d + aux_ofs - len(pairs):d + aux_ofs] = 1.0
        rows.append(budget)
        rhs.append(cosK * bound)
    A = np.array(rows).reshape(-1, d + n_aux) if rows else np.zeros((0, d + n_aux))
    return A, np.array(rhs), n_aux
