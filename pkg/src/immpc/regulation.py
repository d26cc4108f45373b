"""Oracles against which the controller is judged: the regulation equations
for (Pi1, Pi2), the admissible-reference set, and the optimal reachable
output-reference program."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import qp as qpmod

RESIDUAL_TOL = 1e-8
COND_LIMIT = 1e12


@dataclass(frozen=True)
class RegulationSolution:
    """Pi1, Pi2 with x_ref = Pi1 w, u_ref = Pi2 w and certified residuals."""

    Pi1: np.ndarray
    Pi2: np.ndarray
    residuals: tuple  # (dynamics residual, output residual), both max-abs


def solve_regulation(plant, E, F, gen) -> RegulationSolution:
    """Solve Pi1 S = A Pi1 + E + B Pi2 and C Pi1 + F = 0 (vectorized form)."""
    E = np.atleast_2d(np.asarray(E, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    A, B, C = plant.A, plant.B, plant.C
    n, m, p = plant.n, plant.m, plant.p
    q = gen.q
    S = gen.S
    Iq = np.eye(q)
    top = np.hstack([np.kron(S.T, np.eye(n)) - np.kron(Iq, A), -np.kron(Iq, B)])
    bot = np.hstack([np.kron(Iq, C), np.zeros((p * q, m * q))])
    M = np.vstack([top, bot])
    rhs = np.concatenate([E.reshape(-1, order="F"), -F.reshape(-1, order="F")])
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] <= 0 or sv[0] / sv[-1] > COND_LIMIT:
        raise ValueError("regulation problem not well-defined")
    sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    Pi1 = sol[:n * q].reshape(n, q, order="F")
    Pi2 = sol[n * q:].reshape(m, q, order="F")
    r_dyn = float(np.max(np.abs(Pi1 @ S - A @ Pi1 - E - B @ Pi2)))
    r_out = float(np.max(np.abs(C @ Pi1 + F)))
    if max(r_dyn, r_out) > RESIDUAL_TOL:
        raise ValueError("regulation problem not well-defined")
    return RegulationSolution(Pi1, Pi2, (r_dyn, r_out))


@dataclass(frozen=True)
class ArtificialReferenceParam:
    """Stacked reference parameters, one (1 + 2 n_S)-block per signal component.

    Block layout per component: constant entry first (when the generator has
    one), then (cos, sin) pairs per frequency.
    """

    theta_x: np.ndarray
    theta_u: np.ndarray
    theta_y: np.ndarray
    gen: object
    gen_a: object

    def __post_init__(self):
        object.__setattr__(self, "theta_x", np.asarray(self.theta_x, dtype=float).ravel())
        object.__setattr__(self, "theta_u", np.asarray(self.theta_u, dtype=float).ravel())
        object.__setattr__(self, "theta_y", np.asarray(self.theta_y, dtype=float).ravel())
        if self.theta_x.size % self.gen.q or self.theta_u.size % self.gen.q:
            raise ValueError("theta_x/theta_u length must be a multiple of q")
        if self.theta_y.size % self.gen_a.q:
            raise ValueError("theta_y length must be a multiple of q_a")

    @property
    def n(self):
        return self.theta_x.size // self.gen.q

    @property
    def m(self):
        return self.theta_u.size // self.gen.q

    @property
    def p(self):
        return self.theta_y.size // self.gen_a.q

    def x_at(self, t):
        return self.gen.blk_row_at(self.n, t) @ self.theta_x

    def u_at(self, t):
        return self.gen.blk_row_at(self.m, t) @ self.theta_u

    def y_at(self, t):
        return self.gen_a.blk_row_at(self.p, t) @ self.theta_y

    def z_blocks(self, poly):
        """(z0, [(z_j1, z_j2)...]) rows of Cbar theta_x + Dbar theta_u."""
        q = self.gen.q
        Tx = self.theta_x.reshape(self.n, q)
        Tu = self.theta_u.reshape(self.m, q)
        ofs = 1 if self.gen.include_constant else 0
        z0 = (poly.Cbar @ Tx[:, 0] + poly.Dbar @ Tu[:, 0]) if ofs else \
            np.zeros(poly.n_c)
        pairs = []
        for j in range(self.gen.n_S):
            c = poly.Cbar @ Tx[:, ofs + 2 * j] + poly.Dbar @ Tu[:, ofs + 2 * j]
            s = poly.Cbar @ Tx[:, ofs + 2 * j + 1] + poly.Dbar @ Tu[:, ofs + 2 * j + 1]
            pairs.append((c, s))
        return z0, pairs


def admissible_check(ref: ArtificialReferenceParam, poly, sigma):
    """Membership in Z_{F,sigma}: per-row margin of the sum-of-amplitudes bound.

    Returns (ok, margins) with margins = cbar - sigma - lhs per row.
    """
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float).ravel()
                            if np.ndim(sigma) else np.full(poly.n_c, float(sigma)),
                            (poly.n_c,))
    if np.any(sigma <= 0):
        raise ValueError("sigma entries must be positive")
    z0, pairs = ref.z_blocks(poly)
    lhs = z0.copy()
    for (c, s) in pairs:
        lhs = lhs + np.hypot(c, s)
    margins = poly.cbar - sigma - lhs
    return bool(np.all(margins >= 0)), margins


def _theta_coeff_rows(gen, dim, t, base_ofs, width):
    """Row block mapping a width-long decision vector to blkdiag(C_S S^t) theta."""
    M = np.zeros((dim, width))
    M[:, base_ofs:base_ofs + dim * gen.q] = gen.blk_row_at(dim, t)
    return M


def optimal_reference(plant, E, F, gen, gen_a, Pa, poly, sigma, w_t,
                      soc_facets=32):
    """Minimum-weight artificial output reference consistent with the true
    disturbance trajectory and the shrunk constraint set.

    Solves  min ||theta_y||^2_Pa  over (theta_x, theta_u, theta_y)
    s.t.    x_a(k+1) = A x_a(k) + E w(t+k) + B u_a(k)      k = 0..q-1
            y_a(k)   = C x_a(k) + F w(t+k)                 k = 0..q-1
            (theta_x, theta_u) in Z_{F,sigma}  (shared polyhedral approximation)

    The trajectory rows are sampled at q consecutive steps, which pins the
    whole quasi-periodic family.  A tiny ridge on (theta_x, theta_u) selects
    the minimum-norm realization when several produce the same theta_y.

    Returns (ArtificialReferenceParam, evaluator) with evaluator(k) = y*(t+k).
    """
    E = np.atleast_2d(np.asarray(E, dtype=float))
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Pa = np.atleast_2d(np.asarray(Pa, dtype=float))
    w_t = np.asarray(w_t, dtype=float).ravel()
    n, m, p = plant.n, plant.m, plant.p
    q, q_a = gen.q, gen_a.q
    if gen_a.n_S > gen.n_S:
        raise ValueError("artificial generator cannot add frequencies")
    dx, du, dy = n * q, m * q, p * q_a
    d = dx + du + dy
    ofs_x, ofs_u, ofs_y = 0, dx, dx + du

    w_traj = [w_t]
    for _ in range(q):
        w_traj.append(gen.S @ w_traj[-1])

    Aeq_rows, beq_rows = [], []
    for k in range(q):
        Mx1 = _theta_coeff_rows(gen, n, k + 1, ofs_x, d)
        Mx0 = _theta_coeff_rows(gen, n, k, ofs_x, d)
        Mu0 = _theta_coeff_rows(gen, m, k, ofs_u, d)
        Aeq_rows.append(Mx1 - plant.A @ Mx0 - plant.B @ Mu0)
        beq_rows.append(E @ w_traj[k])
        My0 = _theta_coeff_rows(gen_a, p, k, ofs_y, d)
        Aeq_rows.append(My0 - plant.C @ Mx0)
        beq_rows.append(F @ w_traj[k])
    Aeq = np.vstack(Aeq_rows)
    beq = np.concatenate(beq_rows)

    groups, bounds = _zf_row_groups(poly, gen, d, ofs_x, ofs_u, sigma)
    Ain, bin_, n_aux = qpmod.soc_rows(groups, bounds, soc_facets)

    H = np.zeros((d + n_aux, d + n_aux))
    H[ofs_y:ofs_y + dy, ofs_y:ofs_y + dy] = 2.0 * Pa
    ridge = 1e-8
    for sl in (slice(ofs_x, ofs_x + dx), slice(ofs_u, ofs_u + du)):
        H[sl, sl] += 2.0 * ridge * np.eye(sl.stop - sl.start)
    Aeq_full = np.hstack([Aeq, np.zeros((Aeq.shape[0], n_aux))])
    prob = qpmod.QPProblem(H, np.zeros(d + n_aux), Aeq_full, beq, Ain, bin_)
    sol = qpmod.solve_qp(prob)
    if sol.status == "infeasible":
        raise ValueError("no admissible reference: Z_{F,sigma} is empty "
                         "(sigma too large?)")
    if sol.status != "optimal":
        raise ValueError(f"optimal-reference program did not converge: {sol.status}")
    theta = ArtificialReferenceParam(sol.x_star[ofs_x:ofs_x + dx],
                                     sol.x_star[ofs_u:ofs_u + du],
                                     sol.x_star[ofs_y:ofs_y + dy],
                                     gen, gen_a)

    def evaluator(k):
        return theta.y_at(k)

    return theta, evaluator


def _zf_row_groups(poly, gen, d, ofs_x, ofs_u, sigma):
    """Coefficient rows of Z_{F,sigma} over a decision vector holding
    theta_x at ofs_x and theta_u at ofs_u."""
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float).ravel()
                            if np.ndim(sigma) else np.full(poly.n_c, float(sigma)),
                            (poly.n_c,))
    if np.any(sigma <= 0):
        raise ValueError("sigma entries must be positive")
    n, m, q = poly.n, poly.m, gen.q
    c0 = 1 if gen.include_constant else 0
    groups = []
    for i in range(poly.n_c):
        z0 = np.zeros(d)
        if c0:
            z0[ofs_x:ofs_x + n * q:q] = poly.Cbar[i]
            z0[ofs_u:ofs_u + m * q:q] = poly.Dbar[i]
        pairs = []
        for j in range(gen.n_S):
            ra = np.zeros(d)
            rb = np.zeros(d)
            ra[ofs_x + c0 + 2 * j:ofs_x + n * q:q] = poly.Cbar[i]
            ra[ofs_u + c0 + 2 * j:ofs_u + m * q:q] = poly.Dbar[i]
            rb[ofs_x + c0 + 2 * j + 1:ofs_x + n * q:q] = poly.Cbar[i]
            rb[ofs_u + c0 + 2 * j + 1:ofs_u + m * q:q] = poly.Dbar[i]
            pairs.append((ra, rb))
        groups.append((z0, pairs))
    return groups, poly.cbar - sigma
