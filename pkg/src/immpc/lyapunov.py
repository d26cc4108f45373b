"""Terminal ingredients: companion realizations, discrete Lyapunov solves, and
the reference weight that the artificial-reference shift leaves invariant."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def companion_realization(Q_coeffs) -> np.ndarray:
    """Block-companion matrix of sum_i Q_i e(t-i) = 0 with states e(t-i), i < n_d.

    First block row is [-Q0^-1 Q_1, ..., -Q0^-1 Q_nd]; identity shifts below.
    Returns the 0x0 matrix when n_d = 0.
    """
    Qs = [np.atleast_2d(np.asarray(Q, dtype=float)) for Q in Q_coeffs]
    if not Qs:
        raise ValueError("need at least Q_0")
    d = Qs[0].shape[0]
    n_d = len(Qs) - 1
    if n_d == 0:
        return np.zeros((0, 0))
    if abs(np.linalg.det(Qs[0])) < 1e-12:
        raise ValueError("Q_0 must be invertible")
    Q0_inv = np.linalg.inv(Qs[0])
    A_e = np.zeros((d * n_d, d * n_d))
    for i in range(1, n_d + 1):
        A_e[:d, (i - 1) * d:i * d] = -Q0_inv @ Qs[i]
    if n_d > 1:
        A_e[d:, :-d] = np.eye(d * (n_d - 1))
    return A_e


def dlyap(A_e: np.ndarray, Qblk: np.ndarray, eps: float) -> np.ndarray:
    """Solve A' P A - P + Qblk + eps*I = 0 for Schur-stable A_e (Kronecker form).

    The eps slack turns the strict inequality A'PA - P + Q < 0 into an equation.
    """
    A_e = np.atleast_2d(np.asarray(A_e, dtype=float))
    if A_e.size == 0:
        return np.zeros((0, 0))
    Qblk = np.atleast_2d(np.asarray(Qblk, dtype=float))
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    k = A_e.shape[0]
    if np.max(np.abs(np.linalg.eigvals(A_e))) >= 1.0:
        raise ValueError("filter numerator not Schur")
    rhs = -(Qblk + eps * np.eye(k)).reshape(-1, order="F")
    M = np.kron(A_e.T, A_e.T) - np.eye(k * k)
    P = np.linalg.solve(M, rhs).reshape(k, k, order="F")
    return 0.5 * (P + P.T)


@dataclass(frozen=True)
class TerminalCost:
    """Lyapunov pair (Px, Pu) for the stacked tail windows; empty when n_d = 0."""

    Px: np.ndarray
    Pu: np.ndarray
    epsilon: float

    @property
    def is_zero(self):
        return self.Px.size == 0 and self.Pu.size == 0


def build_terminal_cost(Gx, Gu, Q, R, eps_scale=1e-6) -> TerminalCost:
    """Solve the two terminal Lyapunov equations for the filters' free recursions.

    When both numerator degrees are zero, V_N is identically zero and the
    terminal constraints alone close the cost-decrease argument.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Ax = companion_realization(list(Gx.numerators))
    Au = companion_realization(list(Gu.numerators))
    Px = np.zeros((0, 0))
    Pu = np.zeros((0, 0))
    eps = 0.0
    if Ax.size:
        Qblk = np.kron(np.eye(Gx.n_d), Q)
        eps = eps_scale * max(1.0, float(np.max(np.abs(Qblk))))
        Px = dlyap(Ax, Qblk, eps)
    if Au.size:
        Rblk = np.kron(np.eye(Gu.n_d), R)
        eps_u = eps_scale * max(1.0, float(np.max(np.abs(Rblk))))
        Pu = dlyap(Au, Rblk, eps_u)
        eps = max(eps, eps_u)
    return TerminalCost(Px, Pu, eps)


def build_Pa(gen_a, weights, p: int | None = None) -> np.ndarray:
    """Diagonal reference weight with equal entries inside each rotation pair.

    Accepts a scalar (requires the output count p), a (p, 1 + n_Sa) per-output
    per-block array, or a full diagonal of length p*q_a (validated for pair
    equality). The equal pairing makes
    blkdiag_p(S_a)' Pa blkdiag_p(S_a) - Pa = 0 exactly.
    """
    q_a = gen_a.q
    n_blocks = (1 if gen_a.include_constant else 0) + gen_a.n_S
    w = np.asarray(weights, dtype=float)
    if w.ndim == 0:
        if w <= 0:
            raise ValueError("weights must be positive")
        if p is None:
            raise ValueError("scalar weight needs the output count p")
        return float(w) * np.eye(p * q_a)
    if w.ndim == 1:
        if w.size % q_a != 0:
            raise ValueError("flat diagonal length must be a multiple of q_a")
        diag = w
        _validate_pairs(diag, gen_a)
        return np.diag(diag)
    p = w.shape[0]
    if w.shape[1] != n_blocks:
        raise ValueError(f"expected {n_blocks} block weights per output")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    diag = []
    for i in range(p):
        ofs = 0
        if gen_a.include_constant:
            diag.append(w[i, 0])
            ofs = 1
        for j in range(gen_a.n_S):
            diag.extend([w[i, ofs + j], w[i, ofs + j]])
    return np.diag(np.array(diag))


def _validate_pairs(diag, gen_a):
    q_a = gen_a.q
    if np.any(np.asarray(diag) <= 0):
        raise ValueError("weights must be positive")
    p = len(diag) // q_a
    for i in range(p):
        blk = diag[i * q_a:(i + 1) * q_a]
        ofs = 1 if gen_a.include_constant else 0
        for j in range(gen_a.n_S):
            if blk[ofs + 2 * j] != blk[ofs + 2 * j + 1]:
                raise ValueError("unequal weights inside a rotation pair")
