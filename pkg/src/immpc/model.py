"""Linear plant representations, Euler-forward discretization, and the four-tank preset.

All plant quantities live in deviation coordinates around the operating point;
absolute levels only appear when logging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

_RANK_TOL = 1e-8


def _mat(value, name):
    M = np.array(value, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got ndim={M.ndim}")
    return M


def _vec(value, name):
    v = np.array(value, dtype=float).ravel()
    return v


def controllability_matrix(A, B):
    """Stack [B, AB, ..., A^(n-1)B]."""
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def is_controllable(A, B, tol=_RANK_TOL):
    n = A.shape[0]
    s = np.linalg.svd(controllability_matrix(A, B), compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0]))) == n


def is_detectable(A, C, tol=_RANK_TOL):
    """PBH test on eigenvalues in the closed right half plane (continuous time)."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real < -tol:
            continue
        M = np.vstack([lam * np.eye(n) - A, C.astype(complex)])
        s = np.linalg.svd(M, compute_uv=False)
        if int(np.sum(s > tol * max(1.0, s[0]))) < n:
            return False
    return True


@dataclass(frozen=True)
class ContinuousLTI:
    """Continuous-time linear model dx/dt = A_c x + B_c u, y = C x."""

    A_c: np.ndarray
    B_c: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = _mat(self.A_c, "A_c")
        B = _mat(self.B_c, "B_c")
        C = _mat(self.C, "C")
        object.__setattr__(self, "A_c", A)
        object.__setattr__(self, "B_c", B)
        object.__setattr__(self, "C", C)
        n = A.shape[0]
        if A.shape[1] != n:
            raise ValueError("A_c must be square")
        if B.shape[0] != n or C.shape[1] != n:
            raise ValueError("B_c/C dimensions inconsistent with A_c")

    @property
    def n(self):
        return self.A_c.shape[0]

    @property
    def m(self):
        return self.B_c.shape[1]

    @property
    def p(self):
        return self.C.shape[0]


@dataclass(frozen=True)
class DiscreteLTI:
    """Discrete-time plant x(t+1) = A x(t) + B u(t), y(t) = C x(t); Ts in seconds."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Ts: float

    def __post_init__(self):
        A = _mat(self.A, "A")
        B = _mat(self.B, "B")
        C = _mat(self.C, "C")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        if self.Ts <= 0:
            raise ValueError(f"sample time must be positive, got {self.Ts}")
        n = A.shape[0]
        if A.shape[1] != n or B.shape[0] != n or C.shape[1] != n:
            raise ValueError("plant matrix dimensions inconsistent")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]


@dataclass(frozen=True)
class DisturbanceChannel:
    """Simulator-only disturbance injection x+ = ... + E w, y = ... + F w.

    This object is the simulator's truth and is never handed to controller code.
    """

    E: np.ndarray
    F: np.ndarray
    w0: np.ndarray
    generator: "object"  # internal_model.SignalGenerator; kept loose to avoid a cycle

    def __post_init__(self):
        E = _mat(self.E, "E")
        F = _mat(self.F, "F")
        w0 = _vec(self.w0, "w0")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "w0", w0)
        q = self.generator.q
        if E.shape[1] != q or F.shape[1] != q or w0.size != q:
            raise ValueError("disturbance dimensions do not match generator dimension")
        if E.shape[0] != F.shape[0] and F.shape[0] != 0:
            pass  # rows checked against the plant at use sites

    @property
    def q(self):
        return self.w0.size


@dataclass(frozen=True)
class OperatingPoint:
    x_lin: np.ndarray
    u_lin: np.ndarray


@dataclass(frozen=True)
class ConstraintPolytope:
    """Polytope {(x, u) : Cbar x + Dbar u <= cbar}."""

    Cbar: np.ndarray
    Dbar: np.ndarray
    cbar: np.ndarray
    validate: bool = field(default=True, compare=False)

    def __post_init__(self):
        Cb = _mat(self.Cbar, "Cbar")
        Db = _mat(self.Dbar, "Dbar")
        cb = _vec(self.cbar, "cbar")
        object.__setattr__(self, "Cbar", Cb)
        object.__setattr__(self, "Dbar", Db)
        object.__setattr__(self, "cbar", cb)
        if Cb.shape[0] != Db.shape[0] or Cb.shape[0] != cb.size:
            raise ValueError("constraint row counts inconsistent")
        if self.validate:
            self._check_nonempty_bounded()

    def _check_nonempty_bounded(self):
        # LP bounding: the set must be nonempty and bounded in every coordinate.
        A = np.hstack([self.Cbar, self.Dbar])
        d = A.shape[1]
        feas = linprog(np.zeros(d), A_ub=A, b_ub=self.cbar, bounds=[(None, None)] * d,
                       method="highs")
        if not feas.success:
            raise ValueError("constraint polytope is empty")
        for i in range(d):
            for sign in (1.0, -1.0):
                c = np.zeros(d)
                c[i] = sign
                res = linprog(c, A_ub=A, b_ub=self.cbar, bounds=[(None, None)] * d,
                              method="highs")
                if res.status == 3:
                    raise ValueError("constraint polytope is unbounded")

    @property
    def n_c(self):
        return self.cbar.size

    @property
    def n(self):
        return self.Cbar.shape[1]

    @property
    def m(self):
        return self.Dbar.shape[1]

    @staticmethod
    def from_box(x_lb, x_ub, u_lb, u_ub, validate=True):
        """One face per physical bound: x upper, x lower, u upper, u lower."""
        x_lb = _vec(x_lb, "x_lb")
        x_ub = _vec(x_ub, "x_ub")
        u_lb = _vec(u_lb, "u_lb")
        u_ub = _vec(u_ub, "u_ub")
        n, m = x_lb.size, u_lb.size
        En, Em = np.eye(n), np.eye(m)
        Zn, Zm = np.zeros((n, m)), np.zeros((m, n))
        Cbar = np.vstack([En, -En, Zm, Zm])
        Dbar = np.vstack([Zn, Zn, Em, -Em])
        cbar = np.concatenate([x_ub, -x_lb, u_ub, -u_lb])
        return ConstraintPolytope(Cbar, Dbar, cbar, validate=validate)


def discretize_euler(sys: ContinuousLTI, Ts: float) -> DiscreteLTI:
    """Euler-forward discretization: A = I + Ts*A_c, B = Ts*B_c."""
    if Ts <= 0:
        raise ValueError(f"sample time must be positive, got {Ts}")
    n = sys.n
    return DiscreteLTI(np.eye(n) + Ts * sys.A_c, Ts * sys.B_c, sys.C.copy(), Ts)


def four_tank():
    """Four-tank benchmark around x_lin=(8,18,8,18), u_lin=(8,8).

    Returns (ContinuousLTI, ConstraintPolytope, OperatingPoint); the polytope is
    the physical box h_i in [0,22], u_i in [0,16] shifted to deviation coordinates.
    """
    a1, a2 = 0.0751, 0.0371
    b1, b2 = 0.151, 0.0693
    A_c = np.array([
        [-a1, 0.0, 0.0, 0.0],
        [a1, -a2, 0.0, 0.0],
        [0.0, 0.0, -a1, 0.0],
        [0.0, 0.0, a1, -a2],
    ])
    B_c = np.array([
        [b1, 0.0],
        [0.0, b2],
        [0.0, b1],
        [b2, 0.0],
    ])
    C = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    sys = ContinuousLTI(A_c, B_c, C)
    if not is_controllable(A_c, B_c):
        raise ValueError("four-tank preset lost controllability")
    if not is_detectable(A_c, C):
        raise ValueError("four-tank preset lost detectability")
    x_lin = np.array([8.0, 18.0, 8.0, 18.0])
    u_lin = np.array([8.0, 8.0])
    poly = ConstraintPolytope.from_box(
        x_lb=0.0 - x_lin, x_ub=22.0 - x_lin,
        u_lb=0.0 - u_lin, u_ub=16.0 - u_lin,
    )
    return sys, poly, OperatingPoint(x_lin, u_lin)


def plant_step(sys: DiscreteLTI, dist: DisturbanceChannel, x, u, w):
    """One true plant step: x+ = A x + E w + B u, y = C x + F w."""
    x = _vec(x, "x")
    u = _vec(u, "u")
    w = _vec(w, "w")
    if x.size != sys.n or u.size != sys.m or w.size != dist.q:
        raise ValueError("plant_step dimension mismatch")
    x_next = sys.A @ x + dist.E @ w + sys.B @ u
    y = sys.C @ x + dist.F @ w
    return x_next, y
