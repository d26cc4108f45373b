"""Signal generators, annihilating polynomials, and matrix-fraction filters.

The generator w(t+1) = S w(t) produces the disturbance/reference class; p(z)
annihilates every trajectory of S; the filters G_x = Q_x(z)/p(z) and
G_u = Q_u(z)/p(z) realize the disturbance-independent error coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROOT_MATCH_TOL = 1e-10
CANCELLATION_TOL = 1e-7


@dataclass(frozen=True)
class SignalGenerator:
    """Block-diagonal exosystem S = diag(1?, R_1, ..., R_ns) with unit-circle modes.

    C_S picks the first coordinate of every block, so C_S S^t spans the signal
    family {1, cos(w_j t), sin(w_j t)}.
    """

    include_constant: bool
    frequencies: tuple
    S: np.ndarray
    C_S: np.ndarray

    @property
    def q(self):
        return self.S.shape[0]

    @property
    def n_S(self):
        return len(self.frequencies)

    def row_at(self, t: int) -> np.ndarray:
        """C_S S^t as a flat length-q vector, computed blockwise (exact rotations)."""
        row = np.zeros(self.q)
        ofs = 0
        if self.include_constant:
            row[0] = 1.0
            ofs = 1
        for w in self.frequencies:
            row[ofs] = np.cos(w * t)
            row[ofs + 1] = -np.sin(w * t)
            ofs += 2
        return row

    def blk_row_at(self, dim: int, t: int) -> np.ndarray:
        """blkdiag_dim(C_S S^t): maps a stacked theta to a dim-vector sample."""
        return np.kron(np.eye(dim), self.row_at(t)[None, :])

    def blk_S(self, dim: int) -> np.ndarray:
        return np.kron(np.eye(dim), self.S)

    def subset(self, n_keep: int) -> "SignalGenerator":
        """Generator over the first n_keep frequencies (same constant flag)."""
        if n_keep > self.n_S:
            raise ValueError("cannot keep more frequencies than the generator has")
        return build_generator(list(self.frequencies[:n_keep]), self.include_constant)

    def step(self, w: np.ndarray) -> np.ndarray:
        return self.S @ w


def build_generator(frequencies, include_constant: bool) -> SignalGenerator:
    """Assemble S and C_S from a constant flag plus frequencies in rad/sample."""
    freqs = tuple(float(w) for w in frequencies)
    for w in freqs:
        if not (0.0 < w < np.pi):
            raise ValueError(f"frequency {w} outside (0, pi) rad/sample")
    if len(set(freqs)) != len(freqs):
        raise ValueError("duplicate generator frequencies")
    q = (1 if include_constant else 0) + 2 * len(freqs)
    if q == 0:
        raise ValueError("generator needs a constant or at least one frequency")
    S = np.zeros((q, q))
    C_S = np.zeros(q)
    ofs = 0
    if include_constant:
        S[0, 0] = 1.0
        C_S[0] = 1.0
        ofs = 1
    for w in freqs:
        c, s = np.cos(w), np.sin(w)
        S[ofs:ofs + 2, ofs:ofs + 2] = [[c, -s], [s, c]]
        C_S[ofs] = 1.0
        ofs += 2
    return SignalGenerator(include_constant, freqs, S, C_S)


@dataclass(frozen=True)
class Polynomial:
    """Scalar polynomial p(z) = sum_i p_i z^-i, stored monic (p_0 = 1)."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).ravel()
        if c.size == 0:
            raise ValueError("empty polynomial")
        if c[0] == 0.0:
            raise ValueError("leading coefficient p_0 must be nonzero")
        object.__setattr__(self, "coefficients", c / c[0])

    @property
    def degree(self):
        return self.coefficients.size - 1

    def roots(self):
        if self.degree == 0:
            return np.array([], dtype=complex)
        return np.roots(self.coefficients)

    def __call__(self, z):
        # evaluate sum p_i z^-i
        return sum(ci * z ** (-i) for i, ci in enumerate(self.coefficients))


def char_poly(gen: SignalGenerator) -> Polynomial:
    """p(z) = (1 - z^-1)^const * prod_j (1 - 2 cos(w_j) z^-1 + z^-2).

    The roots equal the eigenvalues of S, so p annihilates every w(t) = S^t w0.
    """
    c = np.array([1.0])
    if gen.include_constant:
        c = np.convolve(c, [1.0, -1.0])
    for w in gen.frequencies:
        c = np.convolve(c, [1.0, -2.0 * np.cos(w), 1.0])
    return Polynomial(c)


def annihilation_check(p: Polynomial, gen: SignalGenerator, w0, T: int) -> float:
    """Max |sum_i p_i w(t-i)| over t in [deg p, T] for w(t) = S^t w0."""
    nn = p.degree
    if T <= nn:
        raise ValueError("T must exceed the polynomial degree")
    w0 = np.asarray(w0, dtype=float).ravel()
    traj = np.empty((T + 1, gen.q))
    traj[0] = w0
    for t in range(T):
        traj[t + 1] = gen.S @ traj[t]
    worst = 0.0
    for t in range(nn, T + 1):
        r = sum(p.coefficients[i] * traj[t - i] for i in range(nn + 1))
        worst = max(worst, float(np.max(np.abs(r))) if r.size else 0.0)
    return worst


class FilterState:
    """Mutable per-controller buffers: raw-sample and filtered-sample histories.

    Buffers are fixed-depth arrays ordered newest-first; the startup counter
    saturates at the denominator degree.
    """

    def __init__(self, raw_depth: int, out_depth: int, dim: int, saturate: int):
        self.raw = np.zeros((raw_depth, dim))
        self.out = np.zeros((out_depth, dim))
        self.steps_seen = 0
        self._saturate = saturate

    def seed_raw(self, value):
        self.raw[:] = np.asarray(value, dtype=float).ravel()[None, :]

    def push_raw(self, value):
        if self.raw.shape[0]:
            self.raw = np.vstack([np.asarray(value, dtype=float).ravel()[None, :],
                                  self.raw[:-1]])

    def push_out(self, value):
        if self.out.shape[0]:
            self.out = np.vstack([np.asarray(value, dtype=float).ravel()[None, :],
                                  self.out[:-1]])

    def tick(self):
        self.steps_seen = min(self.steps_seen + 1, self._saturate)

    @property
    def trusted(self):
        return self.steps_seen >= self._saturate

    def copy(self):
        other = FilterState(self.raw.shape[0], self.out.shape[0],
                            self.raw.shape[1] if self.raw.ndim == 2 else 0,
                            self._saturate)
        other.raw = self.raw.copy()
        other.out = self.out.copy()
        other.steps_seen = self.steps_seen
        return other


@dataclass(frozen=True)
class MatrixFractionFilter:
    """G(z) = (sum_i Q_i z^-i) / p(z) with square numerator matrices, Q_0 invertible."""

    numerators: tuple
    denominator: Polynomial

    def __post_init__(self):
        Qs = tuple(np.array(Q, dtype=float) for Q in self.numerators)
        if not Qs:
            raise ValueError("need at least Q_0")
        d = Qs[0].shape[0]
        for Q in Qs:
            if Q.shape != (d, d):
                raise ValueError("numerator matrices must be square with equal size")
        if abs(np.linalg.det(Qs[0])) < 1e-12:
            raise ValueError("Q_0 must be invertible")
        object.__setattr__(self, "numerators", Qs)
        object.__setattr__(self, "_Q0_inv", np.linalg.inv(Qs[0]))

    @property
    def dim(self):
        return self.numerators[0].shape[0]

    @property
    def n_d(self):
        return len(self.numerators) - 1

    @property
    def n_n(self):
        return self.denominator.degree

    @staticmethod
    def identity(p: Polynomial, dim: int) -> "MatrixFractionFilter":
        """The q(z) = 1 preset: G(z) = I / p(z)."""
        return MatrixFractionFilter((np.eye(dim),), p)

    @staticmethod
    def scalar(p: Polynomial, q_coeffs, dim: int) -> "MatrixFractionFilter":
        """Scalar-polynomial preset: Q_i = q_i * I."""
        q = np.asarray(q_coeffs, dtype=float).ravel()
        return MatrixFractionFilter(tuple(qi * np.eye(dim) for qi in q), p)

    def numerator_zeros(self):
        """Zeros of det(sum Q_i z^-i): eigenvalues of the block companion form."""
        from .lyapunov import companion_realization
        A_e = companion_realization(list(self.numerators))
        if A_e.size == 0:
            return np.array([], dtype=complex)
        return np.linalg.eigvals(A_e)

    def validate_no_cancellation(self, tol=CANCELLATION_TOL):
        """Raise if a root of p(z) is (numerically) a zero of the numerator."""
        zeros = self.numerator_zeros()
        for r in self.denominator.roots():
            if zeros.size and np.min(np.abs(zeros - r)) < tol:
                raise ValueError(f"numerator zero cancels denominator root {r}")

    def new_inverse_state(self) -> FilterState:
        """State for e = G^-1(z) * signal (raw depth n_n, output depth n_d)."""
        return FilterState(self.n_n, self.n_d, self.dim, self.n_n)

    def new_forward_state(self) -> FilterState:
        """State for signal = G(z) * e (raw depth n_d, output depth n_n)."""
        return FilterState(self.n_d, self.n_n, self.dim, self.n_n)


def inverse_filter_step(filt: MatrixFractionFilter, state: FilterState, sample):
    """Advance e(t) = G^-1(z) applied to the sample stream by one step.

    e(t) = Q0^-1 [ sum_{i=0}^{n_n} p_i s(t-i) - sum_{i=1}^{n_d} Q_i e(t-i) ]
    with zero-initialized buffers allowed; outputs before n_n steps are startup
    transients.
    """
    sample = np.asarray(sample, dtype=float).ravel()
    p = filt.denominator.coefficients
    acc = p[0] * sample
    for i in range(1, filt.n_n + 1):
        acc = acc + p[i] * state.raw[i - 1]
    for i in range(1, filt.n_d + 1):
        acc = acc - filt.numerators[i] @ state.out[i - 1]
    e = filt._Q0_inv @ acc
    state.push_raw(sample)
    state.push_out(e)
    state.tick()
    return e


def forward_filter_step(filt: MatrixFractionFilter, state: FilterState, e):
    """Advance u(t) = G(z) applied to the e stream by one step (inverse of the above).

    u(t) = (1/p0) [ sum_{i=0}^{n_d} Q_i e(t-i) - sum_{i=1}^{n_n} p_i u(t-i) ]
    """
    e = np.asarray(e, dtype=float).ravel()
    p = filt.denominator.coefficients
    acc = filt.numerators[0] @ e
    for i in range(1, filt.n_d + 1):
        acc = acc + filt.numerators[i] @ state.raw[i - 1]
    for i in range(1, filt.n_n + 1):
        acc = acc - p[i] * state.out[i - 1]
    u = acc / p[0]
    state.push_raw(e)
    state.push_out(u)
    state.tick()
    return u


@dataclass(frozen=True)
class CancellationReport:
    passed: bool
    plant_pole_conflicts: tuple
    numerator_conflicts: tuple

    def __str__(self):
        if self.passed:
            return "cancellation check: pass"
        lines = ["cancellation check: FAIL"]
        for r in self.plant_pole_conflicts:
            lines.append(f"  plant eigenvalue {r} is a root of p(z)")
        for r in self.numerator_conflicts:
            lines.append(f"  numerator zero {r} cancels a root of p(z)")
        return "\n".join(lines)


def cancellation_check(plant, Gx: MatrixFractionFilter, Gu: MatrixFractionFilter,
                       tol=CANCELLATION_TOL) -> CancellationReport:
    """Check that no root of p(z) collides with a plant pole or a numerator zero.

    Collisions create uncontrollable modes in the extended prediction model, so
    they invalidate the convergence argument.
    """
    proots = Gx.denominator.roots()
    plant_conflicts = []
    for lam in np.linalg.eigvals(plant.A):
        if proots.size and np.min(np.abs(proots - lam)) < tol:
            plant_conflicts.append(lam)
    numer_conflicts = []
    for filt in (Gx, Gu):
        zeros = filt.numerator_zeros()
        for z in zeros:
            if proots.size and np.min(np.abs(proots - z)) < tol:
                numer_conflicts.append(z)
    passed = not plant_conflicts and not numer_conflicts
    return CancellationReport(passed, tuple(plant_conflicts), tuple(numer_conflicts))
