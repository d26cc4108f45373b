"""Internal-model MPC: assembly of the two receding-horizon QPs over the
filtered prediction model, the per-step controller, the shifted feasibility
candidate used for warm starts and the convergence bookkeeping, and the
unconstrained linear-gain extraction.

The controller never sees the disturbance channel; every QP is a function of
measured histories only.
"""

from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import internal_model as im
from . import qp as qpmod
from .lyapunov import TerminalCost, build_Pa, build_terminal_cost
from .regulation import ArtificialReferenceParam, _zf_row_groups

_template_counter = itertools.count()


def _weight(w, size, name):
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        return float(w) * np.eye(size)
    if w.ndim == 1:
        if w.size != size:
            raise ValueError(f"{name} diagonal has wrong length")
        return np.diag(w)
    if w.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}")
    return 0.5 * (w + w.T)


@dataclass
class MPCConfig:
    """Controller-visible data: model, constraints, weights, filters, horizon.

    ``variant`` selects the plain output-regulation QP ("basic") or the
    artificial-reference QP with terminal ingredients ("artref").
    """

    plant: object
    constraints: object
    N: int
    Q: object
    R: object
    Qy: object
    generator: object
    Gx: im.MatrixFractionFilter
    Gu: im.MatrixFractionFilter
    variant: str = "artref"
    generator_a: object = None
    Pa: object = None
    sigma: object = 0.05
    soc_facets: int = 32
    terminal: TerminalCost = None
    slack_weight: float = None
    lowpass_alpha: float = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n, m, p = self.plant.n, self.plant.m, self.plant.p
        if self.variant not in ("basic", "artref"):
            raise ValueError(f"unknown variant {self.variant!r}")
        self.Q = _weight(self.Q, n, "Q")
        self.R = _weight(self.R, m, "R")
        self.Qy = _weight(self.Qy, p, "Qy")
        if self.Gx.dim != n or self.Gu.dim != m:
            raise ValueError("filter dimensions do not match the plant")
        if not np.array_equal(self.Gx.denominator.coefficients,
                              self.Gu.denominator.coefficients):
            raise ValueError("Gx and Gu must share the denominator p(z)")
        if self.generator_a is None:
            self.generator_a = self.generator
        if self.generator_a.n_S > self.generator.n_S:
            raise ValueError("artificial-reference generator adds frequencies")
        if self.variant == "artref":
            if self.Pa is None:
                self.Pa = build_Pa(self.generator_a, 1.0, p=p)
            else:
                self.Pa = np.atleast_2d(np.asarray(self.Pa, dtype=float))
                if self.Pa.shape != (p * self.generator_a.q,) * 2:
                    raise ValueError("Pa has the wrong size")
        sig = np.asarray(self.sigma, dtype=float)
        self.sigma = (np.full(self.constraints.n_c, float(sig)) if sig.ndim == 0
                      else sig.ravel())
        if self.sigma.size != self.constraints.n_c or np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive, one entry per row")
        if self.terminal is None:
            self.terminal = build_terminal_cost(self.Gx, self.Gu, self.Q, self.R)
        if self.slack_weight is None:
            self.slack_weight = 1e6 * float(np.max(np.abs(self.Qy)))
        bound = n + m * (self.n_n + self.n_du) + n * self.n_dx
        if self.N <= bound:
            warnings.warn(f"convergence bound violated: N={self.N} <= {bound}",
                          stacklevel=2)
        if self.N <= self.n_n or self.N <= self.n_dx or self.N <= self.n_du:
            raise ValueError("horizon shorter than the filter memory")

    @property
    def n_n(self):
        return self.Gx.denominator.degree

    @property
    def n_dx(self):
        return self.Gx.n_d

    @property
    def n_du(self):
        return self.Gu.n_d


class ControllerState:
    """Single-owner mutable histories; depths match the QP history pins."""

    def __init__(self, cfg: MPCConfig, x0, y0):
        n, m, p = cfg.plant.n, cfg.plant.m, cfg.plant.p
        nn = cfg.n_n
        x0 = np.asarray(x0, dtype=float).ravel()
        y0 = np.asarray(y0, dtype=float).ravel()
        self.x_hist = np.tile(x0, (nn, 1))
        self.u_hist = np.zeros((nn, m))
        self.y_hist = np.tile(y0, (nn, 1))
        self.ex_hist = np.zeros((cfg.n_dx + 1, n))
        self.eu_hist = np.zeros((cfg.n_du, m))
        self.gx_state = cfg.Gx.new_inverse_state()
        self.gx_state.seed_raw(x0)
        self.gu_state = cfg.Gu.new_inverse_state()
        self.x_filt = x0.copy()
        self.warm = None
        self.prev_solution = None
        self.last_candidate = None
        self.trust = 0

    @classmethod
    def from_histories(cls, cfg, x_hist, u_hist, y_hist, ex_hist, eu_hist):
        """Assembly-only state (filter internals are not reconstructed)."""
        st = cls.__new__(cls)
        st.x_hist = np.atleast_2d(np.asarray(x_hist, dtype=float))
        st.u_hist = np.asarray(u_hist, dtype=float).reshape(cfg.n_n, cfg.plant.m)
        st.y_hist = np.atleast_2d(np.asarray(y_hist, dtype=float))
        st.ex_hist = np.asarray(ex_hist, dtype=float).reshape(cfg.n_dx + 1, cfg.plant.n)
        st.eu_hist = np.asarray(eu_hist, dtype=float).reshape(cfg.n_du, cfg.plant.m)
        if st.x_hist.shape != (cfg.n_n, cfg.plant.n):
            raise ValueError("x history depth mismatch")
        if st.y_hist.shape != (cfg.n_n, cfg.plant.p):
            raise ValueError("y history depth mismatch")
        st.gx_state = None
        st.gu_state = None
        st.x_filt = st.x_hist[0].copy()
        st.warm = None
        st.prev_solution = None
        st.last_candidate = None
        st.trust = 0
        return st

    def value(self, family: str, lag: int) -> np.ndarray:
        if family == "x":
            return self.x_hist[lag]
        if family == "u":
            return self.u_hist[lag - 1]
        if family == "y":
            return self.y_hist[lag]
        if family == "ex":
            return self.ex_hist[lag]
        if family == "eu":
            return self.eu_hist[lag - 1]
        raise KeyError(family)

    def mark_model_break(self):
        """Scenario-script bookkeeping only; the control law never calls this."""
        self.trust = 0


@dataclass(frozen=True)
class StepResult:
    u_applied: np.ndarray
    objective: float
    feasible: bool
    slack_used: float
    theta: ArtificialReferenceParam | None
    solve_time: float
    stage0_cost: float
    ex_now: np.ndarray
    eu_now: np.ndarray
    status: str
    untrusted: bool


class _Layout:
    """Index map for the stacked decision vector.

    Base variables in order: e_x[1..N], e_u[0..N], x[1..N], u[0..N], y[1..N];
    the artref variant appends theta_x, theta_u, theta_y; SOC auxiliaries and
    the optional shared slack sit at the end.
    """

    def __init__(self, cfg, variant):
        n, m, p = cfg.plant.n, cfg.plant.m, cfg.plant.p
        N = cfg.N
        self.n, self.m, self.p, self.N = n, m, p, N
        ofs = 0
        self._ex = ofs; ofs += n * N
        self._eu = ofs; ofs += m * (N + 1)
        self._x = ofs; ofs += n * N
        self._u = ofs; ofs += m * (N + 1)
        self._y = ofs; ofs += p * N
        self.th_x = self.th_u = self.th_y = None
        if variant == "artref":
            q, qa = cfg.generator.q, cfg.generator_a.q
            self.th_x = slice(ofs, ofs + n * q); ofs += n * q
            self.th_u = slice(ofs, ofs + m * q); ofs += m * q
            self.th_y = slice(ofs, ofs + p * qa); ofs += p * qa
        self.d_base = ofs
        self.n_aux = 0      # set by the structure builder
        self.slack = None   # set when softened

    def ex(self, k):
        return slice(self._ex + (k - 1) * self.n, self._ex + k * self.n)

    def eu(self, k):
        return slice(self._eu + k * self.m, self._eu + (k + 1) * self.m)

    def x(self, k):
        return slice(self._x + (k - 1) * self.n, self._x + k * self.n)

    def u(self, k):
        return slice(self._u + k * self.m, self._u + (k + 1) * self.m)

    def y(self, k):
        return slice(self._y + (k - 1) * self.p, self._y + k * self.p)

    @property
    def d_total(self):
        return self.d_base + self.n_aux + (1 if self.slack is not None else 0)

    def names(self):
        nm = {"e_x": slice(self._ex, self._eu), "e_u": slice(self._eu, self._x),
              "x": slice(self._x, self._u), "u": slice(self._u, self._y),
              "y": slice(self._y, self._y + self.p * self.N)}
        if self.th_x is not None:
            nm.update(theta_x=self.th_x, theta_u=self.th_u, theta_y=self.th_y)
        if self.n_aux:
            nm["soc_aux"] = slice(self.d_base, self.d_base + self.n_aux)
        if self.slack is not None:
            nm["slack"] = slice(self.slack, self.slack + 1)
        return nm


def _term(L, cfg, family, k):
    """('v', slice) for decision entries, ('p', (family, lag)) for pinned ones."""
    if family == "ex":
        if k >= 1:
            return ("v", L.ex(k))
        if -k > cfg.n_dx:
            raise AssertionError("e_x reaches past the pinned window")
        return ("p", ("ex", -k))
    if family == "eu":
        if k >= 0:
            return ("v", L.eu(k))
        if -k > cfg.n_du:
            raise AssertionError("e_u reaches past the pinned window")
        return ("p", ("eu", -k))
    if family == "x":
        if k >= 1:
            return ("v", L.x(k))
        if -k > cfg.n_n - 1:
            raise AssertionError("x reaches past the pinned window")
        return ("p", ("x", -k))
    if family == "u":
        if k >= 0:
            return ("v", L.u(k))
        if -k > cfg.n_n:
            raise AssertionError("u reaches past the pinned window")
        return ("p", ("u", -k))
    if family == "y":
        if k >= 1:
            return ("v", L.y(k))
        if -k > cfg.n_n - 1:
            raise AssertionError("y reaches past the pinned window")
        return ("p", ("y", -k))
    raise KeyError(family)


def _structure(cfg: MPCConfig, variant: str, soften: bool):
    """Build (and cache on the config) everything that does not change with t."""
    key = (variant, soften)
    if key in cfg._cache:
        return cfg._cache[key]

    L = _Layout(cfg, "artref" if variant == "artref" else "basic")
    n, m, p, N = L.n, L.m, L.p, L.N
    pc = cfg.Gx.denominator.coefficients
    Qx = cfg.Gx.numerators
    Qu = cfg.Gu.numerators
    A, B, C = cfg.plant.A, cfg.plant.B, cfg.plant.C
    n_n, n_dx, n_du = cfg.n_n, cfg.n_dx, cfg.n_du

    eq_blocks = []  # (entries, height); entries: (kind, where, coeff matrix)

    def add_eq(entries, height):
        merged = []
        for kind, where, Mcoef in entries:
            merged.append((kind, where, np.atleast_2d(Mcoef)))
        eq_blocks.append((merged, height))

    # filtered error dynamics, one block per step of the shifted recursion
    for k in range(1, N + 1):
        ent = []
        for i in range(n_dx + 1):
            ent.append((*_term(L, cfg, "ex", k - i), Qx[i]))
            ent.append((*_term(L, cfg, "ex", k - 1 - i), -A @ Qx[i]))
        for i in range(n_du + 1):
            ent.append((*_term(L, cfg, "eu", k - 1 - i), -B @ Qu[i]))
        add_eq(ent, n)
    # output recursion
    for k in range(1, N + 1):
        ent = [(*_term(L, cfg, "y", k - i), pc[i] * np.eye(p)) for i in range(n_n + 1)]
        ent += [(*_term(L, cfg, "ex", k - i), -C @ Qx[i]) for i in range(n_dx + 1)]
        add_eq(ent, p)
    # state recovery
    for k in range(1, N + 1):
        ent = [(*_term(L, cfg, "x", k - i), pc[i] * np.eye(n)) for i in range(n_n + 1)]
        ent += [(*_term(L, cfg, "ex", k - i), -Qx[i]) for i in range(n_dx + 1)]
        add_eq(ent, n)
    # input recovery (includes k = 0: ties u_0 to e_u,0)
    for k in range(0, N + 1):
        ent = [(*_term(L, cfg, "u", k - i), pc[i] * np.eye(m)) for i in range(n_n + 1)]
        ent += [(*_term(L, cfg, "eu", k - i), -Qu[i]) for i in range(n_du + 1)]
        add_eq(ent, m)

    if variant == "artref":
        gen, gen_a = cfg.generator, cfg.generator_a
        # terminal coincidence with the artificial references
        for k in range(N - n_n + 1, N + 1):
            add_eq([("v", L.x(k), np.eye(n)), ("v", L.th_x, -gen.blk_row_at(n, k))], n)
            add_eq([("v", L.u(k), np.eye(m)), ("v", L.th_u, -gen.blk_row_at(m, k))], m)
            add_eq([("v", L.y(k), np.eye(p)), ("v", L.th_y, -gen_a.blk_row_at(p, k))], p)
        # terminal filter conditions
        add_eq([(*_term(L, cfg, "ex", N - i), Qx[i]) for i in range(n_dx + 1)], n)
        add_eq([(*_term(L, cfg, "eu", N - i), Qu[i]) for i in range(n_du + 1)], m)

    # inequality rows: (x_k, u_k) in Z for k = 0..N
    poly = cfg.constraints
    ineq_blocks = []
    state_row_mask = []  # per emitted row: softened under the fallback?
    has_state_part = np.linalg.norm(poly.Cbar, axis=1) > 0
    for k in range(0, N + 1):
        ent = []
        kind, where = _term(L, cfg, "x", k)
        ent.append((kind, where, poly.Cbar))
        ent.append(("v", L.u(k), poly.Dbar))
        ineq_blocks.append((ent, poly.n_c, poly.cbar))
        state_row_mask.extend(has_state_part.tolist())

    soc_A = np.zeros((0, 0))
    soc_b = np.zeros(0)
    if variant == "artref":
        groups, bounds = _zf_row_groups(poly, cfg.generator, L.d_base,
                                        L.th_x.start, L.th_u.start, cfg.sigma)
        soc_A, soc_b, L.n_aux = qpmod.soc_rows(groups, bounds, cfg.soc_facets)
        state_row_mask.extend([False] * soc_A.shape[0])

    if soften:
        L.slack = L.d_base + L.n_aux

    d = L.d_total

    # materialize equality structure
    e_rows = sum(h for _, h in eq_blocks)
    Aeq = np.zeros((e_rows, d))
    eq_pins = []
    ofs = 0
    for entries, h in eq_blocks:
        for kind, where, Mcoef in entries:
            if kind == "v":
                Aeq[ofs:ofs + h, where] += Mcoef
            else:
                eq_pins.append((ofs, h, where[0], where[1], Mcoef))
        ofs += h

    # materialize inequality structure
    i_rows = sum(h for _, h, _ in ineq_blocks) + soc_A.shape[0] + (1 if soften else 0)
    Aineq = np.zeros((i_rows, d))
    bineq_base = np.zeros(i_rows)
    ineq_pins = []
    ofs = 0
    for entries, h, rhs in ineq_blocks:
        for kind, where, Mcoef in entries:
            if kind == "v":
                Aineq[ofs:ofs + h, where] += Mcoef
            else:
                ineq_pins.append((ofs, h, where[0], where[1], Mcoef))
        bineq_base[ofs:ofs + h] = rhs
        ofs += h
    if soc_A.shape[0]:
        Aineq[ofs:ofs + soc_A.shape[0], :L.d_base + L.n_aux] = soc_A
        bineq_base[ofs:ofs + soc_A.shape[0]] = soc_b
        ofs += soc_A.shape[0]
    if soften:
        Aineq[np.flatnonzero(np.array(state_row_mask)), L.slack] = -1.0
        Aineq[ofs, L.slack] = -1.0  # slack >= 0
        bineq_base[ofs] = 0.0
        ofs += 1

    # quadratic cost (step-independent part)
    H = np.zeros((d, d))
    last_stage = N if variant == "basic" else N - 1
    for k in range(1, last_stage + 1):
        H[L.ex(k), L.ex(k)] += 2.0 * cfg.Q
    for k in range(0, last_stage + 1):
        H[L.eu(k), L.eu(k)] += 2.0 * cfg.R
    if variant == "basic":
        for k in range(1, N + 1):
            H[L.y(k), L.y(k)] += 2.0 * cfg.Qy
    else:
        gen_a = cfg.generator_a
        M_rows = [gen_a.blk_row_at(p, k) for k in range(0, N)]
        H[L.th_y, L.th_y] += 2.0 * cfg.Pa
        for k in range(0, N):
            Mk = M_rows[k]
            H[L.th_y, L.th_y] += 2.0 * Mk.T @ cfg.Qy @ Mk
            if k >= 1:
                H[L.y(k), L.y(k)] += 2.0 * cfg.Qy
                H[L.y(k), L.th_y] += -2.0 * cfg.Qy @ Mk
                H[L.th_y, L.y(k)] += -2.0 * Mk.T @ cfg.Qy
        tc = cfg.terminal
        if tc.Px.size:
            sl = [L.ex(N - i) for i in range(cfg.n_dx)]
            _add_quad_window(H, sl, tc.Px)
        if tc.Pu.size:
            sl = [L.eu(N - i) for i in range(cfg.n_du)]
            _add_quad_window(H, sl, tc.Pu)
    if soften:
        H[L.slack, L.slack] = 2.0 * cfg.slack_weight

    struct = {
        "layout": L,
        "Aeq": Aeq,
        "Aineq": Aineq,
        "bineq_base": bineq_base,
        "H": H,
        "eq_pins": eq_pins,
        "ineq_pins": ineq_pins,
        "soc_A": soc_A,
        "names": L.names(),
        "M0": (cfg.generator_a.blk_row_at(p, 0) if variant == "artref" else None),
        "key": f"immpc-{next(_template_counter)}",
        "e_rows": e_rows,
        "i_rows": i_rows,
        "variant": variant,
    }
    cfg._cache[key] = struct
    return struct


def _add_quad_window(H, slices, P):
    """H += 2 * P over the stacked window given by the slice list."""
    sizes = [s.stop - s.start for s in slices]
    off = np.concatenate([[0], np.cumsum(sizes)])
    for a, sa in enumerate(slices):
        for b, sb in enumerate(slices):
            H[sa, sb] += 2.0 * P[off[a]:off[a + 1], off[b]:off[b + 1]]


def _assemble(cfg, state, variant, soften=False):
    st = _structure(cfg, variant, soften)
    L = st["layout"]
    beq = np.zeros(st["e_rows"])
    for ofs, h, fam, lag, M in st["eq_pins"]:
        beq[ofs:ofs + h] -= M @ state.value(fam, lag)
    bineq = st["bineq_base"].copy()
    for ofs, h, fam, lag, M in st["ineq_pins"]:
        val = state.value(fam, lag)
        if (cfg.lowpass_alpha is not None and fam == "x" and lag == 0
                and state.x_filt is not None):
            val = state.x_filt
        bineq[ofs:ofs + h] -= M @ val
    f = np.zeros(L.d_total)
    offset = float(state.value("ex", 0) @ cfg.Q @ state.value("ex", 0))
    y0 = state.value("y", 0)
    offset += float(y0 @ cfg.Qy @ y0)
    if variant == "artref":
        M0 = st["M0"]
        f[L.th_y] = -2.0 * M0.T @ (cfg.Qy @ y0)
    prob = qpmod.QPProblem(st["H"], f, st["Aeq"], beq, st["Aineq"], bineq,
                           names=st["names"], offset=offset,
                           cache_key=st["key"])
    return prob, L


def build_basic_qp(cfg: MPCConfig, state: ControllerState) -> qpmod.QPProblem:
    """The output-regulation QP: stage cost over filtered errors and the output,
    Theorem-style prediction rows, history pins, and the polytope rows."""
    return _assemble(cfg, state, "basic")[0]


def build_artref_qp(cfg: MPCConfig, state: ControllerState) -> qpmod.QPProblem:
    """The artificial-reference QP: adds reference parameters, terminal
    coincidence and filter conditions, the admissible-reference rows, and the
    terminal cost."""
    return _assemble(cfg, state, "artref")[0]


def build_unconstrained_qp(cfg: MPCConfig, state: ControllerState):
    """Basic variant with the polytope rows removed (for gain extraction)."""
    prob, L = _assemble(cfg, state, "basic")
    prob_unc = qpmod.QPProblem(prob.H, prob.f, prob.Aeq, prob.beq,
                               np.zeros((0, L.d_total)), np.zeros(0),
                               names=prob.names, offset=prob.offset,
                               cache_key=prob.cache_key + ":unc"
                               if prob.cache_key else None)
    return prob_unc, L


def objective_value(problem: qpmod.QPProblem, x) -> float:
    x = np.asarray(x, dtype=float).ravel()
    return float(0.5 * x @ (problem.H @ x) + problem.f @ x + problem.offset)


def qp_layout(cfg: MPCConfig, variant=None) -> _Layout:
    variant = variant or cfg.variant
    return _structure(cfg, variant, False)["layout"]


def shifted_candidate(prev: qpmod.QPSolution, cfg: MPCConfig) -> np.ndarray:
    """Time-shifted primal candidate for the next step's QP.

    Shifts every trajectory one step, appends the free-recursion extension of
    the filtered errors, derives the appended x, u, y from the recovery
    recursions, advances the reference parameters by the generator, and
    recomputes facet auxiliaries.  Feasible for the t+1 problem whenever the
    disturbance followed its generator over the step.
    """
    variant = cfg.variant
    st = _structure(cfg, variant, False)
    L = st["layout"]
    n, m, p, N = L.n, L.m, L.p, L.N
    x_prev = prev.x_star
    cand = np.zeros(L.d_total)
    pc = cfg.Gx.denominator.coefficients
    Qx, Qu = cfg.Gx.numerators, cfg.Gu.numerators

    def get(family, k):
        kind, where = _term(L, cfg, family, k)
        if kind != "v":
            raise AssertionError("candidate extension touched a pinned entry")
        return x_prev[where]

    # shifted interior
    for k in range(1, N):
        cand[L.ex(k)] = get("ex", k + 1)
        cand[L.x(k)] = get("x", k + 1)
        cand[L.y(k)] = get("y", k + 1)
    for k in range(0, N):
        cand[L.eu(k)] = get("eu", k + 1)
        cand[L.u(k)] = get("u", k + 1)
    # appended filtered errors from the free recursions
    ex_new = np.zeros(n)
    for i in range(1, cfg.n_dx + 1):
        ex_new -= cfg.Gx._Q0_inv @ (Qx[i] @ get("ex", N + 1 - i))
    cand[L.ex(N)] = ex_new
    eu_new = np.zeros(m)
    for i in range(1, cfg.n_du + 1):
        eu_new -= cfg.Gu._Q0_inv @ (Qu[i] @ get("eu", N + 1 - i))
    cand[L.eu(N)] = eu_new

    # x_{N+1} from the state recovery recursion
    acc = Qx[0] @ ex_new
    for i in range(1, cfg.n_dx + 1):
        acc += Qx[i] @ get("ex", N + 1 - i)
    for i in range(1, cfg.n_n + 1):
        acc -= pc[i] * get("x", N + 1 - i)
    cand[L.x(N)] = acc / pc[0]
    # u_{N+1}
    acc = Qu[0] @ eu_new
    for i in range(1, cfg.n_du + 1):
        acc += Qu[i] @ get("eu", N + 1 - i)
    for i in range(1, cfg.n_n + 1):
        acc -= pc[i] * get("u", N + 1 - i)
    cand[L.u(N)] = acc / pc[0]
    # y_{N+1}
    acc = cfg.plant.C @ (Qx[0] @ ex_new)
    for i in range(1, cfg.n_dx + 1):
        acc += cfg.plant.C @ (Qx[i] @ get("ex", N + 1 - i))
    for i in range(1, cfg.n_n + 1):
        acc -= pc[i] * get("y", N + 1 - i)
    cand[L.y(N)] = acc / pc[0]

    if variant == "artref":
        cand[L.th_x] = cfg.generator.blk_S(n) @ x_prev[L.th_x]
        cand[L.th_u] = cfg.generator.blk_S(m) @ x_prev[L.th_u]
        cand[L.th_y] = cfg.generator_a.blk_S(p) @ x_prev[L.th_y]
        soc_A = st["soc_A"]
        if L.n_aux:
            base = cand[:L.d_base]
            for j in range(L.n_aux):
                col = soc_A[:, L.d_base + j]
                facet_rows = np.flatnonzero(col == -1.0)
                cand[L.d_base + j] = np.max(soc_A[facet_rows, :L.d_base] @ base)
    return cand


def mpc_step(cfg: MPCConfig, state: ControllerState, x_meas, y_meas,
             on_qp=None) -> StepResult:
    """One receding-horizon step: filter, assemble, solve, apply, advance.

    Infeasibility never raises; the fallback re-solves with softened state
    rows and, failing that, holds the previous input with the step flagged.
    """
    x_meas = np.asarray(x_meas, dtype=float).ravel()
    y_meas = np.asarray(y_meas, dtype=float).ravel()
    if state.gx_state is None:
        raise ValueError("state was built for assembly only; use ControllerState(cfg, x0, y0)")
    e_x = im.inverse_filter_step(cfg.Gx, state.gx_state, x_meas)
    state.x_hist = np.vstack([x_meas[None, :], state.x_hist[:-1]])
    state.y_hist = np.vstack([y_meas[None, :], state.y_hist[:-1]])
    if cfg.n_dx + 1 > 0:
        state.ex_hist = np.vstack([e_x[None, :], state.ex_hist[:-1]])[:cfg.n_dx + 1]
    if cfg.lowpass_alpha is not None:
        a = cfg.lowpass_alpha
        state.x_filt = (1.0 - a) * state.x_filt + a * x_meas

    t0 = time.perf_counter()
    problem, L = _assemble(cfg, state, cfg.variant)
    if on_qp is not None:
        on_qp(problem)
    sol = qpmod.solve_qp(problem, warm_start=state.warm)
    feasible = sol.status == "optimal"
    slack_used = 0.0
    theta = None
    status = sol.status
    if feasible:
        u_applied = sol.x_star[L.u(0)].copy()
        objective = sol.objective
        if cfg.variant == "artref":
            theta = ArtificialReferenceParam(
                sol.x_star[L.th_x], sol.x_star[L.th_u], sol.x_star[L.th_y],
                cfg.generator, cfg.generator_a)
        state.prev_solution = sol
        cand = shifted_candidate(sol, cfg)
        state.last_candidate = cand
        state.warm = cand
    else:
        soft_prob, soft_L = _assemble(cfg, state, cfg.variant, soften=True)
        soft_sol = qpmod.solve_qp(soft_prob)
        if soft_sol.status == "optimal":
            u_applied = soft_sol.x_star[soft_L.u(0)].copy()
            slack_used = float(soft_sol.x_star[soft_L.slack])
            objective = soft_sol.objective
            status = "softened"
            if cfg.variant == "artref":
                theta = ArtificialReferenceParam(
                    soft_sol.x_star[soft_L.th_x], soft_sol.x_star[soft_L.th_u],
                    soft_sol.x_star[soft_L.th_y], cfg.generator, cfg.generator_a)
        else:
            u_applied = state.u_hist[0].copy()
            objective = float("nan")
            status = "hold"
        state.prev_solution = None
        state.last_candidate = None
        state.warm = None
    solve_time = time.perf_counter() - t0

    e_u = im.inverse_filter_step(cfg.Gu, state.gu_state, u_applied)
    state.u_hist = np.vstack([u_applied[None, :], state.u_hist[:-1]])
    if cfg.n_du > 0:
        state.eu_hist = np.vstack([e_u[None, :], state.eu_hist[:-1]])[:cfg.n_du]
    state.trust += 1
    untrusted = state.trust < cfg.n_n + 1

    stage0 = float(e_x @ cfg.Q @ e_x)
    if feasible or status == "softened":
        eu0 = (sol if feasible else soft_sol).x_star[(L if feasible else soft_L).eu(0)]
        stage0 += float(eu0 @ cfg.R @ eu0)
        r = y_meas
        if cfg.variant == "artref" and theta is not None:
            r = y_meas - theta.y_at(0)
        stage0 += float(r @ cfg.Qy @ r)
    else:
        stage0 = float("nan")

    return StepResult(u_applied, objective, feasible, slack_used, theta,
                      solve_time, stage0, e_x.copy(), e_u.copy(), status,
                      untrusted)


def history_size(cfg: MPCConfig) -> int:
    n, m, p = cfg.plant.n, cfg.plant.m, cfg.plant.p
    return (cfg.n_n * (n + m + p) + (cfg.n_dx + 1) * n + cfg.n_du * m)


def stack_history(cfg: MPCConfig, state: ControllerState) -> np.ndarray:
    """Order: x lags 0..n_n-1, u lags 1..n_n, y lags 0..n_n-1, e_x lags
    0..n_dx, e_u lags 1..n_du."""
    return np.concatenate([state.x_hist.ravel(), state.u_hist.ravel(),
                           state.y_hist.ravel(), state.ex_hist.ravel(),
                           state.eu_hist.ravel()])


def _state_from_stacked(cfg, h):
    n, m, p = cfg.plant.n, cfg.plant.m, cfg.plant.p
    nn = cfg.n_n
    ofs = 0
    x_h = h[ofs:ofs + nn * n].reshape(nn, n); ofs += nn * n
    u_h = h[ofs:ofs + nn * m].reshape(nn, m); ofs += nn * m
    y_h = h[ofs:ofs + nn * p].reshape(nn, p); ofs += nn * p
    ex_h = h[ofs:ofs + (cfg.n_dx + 1) * n].reshape(cfg.n_dx + 1, n)
    ofs += (cfg.n_dx + 1) * n
    eu_h = h[ofs:].reshape(cfg.n_du, m)
    return ControllerState.from_histories(cfg, x_h, u_h, y_h, ex_h, eu_h)


def unconstrained_gain(cfg: MPCConfig) -> np.ndarray:
    """Linear map from the stacked history to the first optimal input.

    Solves the equality-constrained QP once per unit history vector; the
    constraint-free optimizer is linear in the history, so the columns form
    the full gain matrix.
    """
    hs = history_size(cfg)
    zero_state = _state_from_stacked(cfg, np.zeros(hs))
    prob0, L = build_unconstrained_qp(cfg, zero_state)
    sol0 = qpmod.solve_qp(prob0)
    if sol0.status != "optimal":
        raise ValueError("unconstrained KKT system is singular")
    if np.max(np.abs(sol0.x_star[L.u(0)])) > 1e-9:
        raise AssertionError("zero history must map to zero input")
    K = np.zeros((cfg.plant.m, hs))
    for j in range(hs):
        h = np.zeros(hs)
        h[j] = 1.0
        prob, L = build_unconstrained_qp(cfg, _state_from_stacked(cfg, h))
        sol = qpmod.solve_qp(prob)
        if sol.status != "optimal":
            raise ValueError("unconstrained KKT system is singular")
        K[:, j] = sol.x_star[L.u(0)]
    return K
