import numpy as np
import pytest

from immpc import model
from immpc.internal_model import build_generator


def test_discretize_identity_case():
    sys = model.ContinuousLTI(np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1)))
    d = model.discretize_euler(sys, 1.0)
    assert d.A[0, 0] == 1.0


def test_discretize_scalar_arithmetic():
    sys = model.ContinuousLTI([[-2.0]], [[3.0]], [[1.0]])
    d = model.discretize_euler(sys, 0.1)
    assert np.isclose(d.A[0, 0], 0.8)
    assert np.isclose(d.B[0, 0], 0.3)


def test_discretize_rejects_bad_Ts():
    sys = model.ContinuousLTI([[-1.0]], [[1.0]], [[1.0]])
    with pytest.raises(ValueError):
        model.discretize_euler(sys, 0.0)
    with pytest.raises(ValueError):
        model.discretize_euler(sys, -1.0)


def test_four_tank_matrices():
    sys, poly, op = model.four_tank()
    assert np.isclose(sys.A_c[1, 0], 0.0751)  # inflow of tank 2 from tank 1
    d = model.discretize_euler(sys, 1.0)
    assert np.isclose(d.A[1, 1], 1.0 - 0.0371)
    assert np.isclose(d.A[0, 0], 1.0 - 0.0751)  # 0.9249
    # C picks rows 2 and 4
    assert np.allclose(sys.C @ np.array([0.0, 1.0, 0.0, 0.0]), [1.0, 0.0])
    assert np.allclose(sys.C @ np.array([0.0, 0.0, 0.0, 1.0]), [0.0, 1.0])
    assert np.allclose(op.x_lin, [8.0, 18.0, 8.0, 18.0])


def test_four_tank_constraints_in_deviation_coordinates():
    _, poly, _ = model.four_tank()
    assert poly.n_c == 12
    # h1 in [0, 22] around 8 -> dh1 in [-8, 14]; rows: x upper then x lower
    assert np.isclose(poly.cbar[0], 14.0)
    assert np.isclose(poly.cbar[4], 8.0)
    # u rows: +-8
    assert np.allclose(poly.cbar[8:], 8.0)


def test_four_tank_controllability_rank():
    sys, _, _ = model.four_tank()
    ctrb = model.controllability_matrix(sys.A_c, sys.B_c)
    assert ctrb.shape == (4, 8)
    assert np.linalg.matrix_rank(ctrb, tol=1e-8) == 4


def test_polytope_rejects_unbounded_and_empty():
    with pytest.raises(ValueError):
        model.ConstraintPolytope([[1.0]], [[0.0]], [1.0])  # unbounded below
    with pytest.raises(ValueError):
        model.ConstraintPolytope([[1.0], [-1.0]], [[0.0], [0.0]], [-2.0, 1.0])


def _scalar_channel(E, F, w0=0.0):
    gen = build_generator([], include_constant=True)
    return model.DisturbanceChannel([[E]], [[F]], [w0], gen)


def test_plant_step_zero_case():
    sys = model.DiscreteLTI([[0.5]], [[1.0]], [[1.0]], 1.0)
    dist = _scalar_channel(1.0, 0.0)
    x1, y = model.plant_step(sys, dist, [0.0], [0.0], [0.0])
    assert np.allclose(x1, 0.0) and np.allclose(y, 0.0)


def test_plant_step_direct_substitution():
    sys = model.DiscreteLTI([[0.5]], [[1.0]], [[1.0]], 1.0)
    dist = _scalar_channel(1.0, 0.0)
    x1, y = model.plant_step(sys, dist, [2.0], [1.0], [3.0])
    assert np.isclose(x1[0], 5.0)
    assert np.isclose(y[0], 2.0)


def test_plant_step_zero_w_matches_disturbance_free():
    rng = np.random.default_rng(0)
    sys = model.DiscreteLTI(rng.normal(size=(3, 3)), rng.normal(size=(3, 2)),
                            rng.normal(size=(2, 3)), 1.0)
    gen = build_generator([0.7], include_constant=True)
    dist = model.DisturbanceChannel(rng.normal(size=(3, 3)),
                                    rng.normal(size=(2, 3)),
                                    rng.normal(size=3), gen)
    x = rng.normal(size=3)
    u = rng.normal(size=2)
    x1, y = model.plant_step(sys, dist, x, u, np.zeros(3))
    assert np.allclose(x1, sys.A @ x + sys.B @ u)
    assert np.allclose(y, sys.C @ x)


def test_plant_step_linearity():
    rng = np.random.default_rng(1)
    sys = model.DiscreteLTI(rng.normal(size=(3, 3)), rng.normal(size=(3, 2)),
                            rng.normal(size=(2, 3)), 1.0)
    gen = build_generator([0.5], include_constant=True)
    dist = model.DisturbanceChannel(rng.normal(size=(3, 3)),
                                    rng.normal(size=(2, 3)),
                                    np.zeros(3), gen)
    x1, u1, w1 = rng.normal(size=3), rng.normal(size=2), rng.normal(size=3)
    x2, u2, w2 = rng.normal(size=3), rng.normal(size=2), rng.normal(size=3)
    xa, ya = model.plant_step(sys, dist, x1, u1, w1)
    xb, yb = model.plant_step(sys, dist, x2, u2, w2)
    xs, ys = model.plant_step(sys, dist, x1 + x2, u1 + u2, w1 + w2)
    assert np.allclose(xs, xa + xb, atol=1e-12)
    assert np.allclose(ys, ya + yb, atol=1e-12)


def test_plant_step_dimension_mismatch():
    sys = model.DiscreteLTI([[0.5]], [[1.0]], [[1.0]], 1.0)
    dist = _scalar_channel(1.0, 0.0)
    with pytest.raises(ValueError):
        model.plant_step(sys, dist, [0.0, 0.0], [0.0], [0.0])


def test_euler_consistency_as_Ts_shrinks():
    sys, _, _ = model.four_tank()
    errs = []
    for Ts in (1e-1, 1e-2, 1e-3):
        d = model.discretize_euler(sys, Ts)
        errs.append(np.max(np.abs((d.A - np.eye(4)) / Ts - sys.A_c)))
    # exact for Euler forward: (A - I)/Ts == A_c to rounding
    assert max(errs) < 1e-12
