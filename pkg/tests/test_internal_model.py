import numpy as np
import pytest

from immpc import internal_model as im
from immpc import model


def test_build_generator_constant_only():
    gen = im.build_generator([], include_constant=True)
    assert gen.q == 1
    assert np.allclose(gen.S, [[1.0]])
    assert np.allclose(gen.C_S, [1.0])


def test_build_generator_quarter_turn():
    gen = im.build_generator([np.pi / 2], include_constant=False)
    assert gen.q == 2
    assert np.allclose(gen.S, [[0.0, -1.0], [1.0, 0.0]], atol=1e-15)


def test_build_generator_period_ten():
    gen = im.build_generator([2 * np.pi / 10], include_constant=True)
    assert gen.q == 3
    assert np.isclose(gen.S[1, 1], 0.809017, atol=1e-6)
    assert np.isclose(gen.S[2, 1], 0.587785, atol=1e-6)


def test_build_generator_rejects_bad_frequencies():
    with pytest.raises(ValueError):
        im.build_generator([0.0], include_constant=True)
    with pytest.raises(ValueError):
        im.build_generator([np.pi], include_constant=True)
    with pytest.raises(ValueError):
        im.build_generator([0.3, 0.3], include_constant=True)


def test_char_poly_integrator():
    gen = im.build_generator([], include_constant=True)
    p = im.char_poly(gen)
    assert np.allclose(p.coefficients, [1.0, -1.0])


def test_char_poly_matches_reported_coefficients():
    gen = im.build_generator([2 * np.pi / 10], include_constant=True)
    p = im.char_poly(gen)
    assert np.allclose(p.coefficients, [1.0, -2.618, 2.618, -1.0], atol=5e-4)
    assert np.allclose(p.coefficients,
                       [1.0, -(1 + 2 * np.cos(0.2 * np.pi)),
                        1 + 2 * np.cos(0.2 * np.pi), -1.0])


def test_char_poly_quarter_turn_product():
    gen = im.build_generator([np.pi / 2], include_constant=True)
    p = im.char_poly(gen)
    assert np.allclose(p.coefficients, [1.0, -1.0, 1.0, -1.0], atol=1e-12)


def test_char_poly_roots_equal_generator_eigenvalues():
    for freqs, const in ([[0.4], True], [[0.3, 1.1], False], [[0.25, 0.8, 2.0], True]):
        gen = im.build_generator(freqs, include_constant=const)
        roots = np.sort_complex(im.char_poly(gen).roots())
        eigs = np.sort_complex(np.linalg.eigvals(gen.S))
        assert np.max(np.abs(roots - eigs)) < 1e-10


def test_annihilation_of_generator_trajectories():
    rng = np.random.default_rng(3)
    gen = im.build_generator([0.6, 1.3], include_constant=True)
    p = im.char_poly(gen)
    w0 = rng.normal(size=gen.q)
    assert im.annihilation_check(p, gen, w0, 60) <= 1e-9
    assert im.annihilation_check(p, gen, np.zeros(gen.q), 60) == 0.0


def test_annihilation_detects_wrong_internal_model():
    gen = im.build_generator([0.6], include_constant=False)
    p = im.Polynomial([1.0, -1.0])
    assert im.annihilation_check(p, gen, [1.0, 0.0], 60) > 0.1


def test_polynomial_is_monic_and_rejects_zero_leading():
    p = im.Polynomial([2.0, -4.0])
    assert np.allclose(p.coefficients, [1.0, -2.0])
    with pytest.raises(ValueError):
        im.Polynomial([0.0, 1.0])


def _velocity_filter(dim=1):
    return im.MatrixFractionFilter.identity(im.Polynomial([1.0, -1.0]), dim)


def test_inverse_filter_velocity_form():
    f = _velocity_filter()
    st = f.new_inverse_state()
    e1 = im.inverse_filter_step(f, st, [5.0])
    e2 = im.inverse_filter_step(f, st, [3.0])
    assert np.isclose(e1[0], 5.0)
    assert np.isclose(e2[0], -2.0)


def test_inverse_filter_kills_constants_after_startup():
    gen = im.build_generator([0.9], include_constant=True)
    f = im.MatrixFractionFilter.identity(im.char_poly(gen), 2)
    st = f.new_inverse_state()
    outs = [im.inverse_filter_step(f, st, [4.0, -1.0]) for _ in range(10)]
    assert all(np.max(np.abs(e)) < 1e-12 for e in outs[f.n_n:])
    assert st.trusted


def test_inverse_filter_annihilates_exosystem_references():
    # x_ref(t) = Pi1 S^t w0 is mapped to zero once the window fills
    rng = np.random.default_rng(7)
    gen = im.build_generator([0.7], include_constant=True)
    p = im.char_poly(gen)
    Pi1 = rng.normal(size=(3, gen.q))
    f = im.MatrixFractionFilter.identity(p, 3)
    st = f.new_inverse_state()
    w = rng.normal(size=gen.q)
    resid = []
    for t in range(20):
        resid.append(np.max(np.abs(im.inverse_filter_step(f, st, Pi1 @ w))))
        w = gen.S @ w
    assert max(resid[p.degree:]) <= 1e-9


def test_filter_linearity():
    rng = np.random.default_rng(11)
    gen = im.build_generator([0.5], include_constant=True)
    f = im.MatrixFractionFilter.scalar(im.char_poly(gen), [1.0, -0.4], 2)
    s1, s2, s12 = (f.new_inverse_state() for _ in range(3))
    xs1 = rng.normal(size=(15, 2))
    xs2 = rng.normal(size=(15, 2))
    for x1, x2 in zip(xs1, xs2):
        e1 = im.inverse_filter_step(f, s1, x1)
        e2 = im.inverse_filter_step(f, s2, x2)
        e12 = im.inverse_filter_step(f, s12, x1 + x2)
        assert np.allclose(e12, e1 + e2, atol=1e-12)


def test_forward_filter_zero_stream():
    f = _velocity_filter()
    st = f.new_forward_state()
    for _ in range(5):
        u = im.forward_filter_step(f, st, [0.0])
        assert u[0] == 0.0


def test_forward_filter_discrete_integrator():
    f = _velocity_filter()
    st = f.new_forward_state()
    us = [im.forward_filter_step(f, st, [1.0])[0] for _ in range(6)]
    assert np.allclose(us, [1, 2, 3, 4, 5, 6])


def test_round_trip_identity_on_random_streams():
    rng = np.random.default_rng(13)
    gen = im.build_generator([0.45, 1.2], include_constant=True)
    f = im.MatrixFractionFilter.scalar(im.char_poly(gen), [1.0, -0.3, 0.1], 2)
    inv = f.new_inverse_state()
    fwd = f.new_forward_state()
    stream = rng.normal(size=(50, 2))
    for u in stream:
        e = im.inverse_filter_step(f, inv, u)
        u_back = im.forward_filter_step(f, fwd, e)
        assert np.allclose(u_back, u, atol=1e-10)


def test_filter_validates_Q0():
    with pytest.raises(ValueError):
        im.MatrixFractionFilter((np.zeros((2, 2)),), im.Polynomial([1.0, -1.0]))


def test_cancellation_check_four_tank_passes():
    sysc, _, _ = model.four_tank()
    plant = model.discretize_euler(sysc, 1.0)
    gen = im.build_generator([2 * np.pi / 10], include_constant=True)
    p = im.char_poly(gen)
    Gx = im.MatrixFractionFilter.identity(p, 4)
    Gu = im.MatrixFractionFilter.identity(p, 2)
    rep = im.cancellation_check(plant, Gx, Gu)
    assert rep.passed


def test_cancellation_check_flags_plant_pole_on_root():
    plant = model.DiscreteLTI([[1.0]], [[1.0]], [[1.0]], 1.0)
    p = im.Polynomial([1.0, -1.0])
    Gx = im.MatrixFractionFilter.identity(p, 1)
    Gu = im.MatrixFractionFilter.identity(p, 1)
    rep = im.cancellation_check(plant, Gx, Gu)
    assert not rep.passed
    assert rep.plant_pole_conflicts


def test_cancellation_check_flags_full_cancellation():
    plant = model.DiscreteLTI([[0.5]], [[1.0]], [[1.0]], 1.0)
    p = im.Polynomial([1.0, -1.0])
    Gx = im.MatrixFractionFilter.scalar(p, p.coefficients, 1)  # Q(z) = p(z) I
    Gu = im.MatrixFractionFilter.identity(p, 1)
    rep = im.cancellation_check(plant, Gx, Gu)
    assert not rep.passed
    assert rep.numerator_conflicts
    with pytest.raises(ValueError):
        Gx.validate_no_cancellation()
