import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepfit.solver import SolveOptions, apply_mask, dogleg_solve, expand_mask


def linear_problem(seed, m=20, n=5):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    return A, b, (lambda p, jac: (A @ p - b, A if jac else None))


def rosenbrock(p, jac):
    x, y = p
    r = np.array([10.0 * (y - x * x), 1.0 - x])
    J = np.array([[-20.0 * x, 10.0], [-1.0, 0.0]]) if jac else None
    return r, J


@pytest.mark.parametrize("seed", range(5))
def test_linear_problem_exact(seed):
    A, b, fn = linear_problem(seed)
    rep = dogleg_solve(fn, np.zeros(5), options=SolveOptions(initial_radius=1e3, max_radius=1e4))
    x = np.linalg.solve(A.T @ A, A.T @ b)
    assert np.max(np.abs(rep.params - x)) < 1e-10
    assert rep.accepted <= 2


def test_identity_residual_one_step():
    target = np.array([0.3, -1.2, 2.5])
    rep = dogleg_solve(lambda p, jac: (p - target, np.eye(3) if jac else None), np.zeros(3),
                       options=SolveOptions(initial_radius=10.0, regularization=0.0))
    assert rep.accepted == 1 and np.array_equal(rep.params, target)


def test_rosenbrock():
    rep = dogleg_solve(rosenbrock, np.array([-1.2, 1.0]), options=SolveOptions(max_iterations=200))
    assert np.max(np.abs(rep.params - 1.0)) < 1e-6
    assert rep.iterations <= 200
    assert rep.monotone()


def test_full_mask_round_trip():
    p = np.arange(6.0)
    m = np.ones(6, bool)
    assert np.array_equal(apply_mask(p, m), p)
    assert np.array_equal(expand_mask(apply_mask(p, m), m, np.zeros(6)), p)


@given(st.lists(st.booleans(), min_size=1, max_size=12), st.integers(0, 2 ** 31 - 1))
def test_mask_round_trip(bits, seed):
    m = np.array(bits)
    p = np.random.default_rng(seed).standard_normal(len(m))
    assert np.array_equal(expand_mask(apply_mask(p, m), m, p), p)


def test_inactive_entries_are_never_touched():
    sentinel = np.nan
    p0 = np.array([sentinel, 0.0, sentinel, 0.0])
    mask = np.array([False, True, False, True])
    target = np.array([1.0, -2.0])

    def fn(p, jac):
        assert np.isnan(p[0]) and np.isnan(p[2])
        x = p[mask]
        return np.r_[x - target, x[0] * x[1]], (np.array([[1, 0], [0, 1], [x[1], x[0]]]) if jac else None)

    rep = dogleg_solve(fn, p0, mask)
    assert np.isnan(rep.params[0]) and np.isnan(rep.params[2])
    assert np.all(np.isfinite(rep.params[mask]))


def test_zero_iterations_returns_input():
    _, _, fn = linear_problem(0)
    p0 = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
    rep = dogleg_solve(fn, p0, options=SolveOptions(max_iterations=0))
    assert np.array_equal(rep.params, p0) and rep.accepted == 0


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 5.0))
def test_monotone_and_radius_bounds(x0, y0, r0):
    opts = SolveOptions(max_iterations=50, initial_radius=r0, min_radius=1e-6, max_radius=8.0)
    rep = dogleg_solve(rosenbrock, np.array([x0, y0]), options=opts)
    assert rep.monotone()
    assert all(opts.min_radius <= r <= opts.max_radius for r in rep.radius_history)


def test_deterministic():
    a = dogleg_solve(rosenbrock, np.array([-1.2, 1.0]))
    b = dogleg_solve(rosenbrock, np.array([-1.2, 1.0]))
    assert np.array_equal(a.params, b.params) and a.cost_history == b.cost_history


def test_residual_failure_keeps_last_accepted():
    calls = {"n": 0}

    def fn(p, jac):
        calls["n"] += 1
        if calls["n"] > 3:
            raise RuntimeError("detector lost the face")
        return rosenbrock(p, jac)

    rep = dogleg_solve(fn, np.array([-1.2, 1.0]))
    assert rep.termination.startswith("residual failure")
    assert len(rep.cost_history) == rep.accepted + 1
    r, _ = rosenbrock(rep.params, False)
    assert np.isclose(0.5 * r @ r, rep.cost_history[-1])


def test_option_validation():
    with pytest.raises(ValueError):
        SolveOptions(initial_radius=-1)
    with pytest.raises(ValueError):
        SolveOptions(shrink_ratio=0.9, expand_ratio=0.5)
    with pytest.raises(ValueError):
        dogleg_solve(rosenbrock, np.zeros(2), np.zeros(2, bool))
