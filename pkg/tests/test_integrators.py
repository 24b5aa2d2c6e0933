import numpy as np
import pytest
from scipy.linalg import expm

from stacklqg import _backend
from stacklqg.errors import DivergenceError, GridError
from stacklqg.integrators import (Coef, MatrixPath, TimeGrid, euler_maruyama_step, integrate_matrix_ode,
                                  midpoints, riccati_sweep, transition_matrix, transition_path, trapezoid)


def bernoulli_p0(N):
    # p(t) = g / (1 + s g (T - t)) with s = g = T = 1, i.e. dp/dt = s p^2
    g = TimeGrid(1.0, N)
    path = integrate_matrix_ode(lambda t, M: M @ M, np.eye(1), "backward", g)
    return path[0][0, 0]


@pytest.mark.parametrize("N", [0, 1])
def test_grid_too_coarse(N):
    with pytest.raises(GridError):
        TimeGrid(1.0, N)


def test_grid_nodes_and_index():
    g = TimeGrid(2.0, 8)
    assert g.nodes[-1] == 2.0 and g.h == 0.25
    assert g.index(0.5) == 2
    with pytest.raises(GridError):
        g.index(0.3)


def test_constant_rhs():
    g = TimeGrid(1.0, 10)
    B = np.array([[1.0, 2.0], [3.0, 4.0]])
    path = integrate_matrix_ode(lambda t, M: np.zeros_like(M), B, "forward", g)
    np.testing.assert_array_equal(path.values, np.broadcast_to(B, (11, 2, 2)))


def test_bernoulli_closed_form():
    assert abs(bernoulli_p0(1000) - 0.5) < 1e-8


def test_rk4_order():
    e1 = abs(bernoulli_p0(10) - 0.5)
    e2 = abs(bernoulli_p0(20) - 0.5)
    assert 12 <= e1 / e2 <= 20


def test_rotation():
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])
    g = TimeGrid(np.pi, 1000)
    path = integrate_matrix_ode(lambda t, M: A @ M, np.eye(2), "forward", g)
    np.testing.assert_allclose(path[-1], -np.eye(2), atol=1e-6)


def test_boundary_exact_backward():
    g = TimeGrid(1.0, 5)
    B = np.array([[0.1234567]])
    path = integrate_matrix_ode(lambda t, M: M @ M, B, "backward", g)
    assert path[-1][0, 0] == B[0, 0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_node():
    g = TimeGrid(2.0, 200)
    with pytest.raises(DivergenceError) as exc:
        integrate_matrix_ode(lambda t, M: M @ M, np.eye(1) * 5, "forward", g)
    assert exc.value.node is not None and exc.value.node > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@pytest.mark.parametrize("name", sorted(_backend.available_backends()))
def test_sweep_divergence_each_backend(name):
    g = TimeGrid(2.0, 200)
    kernel = _backend.available_backends()[name]
    with pytest.raises(DivergenceError):
        riccati_sweep(np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1), np.zeros((1, 1)), np.eye(1) * 5, g,
                      backward=False, kernel=kernel)


def test_sweep_matches_generic_rk4(rng):
    g = TimeGrid(1.0, 50)
    A = rng.standard_normal((2, 2))
    C = -np.eye(2)
    D = np.eye(2)
    sweep = riccati_sweep(A, A.T, C, D, np.zeros((2, 2)), g, backward=False)
    ref = integrate_matrix_ode(lambda t, M: A @ M + M @ A.T + M @ C @ M + D, np.zeros((2, 2)), "forward", g)
    np.testing.assert_allclose(sweep, ref.values, atol=1e-13)


def test_transition_identity_and_expm(rng):
    g = TimeGrid(1.0, 200)
    A = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(transition_matrix(A, g, 40, 40), np.eye(3))
    Phi = transition_matrix(A, g, 40, 160)
    np.testing.assert_allclose(Phi, expm(A * 0.6), atol=1e-8)


def test_transition_semigroup_timevarying(rng):
    g = TimeGrid(1.0, 300)
    t = g.nodes
    B0, B1 = rng.standard_normal((2, 2, 2))
    gen = MatrixPath(g, B0 + np.sin(3 * t)[:, None, None] * B1)
    j, k, i = 20, 140, 290
    lhs = transition_matrix(gen, g, j, i)
    rhs = transition_matrix(gen, g, k, i) @ transition_matrix(gen, g, j, k)
    np.testing.assert_allclose(lhs, rhs, atol=1e-8)
    callable_gen = lambda s: B0 + np.sin(3 * s) * B1
    np.testing.assert_allclose(transition_matrix(callable_gen, g, j, i), lhs, atol=1e-9)


def test_transition_duality(rng):
    g = TimeGrid(1.0, 400)
    A = rng.standard_normal((2, 2))
    fwd = transition_matrix(A, g, 0, g.N)
    back = integrate_matrix_ode(lambda t, M: -A.T @ M, np.eye(2), "backward", g)
    # backward flow of -A' from T to 0 is Phi(T, 0)'; compare with the inverse transpose
    np.testing.assert_allclose(np.linalg.inv(back[0].T), np.linalg.inv(fwd), atol=1e-6)


def test_transition_tail():
    g = TimeGrid(1.0, 10)
    assert transition_path(np.eye(2), g, 10).shape == (1, 2, 2)
    assert transition_path(np.eye(2), g, 9).shape == (2, 2, 2)
    with pytest.raises(GridError):
        transition_matrix(np.eye(2), g, 5, 3)


def test_midpoints_cubic_exact():
    t = np.linspace(0, 1, 11)
    vals = (t ** 3 - 2 * t)[:, None, None]
    mid = 0.5 * (t[1:] + t[:-1])
    np.testing.assert_allclose(midpoints(vals)[:, 0, 0], mid ** 3 - 2 * mid, atol=1e-14)


def test_coef_constant():
    c = Coef(np.eye(2))
    assert c.nodes.shape == (1, 2, 2) and c.mids is c.nodes


def test_euler_maruyama_cases(rng):
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(euler_maruyama_step(x, np.zeros(2), np.zeros((2, 1)), [0.3], 0.1), x)
    np.testing.assert_allclose(euler_maruyama_step(x, np.array([1.0, -1.0]), np.zeros((2, 1)), [0.3], 0.1),
                               x + 0.1 * np.array([1.0, -1.0]))


def test_brownian_variance(rng):
    M, N, T = 10_000, 50, 1.0
    h = T / N
    X = np.zeros((M, 1))
    for _ in range(N):
        X = euler_maruyama_step(X, np.zeros((M, 1)), np.eye(1), rng.standard_normal((M, 1)) * np.sqrt(h), h)
    var = X[:, 0].var(ddof=1)
    se = var * np.sqrt(2.0 / (M - 1))
    assert abs(var - T) < 3 * se


def test_trapezoid():
    g = TimeGrid(1.0, 1000)
    t = g.nodes
    assert trapezoid(np.full(1001, 2.5), g) == pytest.approx(2.5)
    assert trapezoid(t, g) == pytest.approx(0.5, abs=1e-15)
    assert abs(trapezoid(t ** 2, g) - 1 / 3) < 1e-6
    with pytest.raises(GridError):
        trapezoid(t[:-1], g)


def test_matrix_path_basics():
    g = TimeGrid(1.0, 4)
    p = MatrixPath(g, np.arange(5.0)[:, None, None] * np.ones((5, 2, 2)))
    assert p.shape == (2, 2) and len(p) == 5
    assert p.at(0.125)[0, 0] == pytest.approx(0.5)
    assert p.at(2.0)[0, 0] == 4.0
    assert p.block(slice(0, 1), slice(0, 1)).shape == (1, 1)
    with pytest.raises(ValueError):
        p.values[0, 0, 0] = 1.0
    with pytest.raises(GridError):
        MatrixPath(g, np.zeros((3, 2, 2)))
