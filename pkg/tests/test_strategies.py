import numpy as np
import pytest

from stacklqg.errors import GridError, NotConvergedError
from stacklqg.augment import augment
from stacklqg.integrators import MatrixPath, TimeGrid
from stacklqg.io import read_matrix_path_csv
from stacklqg.oracles import deterministic_tpbvp_oracle, inner_layer_check
from stacklqg.riccati import FixedPointConfig, RiccatiBundle, solve_riccati
from stacklqg.strategies import (FilterState, build_gains, control_follower, control_leader,
                                 follower_filter_step, leader_filter_step, step_filters,
                                 telescoped_leader_gain, write_gains_csv)


def zero_bundle(aug, g):
    from stacklqg.riccati import FixedPointReport
    n2 = aug.Abold.shape[0]
    Z = MatrixPath(g, np.zeros((g.N + 1, n2, n2)))
    Xi = MatrixPath(g, np.zeros((g.N + 1, 2 * n2, 2 * n2)))
    return RiccatiBundle(aug=aug, grid=g, P=Z, Pdag=Z, Pddag=Z, Sigma=Z, Xi=Xi, Xi11=Z,
                         fp_report=FixedPointReport(2, 0.0, 1e-8))


def test_zero_riccati_zero_gains(scalar_spec):
    aug = augment(scalar_spec)
    gains = build_gains(zero_bundle(aug, TimeGrid(1.0, 10)), aug)
    for name in ("K_F", "K_L_tilde", "K_L_hat", "L_hat", "L_tilde"):
        np.testing.assert_array_equal(getattr(gains, name).values, 0)


def test_refuses_unconverged(scalar_spec):
    aug = augment(scalar_spec)
    b = solve_riccati(aug, TimeGrid(1.0, 50), FixedPointConfig(max_iter=2, raise_on_failure=False))
    with pytest.raises(NotConvergedError):
        build_gains(b, aug)
    assert build_gains(b, aug, allow_unconverged=True).K_F.shape == (1, 2)


def test_terminal_leader_hat_gain_vanishes(debt_400):
    np.testing.assert_array_equal(debt_400.gains.K_L_hat[-1], 0)


def test_scalar_K_F_is_bottom_row(scalar_2000):
    b, gains, aug = scalar_2000.bundle, scalar_2000.gains, scalar_2000.aug
    np.testing.assert_array_equal(gains.K_F[0], -b.P[0][1:, :])
    # and the inner-layer oracle agrees with P(0) on that row
    chk = inner_layer_check(b, aug, scalar_2000.grid, 0, np.array([0.0, 1.0]))
    assert abs(-chk.rhs[1] - gains.K_F[0][0, 1]) <= 1e-6 * (1 + abs(gains.K_F[0][0, 1]))


def test_zero_estimates_zero_controls(debt_400):
    g = debt_400.gains
    assert not control_follower(g, 3, np.zeros(4)).any()
    assert not control_leader(g, 3, np.zeros(4), np.zeros(4)).any()


def test_telescoping(debt_400, rng):
    g, b = debt_400.gains, debt_400.bundle
    tel = telescoped_leader_gain(b)
    for j in (0, 100, 400):
        x = rng.standard_normal(4)
        np.testing.assert_allclose(control_leader(g, j, x, x), tel[j] @ x, atol=1e-12)


def test_zero_innovation_follows_drift(debt_400, rng):
    g = debt_400.gains
    h = debt_400.grid.h
    s = FilterState.initial(debt_400.aug)
    x = rng.standard_normal(4)
    s = FilterState(x_hat=x, x_tilde=x, node=5)
    nxt = follower_filter_step(s, g.H_F @ x * h, g, h)
    np.testing.assert_allclose(nxt.x_hat, x + g.A_hat_cl[5] @ x * h, atol=1e-15)
    assert nxt.node == 6 and nxt.x_tilde is s.x_tilde


def test_no_gain_ignores_observations(scalar_spec, rng):
    aug = augment(scalar_spec)
    grid = TimeGrid(1.0, 10)
    gains = build_gains(zero_bundle(aug, grid), aug)
    s = FilterState(x_hat=np.ones(2), x_tilde=np.ones(2), node=0)
    a = step_filters(s, rng.standard_normal(1), rng.standard_normal(1), gains, grid.h)
    b = step_filters(s, rng.standard_normal(1), rng.standard_normal(1), gains, grid.h)
    np.testing.assert_array_equal(a.x_hat, b.x_hat)
    np.testing.assert_array_equal(a.x_tilde, b.x_tilde)


def test_leader_filter_uses_given_follower_estimate(debt_400, rng):
    g = debt_400.gains
    h = debt_400.grid.h
    s = FilterState(x_hat=rng.standard_normal(4), x_tilde=rng.standard_normal(4), node=0)
    a = leader_filter_step(s, [0.1], [0.2], s.x_hat, g, h)
    b = step_filters(s, np.array([0.1]), np.array([0.2]), g, h)
    np.testing.assert_allclose(a.x_tilde, b.x_tilde, atol=1e-15)


def test_batched_step(debt_400, rng):
    g = debt_400.gains
    h = debt_400.grid.h
    s = FilterState.initial(debt_400.aug, paths=5)
    assert s.x_hat.shape == (5, 4)
    dZ1, dZ2 = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
    b = step_filters(s, dZ1, dZ2, g, h)
    one = step_filters(FilterState(s.x_hat[2], s.x_tilde[2]), dZ1[2], dZ2[2], g, h)
    np.testing.assert_allclose(b.x_hat[2], one.x_hat, atol=1e-15)


def test_step_past_end(debt_400):
    g = debt_400.gains
    s = FilterState(x_hat=np.zeros(4), x_tilde=np.zeros(4), node=debt_400.grid.N)
    with pytest.raises(GridError):
        step_filters(s, np.zeros(1), np.zeros(1), g, debt_400.grid.h)
    with pytest.raises(GridError):
        follower_filter_step(s, np.zeros(1), g, debt_400.grid.h)


def test_scaled_leader(debt_400):
    g = debt_400.gains
    s = g.scaled_leader(2.0, 0.0)
    np.testing.assert_array_equal(s.K_L_tilde.values, 2.0 * g.K_L_tilde.values)
    np.testing.assert_array_equal(s.K_L_hat.values, 0)
    assert s.K_F is g.K_F


def test_initial_controls_match_tpbvp():
    from conftest import solved
    s = solved("debt", 2000, D=np.zeros((2, 1)), x0_cov=np.zeros((2, 2)))
    orc = deterministic_tpbvp_oracle(s.spec, s.grid)
    x = s.aug.gamma_mean
    uF = control_follower(s.gains, 0, x)
    uL = control_leader(s.gains, 0, x, x)
    np.testing.assert_allclose(uF, orc.u_F[0], rtol=1e-4, atol=1e-4)
    np.testing.assert_allclose(uL, orc.u_L[0], rtol=1e-4, atol=1e-4)


def test_write_gains(tmp_path, debt_400):
    files = write_gains_csv(debt_400.gains, tmp_path / "g")
    assert len(files) == 8
    np.testing.assert_array_equal(read_matrix_path_csv(tmp_path / "g" / "K_F.csv"), debt_400.gains.K_F.values)
