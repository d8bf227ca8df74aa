import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backcalc import splines


def quad_penalty_oracle(term, beta, n_quad=20000):
    """Numerical quadrature of the integrated squared second derivative."""
    lo, hi = term.grid[0], term.grid[-1]
    t = np.linspace(lo, hi, n_quad)
    d2 = splines.evaluate_term(term, t, deriv=2) @ beta
    return np.trapezoid(d2**2, t)


class TestCubicBasis:
    def test_shape_and_constant_null(self):
        term = splines.cubic_basis(np.arange(100.0), k=20)
        assert term.design.shape == (100, 20)
        assert np.allclose(term.penalty[0] @ np.ones(20), 0.0, atol=1e-9)

    def test_linear_null_space(self):
        grid = np.arange(100.0)
        term = splines.cubic_basis(grid, k=20)
        # coefficients reproducing f(t)=t via least squares on the design
        beta, *_ = np.linalg.lstsq(term.design, grid, rcond=None)
        assert np.allclose(term.design @ beta, grid, atol=1e-8)
        assert abs(beta @ term.penalty[0] @ beta) < 1e-8

    def test_penalty_matches_quadrature(self):
        rng = np.random.default_rng(42)
        grid = np.arange(31.0)
        term = splines.cubic_basis(grid, k=10)
        beta = rng.normal(size=10)
        exact = beta @ term.penalty[0] @ beta
        approx = quad_penalty_oracle(term, beta)
        assert exact == pytest.approx(approx, rel=1e-6)

    def test_dimension_errors(self):
        with pytest.raises(splines.DimensionError):
            splines.cubic_basis(np.arange(50.0), k=3)
        with pytest.raises(splines.DimensionError):
            splines.cubic_basis(np.arange(10.0), k=11)
        with pytest.raises(splines.GridError):
            splines.cubic_basis(np.array([0.0, 2.0, 1.0]), k=3)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=50, deadline=None)
    def test_quadratic_form_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        term = splines.cubic_basis(np.arange(40.0), k=12)
        beta = rng.normal(scale=10.0, size=12)
        assert beta @ term.penalty[0] @ beta >= -1e-10


class TestCyclicBasis:
    def test_periodic_end_conditions(self):
        term = splines.cyclic_basis(period=7.0, k=6)
        rng = np.random.default_rng(0)
        beta = rng.normal(size=term.n_coef)
        for deriv in (0, 1, 2):
            lo = splines.evaluate_term(term, [0.0], deriv=deriv) @ beta
            hi = splines.evaluate_term(term, [7.0], deriv=deriv) @ beta
            assert lo == pytest.approx(hi, abs=1e-9)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=50, deadline=None)
    def test_zero_mean_over_week(self, seed):
        rng = np.random.default_rng(seed)
        term = splines.cyclic_basis(period=7.0, k=7)
        beta = rng.normal(scale=5.0, size=term.n_coef)
        vals = splines.evaluate_term(term, np.arange(1.0, 8.0)) @ beta
        assert abs(vals.mean()) < 1e-10

    def test_penalty_psd_and_k_error(self):
        term = splines.cyclic_basis(period=7.0, k=8)
        eig = np.linalg.eigvalsh(term.penalty[0])
        assert eig.min() > -1e-10 * eig.max()
        with pytest.raises(splines.DimensionError):
            splines.cyclic_basis(period=7.0, k=2)

    def test_constant_reproduced_before_constraint(self):
        # the unconstrained value basis interpolates knot values, so equal
        # values give a constant function (penalty null space)
        knots = np.linspace(0.0, 7.0, 7)
        rows = splines._cyclic_design_raw(np.linspace(0, 7, 41), knots, 7.0)
        assert np.allclose(rows @ np.ones(6), 1.0, atol=1e-10)


class TestAdaptivePenalty:
    def test_components_sum_to_cubic_penalty(self):
        grid = np.arange(120.0)
        plain = splines.cubic_basis(grid, k=20)
        adapt = splines.adaptive_penalty(grid, k=20, m=4)
        assert len(adapt.penalty) == 4
        assert np.allclose(sum(adapt.penalty), plain.penalty[0], atol=1e-8)

    def test_m1_degenerates_to_cubic(self):
        grid = np.arange(60.0)
        plain = splines.cubic_basis(grid, k=12)
        adapt = splines.adaptive_penalty(grid, k=12, m=1)
        assert np.allclose(adapt.penalty[0], plain.penalty[0], atol=1e-12)
        assert np.allclose(adapt.design, plain.design)

    def test_each_component_psd(self):
        term = splines.adaptive_penalty(np.arange(400.0), k=30, m=5)
        assert len(term.penalty) == 5
        for S in term.penalty:
            eig = np.linalg.eigvalsh(S)
            assert eig.min() > -1e-10 * max(eig.max(), 1e-30)

    def test_dimension_error(self):
        with pytest.raises(splines.DimensionError):
            splines.adaptive_penalty(np.arange(50.0), k=8, m=8)


class TestDilateGrid:
    def test_paper_weights_total_length(self):
        grid = np.arange(11.0)
        out = splines.dilate_grid(grid, anchor_day=5)
        assert out[-1] - out[0] == pytest.approx(20.0)
        assert out.size == grid.size

    def test_identity_weights(self):
        grid = np.arange(20.0)
        out = splines.dilate_grid(grid, anchor_day=9, weights=(1.0, 1.0, 1.0))
        assert np.array_equal(out, grid)

    @given(st.floats(min_value=0.1, max_value=50.0),
           st.floats(min_value=0.1, max_value=50.0),
           st.floats(min_value=0.1, max_value=50.0))
    @settings(max_examples=50, deadline=None)
    def test_monotone_for_any_valid_weights(self, w1, w2, w3):
        out = splines.dilate_grid(np.arange(15.0), anchor_day=7, weights=(w1, w2, w3))
        assert np.all(np.diff(out) > 0)

    def test_anchor_edge_error(self):
        with pytest.raises(splines.GridError):
            splines.dilate_grid(np.arange(11.0), anchor_day=0)
        with pytest.raises(splines.GridError):
            splines.dilate_grid(np.arange(11.0), anchor_day=10)

    def test_basis_on_dilated_grid_keeps_day_mapping(self):
        grid = np.arange(30.0)
        dil = splines.dilate_grid(grid, anchor_day=14)
        term = splines.cubic_basis(dil, k=10)
        # one design row per calendar day, in calendar order
        assert term.design.shape[0] == grid.size
        assert np.array_equal(term.grid, dil)


def test_polynomial_reproduction_in_null_space():
    grid = np.linspace(0.0, 50.0, 80)
    term = splines.cubic_basis(grid, k=15)
    for target in (np.ones_like(grid), grid, 2.5 - 0.3 * grid):
        beta, *_ = np.linalg.lstsq(term.design, target, rcond=None)
        assert np.max(np.abs(term.design @ beta - target)) < 1e-8
        assert abs(beta @ term.penalty[0] @ beta) < 1e-8
