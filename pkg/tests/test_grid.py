import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdefit.errors import ConfigError, NumericError, PhysicsError, ShapeError
from pdefit.grid import (
    BoundaryCondition,
    DivGradOperator,
    apply_operator,
    build_grid,
    diff_matrix,
    gradient_matrix,
    variable_coeff_divgrad,
    zero_flux_bcs,
)

EPS = np.finfo(float).eps


def cell_mesh():
    # 38 nodes on [0, 1900] with shorter end gaps, like the migration assay grid
    return build_grid(coords=[np.concatenate([[0.0], np.linspace(40.0, 1860.0, 36), [1900.0]])])


class TestBuildGrid:
    def test_22x22_domain(self):
        g = build_grid(extents=[(0.0, 1.0), (0.0, 0.5)], counts=[22, 22])
        assert g.n_total == 484
        assert np.isclose(g.spacings(0)[0], 1.0 / 21, atol=1e-12)
        assert all(g.uniform)

    def test_three_node_axis(self):
        g = build_grid(extents=[(0.0, 1.0)], counts=[3])
        np.testing.assert_allclose(g.axis_coords[0], [0.0, 0.5, 1.0])

    def test_unequal_first_gap_breaks_uniform_flag(self):
        g = build_grid(coords=[[0.0, 25.0, 75.0, 125.0, 175.0]])
        assert g.uniform == (False,)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(extents=[(0, 1)], counts=[2]),
            dict(extents=[(1, 0)], counts=[5]),
            dict(coords=[[0.0, 1.0, 1.0, 2.0]]),
            dict(coords=[[0.0, 2.0, 1.0]]),
        ],
    )
    def test_degenerate_axes_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            build_grid(**kwargs)

    def test_flat_order_is_x_fastest(self):
        g = build_grid(extents=[(0, 1), (0, 2)], counts=[3, 4])
        assert g.flat_index((2, 0)) == 2
        assert g.flat_index((0, 1)) == 3
        pos = g.node_positions()
        np.testing.assert_allclose(pos[1], [0.5, 0.0])
        np.testing.assert_allclose(pos[3], [0.0, 2.0 / 3.0])


class TestDiffMatrix:
    def test_uniform_interior_second_difference_row(self):
        g = build_grid(extents=[(0.0, 1.0)], counts=[11])  # h = 0.1
        op = diff_matrix(g, 0, 2, zero_flux_bcs(g))
        row = op.matrix[5].toarray().ravel()
        np.testing.assert_allclose(row[4:7], [100.0, -200.0, 100.0], rtol=1e-12)

    def test_quadratic_exactness_uniform(self):
        g = build_grid(extents=[(0.0, 2.0)], counts=[17])
        x = g.axis_coords[0]
        op = diff_matrix(g, 0, 2, zero_flux_bcs(g))
        d2 = op.matrix @ (x**2)
        np.testing.assert_allclose(d2[1:-1], 2.0, rtol=100 * EPS)

    def test_nonuniform_middle_weights_and_quadratic(self):
        # brute-force oracle: the 3-point stencil solved from Taylor expansions
        # through {0, 1, 3} must weight samples as (2/3, -1, 1/3) and recover
        # d2(x^2)/dx2 = 2 exactly
        g = build_grid(coords=[[0.0, 1.0, 3.0]])
        op = diff_matrix(g, 0, 2, zero_flux_bcs(g))
        row = op.matrix[1].toarray().ravel()
        np.testing.assert_allclose(row, [2.0 / 3.0, -1.0, 1.0 / 3.0], rtol=1e-14)
        applied = op.matrix @ np.array([0.0, 1.0, 9.0])
        assert abs(applied[1] - 2.0) < 100 * EPS

    def test_quadratic_exactness_nonuniform_cell_mesh(self):
        # exactness is relative to the stencil's cancellation scale
        # |A| @ |p| (the 1/h^2-weighted sample magnitudes), the honest
        # roundoff measure when coordinates are large
        g = cell_mesh()
        x = g.axis_coords[0]
        op = diff_matrix(g, 0, 2, zero_flux_bcs(g))
        for a, b, c in [(1.0, 0.0, 0.0), (2.5, -1.0, 3.0)]:
            p = a * x**2 + b * x + c
            scale = np.abs(op.matrix) @ np.abs(p)
            err = np.abs(op.matrix @ p - 2 * a)
            assert np.all(err[1:-1] <= 100 * EPS * scale[1:-1])

    def test_first_derivative_quadratic_exactness_nonuniform(self):
        g = cell_mesh()
        x = g.axis_coords[0]
        op = diff_matrix(g, 0, 1, zero_flux_bcs(g))
        d1 = (op.matrix @ (x**2 - 3 * x))[1:-1]
        np.testing.assert_allclose(d1, (2 * x - 3)[1:-1], rtol=1e-9)

    def test_strict_interior_rows_sum_to_zero(self):
        g = build_grid(extents=[(0, 1), (0, 1)], counts=[8, 8])
        bcs = zero_flux_bcs(g)
        bcs[0] = BoundaryCondition("dirichlet", 0, "low", beta=2.0)
        for order in (1, 2):
            for axis in (0, 1):
                op = diff_matrix(g, axis, order, bcs)
                sums = np.asarray(op.matrix.sum(axis=1)).ravel()
                k = g.axis_index_grid(axis)
                strict = (k >= 2) & (k <= g.dims[axis] - 3)
                np.testing.assert_allclose(sums[strict], 0.0, atol=1e-10)

    def test_order_validation(self):
        g = build_grid(extents=[(0, 1)], counts=[5])
        with pytest.raises(ConfigError):
            diff_matrix(g, 0, 3, zero_flux_bcs(g))

    def test_missing_face_bc_rejected(self):
        g = build_grid(extents=[(0, 1)], counts=[5])
        with pytest.raises(ConfigError):
            diff_matrix(g, 0, 2, [BoundaryCondition("neumann", 0, "low")])


class TestApplyOperator:
    def test_constant_state_first_derivative_zero(self):
        g = build_grid(extents=[(0, 1)], counts=[9])
        op = diff_matrix(g, 0, 1, zero_flux_bcs(g))
        np.testing.assert_allclose(apply_operator(op, np.full(9, 4.2)), 0.0, atol=1e-12)

    def test_sin_second_derivative_converges_at_order_two(self):
        errs = []
        for n in (101, 201):
            g = build_grid(extents=[(0.0, np.pi)], counts=[n])
            x = g.axis_coords[0]
            bcs = [
                BoundaryCondition("dirichlet", 0, "low", beta=0.0),
                BoundaryCondition("dirichlet", 0, "high", beta=0.0),
            ]
            op = diff_matrix(g, 0, 2, bcs)
            d2 = apply_operator(op, np.sin(x))
            errs.append(np.max(np.abs(d2[2:-2] + np.sin(x)[2:-2])))
        ratio = errs[0] / errs[1]
        assert 3.3 < ratio < 4.7  # observed order 2.0 +- 0.2

    def test_dirichlet_offset_contribution(self):
        g = build_grid(extents=[(0.0, 1.0)], counts=[6])
        h = g.spacings(0)[0]
        bcs = [
            BoundaryCondition("dirichlet", 0, "low", beta=5.0),
            BoundaryCondition("dirichlet", 0, "high", beta=5.0),
        ]
        op = diff_matrix(g, 0, 2, bcs)
        out = apply_operator(op, np.zeros(6))
        np.testing.assert_allclose(out[1], 5.0 / h**2, rtol=1e-12)
        np.testing.assert_allclose(out[-2], 5.0 / h**2, rtol=1e-12)
        np.testing.assert_allclose(out[[0, -1]], 0.0)

    def test_length_mismatch_and_nonfinite(self):
        g = build_grid(extents=[(0, 1)], counts=[5])
        op = diff_matrix(g, 0, 2, zero_flux_bcs(g))
        with pytest.raises(ShapeError):
            apply_operator(op, np.zeros(4))
        bad = np.zeros(5)
        bad[2] = np.nan
        with pytest.raises(NumericError):
            apply_operator(op, bad)

    def test_neumann_inhomogeneous_linear_profile(self):
        # S = 3x has dS/dx = 3; with beta = 3 at both faces the second
        # derivative must vanish everywhere including boundary rows
        g = build_grid(extents=[(0.0, 2.0)], counts=[12])
        bcs = [
            BoundaryCondition("neumann", 0, "low", beta=3.0),
            BoundaryCondition("neumann", 0, "high", beta=3.0),
        ]
        op = diff_matrix(g, 0, 2, bcs)
        out = apply_operator(op, 3.0 * g.axis_coords[0])
        np.testing.assert_allclose(out, 0.0, atol=1e-10)


class TestVariableCoeffDivGrad:
    def test_constant_coeff_reduces_to_plain_laplacian(self):
        g = build_grid(extents=[(0, 1), (0, 0.5)], counts=[9, 7])
        bcs = zero_flux_bcs(g)
        mat, off = variable_coeff_divgrad(g, np.full(g.n_total, 0.1), bcs)
        ref = sum(diff_matrix(g, a, 2, bcs).matrix for a in range(2)) * 0.1
        assert abs(mat - ref).max() < 1e-12
        np.testing.assert_allclose(off, 0.0, atol=1e-14)

    def test_linear_coeff_analytic_divergence(self):
        # d/dx[(x+1) * d(x)/dx] = 1
        g = build_grid(extents=[(0.0, 1.0)], counts=[41])
        x = g.axis_coords[0]
        mat, off = variable_coeff_divgrad(g, x + 1.0, zero_flux_bcs(g))
        out = mat @ x + off
        np.testing.assert_allclose(out[1:-1], 1.0, atol=2e-3)

    def test_zero_neumann_row_sums_vanish(self):
        g = build_grid(extents=[(0, 1), (0, 1)], counts=[6, 5])
        rng = np.random.default_rng(0)
        coeff = rng.uniform(0.5, 2.0, g.n_total)
        mat, _ = variable_coeff_divgrad(g, coeff, zero_flux_bcs(g))
        np.testing.assert_allclose(np.asarray(mat.sum(axis=1)).ravel(), 0.0, atol=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_discrete_conservation_random_fields(self, seed):
        g = build_grid(extents=[(0, 2), (0, 1)], counts=[7, 6])
        rng = np.random.default_rng(seed)
        coeff = rng.uniform(0.1, 3.0, g.n_total)
        state = rng.normal(size=g.n_total)
        mat, off = variable_coeff_divgrad(g, coeff, zero_flux_bcs(g))
        vol = g.node_volumes()
        total = vol @ (mat @ state + off)
        assert abs(total) <= 1e-10 * max(1.0, np.abs(vol * (mat @ state)).sum())

    def test_conservation_on_nonuniform_mesh(self):
        g = cell_mesh()
        rng = np.random.default_rng(3)
        coeff = rng.uniform(0.5, 2.0, g.n_total)
        state = rng.normal(size=g.n_total)
        mat, off = variable_coeff_divgrad(g, coeff, zero_flux_bcs(g))
        vol = g.node_volumes()
        assert abs(vol @ (mat @ state + off)) < 1e-10 * np.abs(vol * (mat @ state)).sum()

    def test_nonpositive_coeff_rejected(self):
        g = build_grid(extents=[(0, 1)], counts=[5])
        with pytest.raises(PhysicsError):
            variable_coeff_divgrad(g, np.zeros(5), zero_flux_bcs(g))

    def test_vjp_consistency_with_dense_jacobian(self):
        g = build_grid(extents=[(0, 1)], counts=[6])
        bcs = zero_flux_bcs(g)
        op = DivGradOperator(g, bcs)
        rng = np.random.default_rng(7)
        coeff = rng.uniform(0.5, 1.5, 6)
        state = rng.normal(size=6)
        w = rng.normal(size=6)
        # finite-difference the coefficient dependence
        eps = 1e-7
        fd = np.zeros(6)
        for i in range(6):
            cp, cm = coeff.copy(), coeff.copy()
            cp[i] += eps
            cm[i] -= eps
            fd[i] = w @ (op.apply(cp, state) - op.apply(cm, state)) / (2 * eps)
        np.testing.assert_allclose(op.vjp_coeff(state, w), fd, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(
            op.vjp_state(coeff, w),
            op.materialize(coeff)[0].T @ w,
            rtol=1e-12,
        )

    def test_robin_face_cools_toward_ambient(self):
        g = build_grid(extents=[(0.0, 1.0)], counts=[8])
        bcs = [
            BoundaryCondition("robin", 0, "low", beta=1.0, robin_coeff=2.0),
            BoundaryCondition("neumann", 0, "high", beta=0.0),
        ]
        mat, off = variable_coeff_divgrad(g, np.ones(8), bcs)
        out = mat @ np.full(8, 3.0) + off  # uniform state above ambient
        assert out[0] < 0  # boundary node loses heat
        np.testing.assert_allclose(out[1:], 0.0, atol=1e-12)


def test_gradient_matrix_quadratic_exact_including_boundaries():
    g = cell_mesh()
    x = g.axis_coords[0]
    gm = gradient_matrix(g, 0)
    np.testing.assert_allclose(gm @ (x**2 + x), 2 * x + 1, rtol=1e-9)
