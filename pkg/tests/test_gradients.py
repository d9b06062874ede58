import numpy as np
import pytest

from pdefit import tape as tp
from pdefit.errors import ConfigError
from pdefit.fieldnet import (
    NETWORK_PRESETS,
    InputScaler,
    ParamField,
    init_mlp,
    zero_mlp,
)
from pdefit.gradients import (
    finite_diff_check,
    grad_scalars,
    grad_weights,
    loss_and_gradients,
    loss_mae,
)
from pdefit.integrate import IntegratorConfig
from pdefit.problems import forward_solve, get_problem, observe


def space_field(problem, slot_name, base, seed=None, weight_scale=1.0):
    slot = problem.slot(slot_name)
    spec = NETWORK_PRESETS[slot.network_preset]
    w = zero_mlp(spec) if seed is None else init_mlp(spec, seed)
    if seed is not None and weight_scale != 1.0:
        for a in w.arrays:
            a *= weight_scale
    pos = problem.grid.node_positions()
    return ParamField(
        slot_name, base, w, "space",
        InputScaler(pos.min(axis=0), pos.max(axis=0)),
        bypass_scalar=slot.bypass_scalar,
    )


def state_field(problem, slot_name, base, lo, hi, seed=None):
    slot = problem.slot(slot_name)
    spec = NETWORK_PRESETS[slot.network_preset]
    w = zero_mlp(spec) if seed is None else init_mlp(spec, seed)
    return ParamField(
        slot_name, base, w, "state",
        InputScaler(np.array([lo]), np.array([hi])),
        state_var=slot.state_var,
    )


class TestLossMae:
    def test_exact_fit_zero(self):
        assert loss_mae([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_arithmetic(self):
        assert loss_mae([1.0, 3.0], [0.0, 0.0]) == 2.0

    def test_single_point_among_sixteen(self):
        pred = np.zeros(16)
        obs = np.zeros(16)
        pred[3] = 0.5
        assert loss_mae(pred, obs) == pytest.approx(0.03125)

    def test_empty_batch_rejected(self):
        with pytest.raises(ConfigError):
            loss_mae([], [])

    def test_nonnegative_and_zero_iff_exact(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=9), rng.normal(size=9)
        assert loss_mae(a, b) > 0
        assert loss_mae(b, b) == 0.0


class TestAnalyticDecay:
    def setup_method(self):
        self.p = get_problem("decay")
        self.cfg = IntegratorConfig(method="rk4", fixed_step=0.01)

    def test_scalar_gradient_matches_analytic_sensitivity(self):
        # s(1) = e^{-p}; ds/dp at p=1 is -e^{-1}; the MAE gradient carries
        # the residual sign
        for obs_val, sign in ((0.2, +1.0), (0.5, -1.0)):
            res = grad_scalars(
                self.p, {"p": 1.0}, nodes=[1], times=[1.0], values=[obs_val], cfg=self.cfg
            )
            expect = sign * -np.exp(-1.0)
            assert res.scalar_grads["p"] == pytest.approx(expect, rel=1e-8)

    def test_stationary_at_exact_fit(self):
        truth = forward_solve(self.p, {"p": 1.0}, self.cfg)
        val = observe(truth, self.p, [1], [1.0])[0]
        res = grad_scalars(self.p, {"p": 1.0}, [1], [1.0], [val], self.cfg)
        assert abs(res.scalar_grads["p"]) < 1e-8 * max(1.0, abs(res.loss))

    def test_fd_check_analytic_decay(self):
        rep = finite_diff_check(
            self.p, {"p": 1.3}, nodes=[0, 1, 2], times=[0.5, 1.0, 0.75],
            values=[0.3, 0.2, 0.4], cfg=self.cfg,
        )
        assert rep["worst_rel_err"] < 1e-6

    def test_gradients_bitwise_deterministic(self):
        a = loss_and_gradients(self.p, {"p": 0.7}, [1], [1.0], [0.3], self.cfg)
        b = loss_and_gradients(self.p, {"p": 0.7}, [1], [1.0], [0.3], self.cfg)
        assert a.loss == b.loss
        assert a.scalar_grads["p"] == b.scalar_grads["p"]

    def test_large_epsilon_flagged_non_converged(self):
        rep = finite_diff_check(
            self.p, {"p": 1.3}, [1], [1.0], [0.2], self.cfg,
            eps_scalar=0.45, check_convergence=True,
        )
        assert rep["worst_rel_err"] > 1e-6  # truncation error visible
        assert "p.base" in rep["flagged"]


def batch_from_truth(problem, bindings, nodes, times, cfg, shift=0.02):
    traj = forward_solve(problem, bindings, cfg)
    vals = observe(traj, problem, nodes, times)
    return np.asarray(vals) + shift  # bounded away from MAE kinks


class TestEq17Eq18Structure:
    def test_stage1_scalar_gradient_equals_summed_node_gradient(self):
        p = get_problem("cardiac", counts=[8, 8], t_end=3.0)
        cfg = IntegratorConfig(method="rk4", fixed_step=0.1)
        rng = np.random.default_rng(2)
        nodes = rng.integers(0, p.grid.n_total, 10)
        times = rng.choice(p.output_times[1:], 10)
        vals = batch_from_truth(p, {"D": np.full(p.grid.n_total, 0.1)}, nodes, times, cfg)

        f = space_field(p, "D", base=0.12)  # zero weights: stage-1 mode
        res = loss_and_gradients(p, {"D": f}, nodes, times, vals, cfg)

        # independent per-node gradient: bind the node values as a raw leaf
        t = tp.Tape()
        nv = t.leaf(np.full(p.grid.n_total, 0.12))
        setup = p.setup_solve({"D": nv}, tape=t)
        from pdefit.gradients import _batch_t_eval, _predict, adjoint_sweep
        from pdefit.integrate import integrate_rk

        t_eval, _ = _batch_t_eval(p, times)
        rec = integrate_rk(setup.rhs.eval, p.ic, t_eval, cfg, record=True)
        pred, tpos = _predict(p, rec.trajectory, nodes, times)
        sidx = p.observation_state_indices(nodes)
        gsign = np.sign(pred - vals) / nodes.size
        out_grads = {}
        for k in np.unique(tpos):
            g = np.zeros(p.n_state)
            np.add.at(g, sidx[tpos == k], gsign[tpos == k])
            out_grads[int(k)] = g
        adjoint_sweep(setup.rhs, rec, out_grads)
        t.backward({setup.pre_vars["D.nodes"]: setup.rhs.leaf_grads()["D.nodes"]})
        node_grad_sum = float(np.sum(nv.grad))
        assert res.scalar_grads["D"] == pytest.approx(node_grad_sum, rel=1e-10)

    def test_weight_gradient_scales_linearly_with_base(self):
        # frozen per-node sensitivity: the multiplicative chain makes
        # dL/dtheta proportional to the base scalar
        p = get_problem("cardiac", counts=[6, 6])
        rng = np.random.default_rng(3)
        g_nodes = rng.normal(size=p.grid.n_total)  # fixed dL/d(field values)
        grads = []
        for base in (0.1, 0.2):
            f = space_field(p, "D", base=base, seed=5)
            t = tp.Tape()
            arrays = [t.leaf(a) for a in f.weights.arrays]
            vals = f.eval(p.grid.node_positions(), arrays=arrays, base=t.leaf(base))
            t.backward({vals: g_nodes})
            grads.append(np.concatenate([a.grad.ravel() for a in arrays]))
        np.testing.assert_allclose(grads[1], 2.0 * grads[0], rtol=1e-12)


@pytest.mark.slow
class TestFiniteDifferenceAgreement:
    def test_cardiac_small_twin(self):
        p = get_problem("cardiac", counts=[10, 10], t_end=4.0)
        cfg = IntegratorConfig(method="rk4", fixed_step=0.08)
        rng = np.random.default_rng(7)
        nodes = rng.integers(0, p.grid.n_total, 12)
        times = rng.choice(p.output_times[1:], 12)
        vals = batch_from_truth(p, {"D": np.full(p.grid.n_total, 0.1)}, nodes, times, cfg)
        f = space_field(p, "D", base=0.09, seed=1)
        rep = finite_diff_check(
            p, {"D": f}, nodes, times, vals, cfg, max_weight_probes=20, seed=3
        )
        assert rep["worst_rel_err"] < 1e-4, rep["rows"]

    def test_flow_small_twin(self):
        p = get_problem("flow", counts=[12, 12], t_end=8.0)
        cfg = IntegratorConfig(method="rk4", fixed_step=0.25)
        rng = np.random.default_rng(11)
        nodes = rng.integers(0, p.grid.n_total, 10)
        times = rng.choice(p.output_times[1:], 10)
        truth_k = 1.0 + 0.4 * np.sin(p.grid.node_positions() @ np.array([6.0, 4.0]))
        vals = batch_from_truth(p, {"K": truth_k}, nodes, times, cfg)
        f = space_field(p, "K", base=1.0, seed=2)
        rep = finite_diff_check(
            p, {"K": f}, nodes, times, vals, cfg, max_weight_probes=20, seed=4
        )
        assert rep["worst_rel_err"] < 1e-4, rep["rows"]

    def test_battery_small_twin(self):
        p = get_problem("battery", counts=[4, 4, 4], t_end=2000.0, output_dt=500.0)
        cfg = IntegratorConfig(method="rk4", fixed_step=40.0)
        surface = p.grid.boundary_node_indices()
        rng = np.random.default_rng(13)
        nodes = rng.choice(surface, 10)
        times = rng.choice(p.output_times[1:], 10)
        from pdefit.problems import RefStateField

        truth = {
            "A_e": 5.4e25,
            "Cp": RefStateField(lambda x: np.full(np.asarray(x).shape, 1400.0)),
            "k_xy": RefStateField(lambda x: np.full(np.asarray(x).shape, 13.0)),
            "k_z": RefStateField(lambda x: np.full(np.asarray(x).shape, 0.8)),
        }
        vals = batch_from_truth(p, truth, nodes, times, cfg, shift=0.5)
        fields = {
            "A_e": 4.0e25,
            "Cp": state_field(p, "Cp", 1500.0, 298.0, 430.0, seed=5),
            "k_xy": state_field(p, "k_xy", 11.0, 298.0, 430.0, seed=6),
            "k_z": state_field(p, "k_z", 0.9, 298.0, 430.0, seed=7),
        }
        rep = finite_diff_check(
            p, fields, nodes, times, vals, cfg,
            eps_scalar=1e-5, max_weight_probes=8, seed=5,
        )
        assert rep["worst_rel_err"] < 1e-4, [r for r in rep["rows"] if r["rel_err"] > 1e-4]

    def test_cell_twin(self):
        p = get_problem("cell")
        cfg = IntegratorConfig(method="rk4", fixed_step=0.5)
        rng = np.random.default_rng(17)
        nodes = rng.integers(0, 38, 12)
        times = rng.choice(p.output_times[1:], 12)
        rho_max = p.constants["rho_max"]
        from pdefit.problems import RefStateField

        truth = {
            "gamma": RefStateField(lambda x: 300.0 * (1.0 + np.asarray(x) / rho_max)),
            "lam1": RefStateField(lambda x: np.full(np.asarray(x).shape, 0.06)),
            "lam2": RefStateField(lambda x: np.full(np.asarray(x).shape, 35.0)),
        }
        vals = batch_from_truth(p, truth, nodes, times, cfg, shift=5e-5)
        fields = {
            "gamma": state_field(p, "gamma", 350.0, 0.0, rho_max, seed=8),
            "lam1": state_field(p, "lam1", 0.05, 0.0, rho_max, seed=9),
            "lam2": state_field(p, "lam2", 40.0, 0.0, rho_max, seed=10),
        }
        rep = finite_diff_check(
            p, fields, nodes, times, vals, cfg, max_weight_probes=10, seed=6
        )
        assert rep["worst_rel_err"] < 1e-4, [r for r in rep["rows"] if r["rel_err"] > 1e-4]

    def test_recorded_adaptive_close_to_fixed_step(self):
        p = get_problem("decay")
        fixed = IntegratorConfig(method="rk4", fixed_step=0.005)
        adaptive = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12)
        a = loss_and_gradients(p, {"p": 0.9}, [1], [1.0], [0.3], fixed)
        b = loss_and_gradients(p, {"p": 0.9}, [1], [1.0], [0.3], adaptive)
        assert a.scalar_grads["p"] == pytest.approx(b.scalar_grads["p"], rel=1e-6)
