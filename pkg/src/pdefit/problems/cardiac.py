"""Excitable cardiac tissue on a 2D slab: voltage diffuses through a
heterogeneous conductivity field while a recovery variable gates the
reaction, the two-variable canine ventricular model.

    dV/dt = div(D grad V) - k0 V (V - a)(V - 1) - V W
    dW/dt = (eps + mu1 W / (V + mu2)) (-W - k0 V (V - b - 1))

V is the observable; D(x, y) is the unknown space-dependent field. A
stimulus strip in the initial condition launches a planar wave. The
right-hand side and its adjoint are hand-vectorized (this is the largest
problem; the generic tape adapter would roughly double training time).
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from ..errors import PhysicsError, StateError
from ..grid import DivGradOperator, build_grid, zero_flux_bcs
from .base import Problem, SolveSetup, UnknownSlot, leaf_values_from_bindings


def _load_constants():
    with resources.files("pdefit.problems.data").joinpath("cardiac_constants.json").open() as f:
        return json.load(f)


class CardiacRhs:
    """Hand-coded rhs/adjoint pair for the two-variable model."""

    def __init__(self, divgrad, d_nodes, constants, n):
        if np.any(d_nodes < 0):
            raise PhysicsError("conductivity D must be non-negative at all nodes")
        self.n = n
        self.c = constants
        self.d_nodes = d_nodes
        self.divgrad = divgrad
        if np.all(d_nodes > 0):
            mat, off = divgrad.materialize(d_nodes)
        else:  # D == 0 allowed: pure reaction dynamics
            mat, off = divgrad.materialize(np.maximum(d_nodes, 1e-300))
        self.A = mat
        self.A_t = mat.T.tocsr()
        self.off = off
        self.acc = {}

    def eval(self, t, s):
        n, c = self.n, self.c
        V, W = s[:n], s[n:]
        dV = self.A @ V + self.off - c["k0"] * V * (V - c["a"]) * (V - 1.0) - V * W
        q = c["eps"] + c["mu1"] * W / (V + c["mu2"])
        dW = q * (-W - c["k0"] * V * (V - c["b"] - 1.0))
        return np.concatenate([dV, dW])

    def vjp(self, t, s, w):
        n, c = self.n, self.c
        V, W = s[:n], s[n:]
        wV, wW = w[:n], w[n:]
        k0, a, b, mu1, mu2 = c["k0"], c["a"], c["b"], c["mu1"], c["mu2"]
        vm = V + mu2
        q = c["eps"] + mu1 * W / vm
        r = -W - k0 * V * (V - b - 1.0)
        dfV_dV = -k0 * (3.0 * V * V - 2.0 * (a + 1.0) * V + a) - W
        dfW_dV = q * (-k0 * (2.0 * V - b - 1.0)) + r * (-mu1 * W / (vm * vm))
        dfW_dW = -q + r * (mu1 / vm)
        gV = self.A_t @ wV + wV * dfV_dV + wW * dfW_dV
        gW = wV * (-V) + wW * dfW_dW
        gp = self.divgrad.vjp_coeff(V, wV)
        self.acc["D.nodes"] = self.acc.get("D.nodes", 0.0) + gp
        return np.concatenate([gV, gW])

    def leaf_grads(self):
        return self.acc


def _setup_solve(problem, bindings, tape):
    leaves, pre_vars, _ = leaf_values_from_bindings(problem, bindings, tape)
    d_nodes = leaves["D.nodes"]
    rhs = CardiacRhs(problem.meta["divgrad"], d_nodes, problem.constants, problem.grid.n_total)
    return SolveSetup(rhs=rhs, pre_vars=pre_vars)


def build_cardiac(counts=None, t_end=None, output_dt=None, stimulus="strip"):
    """Cardiac problem preset. Defaults: 10x10 mm slab, 50x50 nodes,
    horizon 40 TU sampled every 1 TU, planar stimulus strip at the left."""
    data = _load_constants()
    geo = data["geometry"]
    constants = {k: v["value"] for k, v in data["constants"].items()}
    counts = list(counts or geo["default_counts"])
    lx, ly = geo["domain_mm"]
    grid = build_grid(extents=[(0.0, lx), (0.0, ly)], counts=counts)
    t_end = geo["t_end_tu"] if t_end is None else float(t_end)
    dt = geo["output_dt_tu"] if output_dt is None else float(output_dt)
    n_out = int(round(t_end / dt))
    output_times = np.linspace(0.0, t_end, n_out + 1)

    n = grid.n_total
    pos = grid.node_positions()
    v0 = np.where(pos[:, 0] <= geo["stimulus_strip_mm"] + 1e-12, 1.0, 0.0)
    if stimulus == "none":
        v0 = np.zeros(n)
    ic = np.concatenate([v0, np.zeros(n)])

    slots = [
        UnknownSlot(
            name="D",
            input_kind="space",
            reference=data["reference_fields"]["D_healthy_mm2_per_tu"],
            scalar_bounds=(0.01, 1.0),
            network_preset="cardiac",
            units="mm^2/TU",
        )
    ]
    divgrad = DivGradOperator(grid, zero_flux_bcs(grid))
    return Problem(
        pid="cardiac",
        grid=grid,
        state_names=("V", "W"),
        observable="V",
        constants=constants,
        unknown_slots=slots,
        ic=ic,
        output_times=output_times,
        setup_solve=_setup_solve,
        meta={"divgrad": divgrad, "units": {"space": "mm", "time": "TU"},
              "time_unit_ms": geo["time_unit_ms"],
              "D_fibrotic": data["reference_fields"]["D_fibrotic_mm2_per_tu"]},
    )


def pointwise_reaction_rhs(constants):
    """0-D reaction system (D = 0) for the per-node reduction oracle."""

    def rhs(t, y):
        V, W = y[0], y[1]
        c = constants
        dV = -c["k0"] * V * (V - c["a"]) * (V - 1.0) - V * W
        q = c["eps"] + c["mu1"] * W / (V + c["mu2"])
        dW = q * (-W - c["k0"] * V * (V - c["b"] - 1.0))
        return np.array([dV, dW])

    return rhs
