"""Analytic linear-decay preset: ds/dt = -p s per node, the closed-form
sensitivity oracle for gradient checks (dS(t)/dp = -t p e^{-p t} s0 ... ).
Lives in the same machinery as the physics problems so the whole adjoint
path is exercised end to end."""

from __future__ import annotations

import numpy as np

from .. import tape as tp
from ..grid import build_grid
from .base import Problem, SolveSetup, TapedRhs, UnknownSlot, leaf_values_from_bindings


def _setup_solve(problem, bindings, tape):
    leaves, pre_vars, _ = leaf_values_from_bindings(problem, bindings, tape)

    def build(t, s, lv):
        p = lv["p.nodes"]
        return -(p * s)

    return SolveSetup(rhs=TapedRhs(build, leaves, problem.n_state), pre_vars=pre_vars)


def build_decay(n_nodes=3, t_end=1.0, n_out=4):
    grid = build_grid(extents=[(0.0, 1.0)], counts=[n_nodes])
    slots = [UnknownSlot("p", "scalar", 1.0, (0.1, 10.0), units="1/time")]
    return Problem(
        pid="decay",
        grid=grid,
        state_names=("y",),
        observable="y",
        constants={},
        unknown_slots=slots,
        ic=np.ones(grid.n_total),
        output_times=np.linspace(0.0, t_end, n_out + 1),
        setup_solve=_setup_solve,
        meta={"units": {}},
    )
