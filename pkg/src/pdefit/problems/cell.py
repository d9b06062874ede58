"""Cell migration and proliferation in one dimension on the scratch-assay
mesh: logistic growth plus density-dependent motility,

    d rho / dt = gamma(rho) d2 rho / dx2 + lambda1(rho) rho - lambda2(rho) rho^2

All three parameters are unknown state-dependent fields of the density.
The diffusion term multiplies the pointwise second difference (the
equation's literal non-conservative form); a conservative
div(gamma grad rho) variant is available behind a flag.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .. import tape as tp
from ..errors import StateError
from ..grid import DivGradOperator, build_grid, diff_matrix, zero_flux_bcs
from .base import Problem, SolveSetup, TapedRhs, UnknownSlot, leaf_values_from_bindings


def _load():
    with resources.files("pdefit.problems.data").joinpath("cell_constants.json").open() as f:
        return json.load(f)


def assay_mesh(geo=None):
    geo = geo or _load()["geometry"]
    length, n, gap = geo["domain_um"], geo["n_nodes"], geo["end_gap_um"]
    inner = np.linspace(gap, length - gap, n - 2)
    return build_grid(coords=[np.concatenate([[0.0], inner, [length]])])


def scratch_profile(x, refs):
    """Initial density: confluent layer depleted around the scratch center."""
    x = np.asarray(x, dtype=float)
    center = x.max() / 2.0
    dip = refs["ic_depletion"]["value"] * np.exp(
        -(((x - center) / refs["ic_width_um"]["value"]) ** 2)
    )
    return refs["ic_base"]["value"] * (1.0 - dip)


def _make_build(problem, plain):
    a2 = problem.meta["second_diff"]
    a2_off = problem.meta["second_diff_off"]
    divgrad = problem.meta["divgrad"]
    conservative = problem.meta["conservative"]

    def build(t, s, leaves):
        if not isinstance(s, tp.Var) and np.min(s) < -1e-9:
            raise StateError("cell density became negative")
        taped = isinstance(s, tp.Var)
        lv = leaves if taped else None
        gam = plain["gamma"].values(s, leaves=lv, slot="gamma")
        lam1 = plain["lam1"].values(s, leaves=lv, slot="lam1")
        lam2 = plain["lam2"].values(s, leaves=lv, slot="lam2")
        if conservative:
            diff = divgrad.apply(gam, s)
        else:
            diff = gam * (tp.matvec(a2, s) + a2_off)
        return diff + lam1 * s - lam2 * s * s

    return build


def _setup_solve(problem, bindings, tape):
    leaves, pre_vars, plain = leaf_values_from_bindings(problem, bindings, tape)
    rhs = TapedRhs(_make_build(problem, plain), leaves, problem.n_state)
    return SolveSetup(rhs=rhs, pre_vars=pre_vars)


def build_cell(conservative=False, output_times=None):
    """Cell-migration preset: 38 nodes on [0, 1900] um, zero-flux ends,
    five output times (the first sets the initial condition)."""
    data = _load()
    refs = data["references"]
    grid = assay_mesh(data["geometry"])
    bcs = zero_flux_bcs(grid)
    a2 = diff_matrix(grid, 0, 2, bcs)
    out_t = np.asarray(
        data["geometry"]["output_times_h"] if output_times is None else output_times,
        dtype=float,
    )
    rho_max = refs["rho_max"]["value"]
    slots = [
        UnknownSlot(
            "gamma", "state", refs["gamma"]["value"], (10.0, 5000.0),
            network_preset="cell", state_var="rho", positive=True, units="um^2/h",
        ),
        UnknownSlot(
            "lam1", "state", refs["lambda1"]["value"], (1e-3, 1.0),
            network_preset="cell", state_var="rho", positive=True, units="1/h",
        ),
        UnknownSlot(
            "lam2", "state", refs["lambda2"]["value"], (1.0, 1e4),
            network_preset="cell", state_var="rho", positive=True, units="um^2/h",
        ),
    ]
    return Problem(
        pid="cell",
        grid=grid,
        state_names=("rho",),
        observable="rho",
        constants={"rho_max": rho_max},
        unknown_slots=slots,
        ic=scratch_profile(grid.axis_coords[0], refs),
        output_times=out_t,
        setup_solve=_setup_solve,
        meta={
            "second_diff": tp.LinOp(a2.matrix),
            "second_diff_off": a2.bc_offset,
            "divgrad": DivGradOperator(grid, bcs),
            "conservative": conservative,
            "units": {"space": "um", "time": "h", "rho": "cells/um^2"},
            "references": {k: v["value"] for k, v in refs.items()},
        },
    )
