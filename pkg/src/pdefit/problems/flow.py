"""Solute transport through porous media with an unknown conductivity field.

    du/dt + div(v u) = div(D_disp grad u)
    div(K grad h) = 0
    v = -K grad h / phi

The steady head h is solved once per parameter setting from a flux-driven
inflow (left face) to a fixed outflow head (right face), which makes the
velocity, and hence everything observable, invariant to a global scaling
of K: the field is identifiable only up to scale and is therefore modeled
by a strictly positive network without a stage-1 scalar.

Transport boundary conditions: prescribed inflow concentration (pinned
Dirichlet nodes), zero diffusive flux elsewhere, conservative central
advection of v*u with one-sided differences at the faces.
"""

from __future__ import annotations

import json
import warnings
from importlib import resources

import numpy as np
import scipy.sparse as sp

from .. import tape as tp
from ..errors import PhysicsError
from ..grid import BoundaryCondition, DivGradOperator, build_grid, gradient_matrix
from ..integrate import solve_linear_system
from .base import Problem, SolveSetup, TapedRhs, UnknownSlot, leaf_values_from_bindings


def _load():
    with resources.files("pdefit.problems.data").joinpath("flow_constants.json").open() as f:
        return json.load(f)


def darcy_head_system(problem, k_nodes):
    """Assemble the pinned steady-head system for a fixed K field."""
    k_nodes = np.asarray(k_nodes, dtype=float)
    if np.any(k_nodes <= 0):
        raise PhysicsError("hydraulic conductivity must be positive at all nodes")
    dg = problem.meta["head_divgrad"]
    mat, off = dg.materialize(k_nodes)
    lil = mat.tolil()
    rhs = -off
    for i, beta in zip(problem.meta["head_pin_idx"], problem.meta["head_pin_val"]):
        lil.rows[i], lil.data[i] = [int(i)], [1.0]
        rhs[i] = beta
    return sp.csr_matrix(lil), rhs


def flow_setup(problem, k_nodes, tape=None, k_var=None):
    """Solve the steady head and build nodal velocities.

    Returns (vx, vy, h) as arrays, or tape Vars chained through the linear
    solve when a tape and the K Var are given (adjoint of the solve:
    lambda = M^-T g, dL/dK = -vjp_coeff(h, lambda))."""
    mat, rhs = darcy_head_system(problem, k_nodes)
    h = solve_linear_system(mat, rhs)
    gx, gy = problem.meta["grad_x"], problem.meta["grad_y"]
    phi = problem.constants["phi"]
    if tape is None or k_var is None:
        vx = -k_nodes * (gx.mat @ h) / phi
        vy = -k_nodes * (gy.mat @ h) / phi
        return vx, vy, h

    dg = problem.meta["head_divgrad"]
    mat_t = sp.csr_matrix(mat.T)

    def solve_vjp(g):
        lam = solve_linear_system(mat_t, g)
        return (-dg.vjp_coeff(h, lam),)

    h_var = tape.custom(h, (k_var,), solve_vjp)
    vx = -(k_var * tp.matvec(gx, h_var)) / phi
    vy = -(k_var * tp.matvec(gy, h_var)) / phi
    return vx, vy, h_var


def _make_build(problem):
    n = problem.grid.n_total
    d_disp = problem.constants["D_disp"]
    adv_x, adv_y = problem.meta["grad_x"], problem.meta["grad_y"]
    disp_mat = problem.meta["disp_op"]
    disp_off = problem.meta["disp_off"]
    mask = problem.meta["interior_mask"]

    def build(t, s, leaves):
        vx, vy = leaves["aux.vx"], leaves["aux.vy"]
        adv = tp.matvec(adv_x, vx * s) + tp.matvec(adv_y, vy * s)
        du = tp.matvec(disp_mat, s) * d_disp + d_disp * disp_off - adv
        return du * mask

    return build


def _setup_solve(problem, bindings, tape):
    leaves, pre_vars, _ = leaf_values_from_bindings(problem, bindings, tape)
    k_nodes = leaves["K.nodes"]
    k_var = pre_vars.get("K.nodes")
    vx, vy, head = flow_setup(problem, k_nodes, tape=tape, k_var=k_var)
    if isinstance(vx, tp.Var):
        leaves["aux.vx"], leaves["aux.vy"] = vx.value, vy.value
        pre_vars["aux.vx"], pre_vars["aux.vy"] = vx, vy
        pre_vars.pop("K.nodes", None)  # K feeds the rhs only through v
        head_val = head.value
    else:
        leaves["aux.vx"], leaves["aux.vy"] = vx, vy
        head_val = head
    leaves.pop("K.nodes", None)

    # advective CFL hint against the output cadence (accuracy is handled by
    # the adaptive integrator; this flags surprising velocity magnitudes)
    hmin = min(problem.grid.spacings(a).min() for a in range(2))
    vmax = max(np.abs(leaves["aux.vx"]).max(), np.abs(leaves["aux.vy"]).max())
    dt_out = float(np.min(np.diff(problem.output_times)))
    if vmax * dt_out / hmin > 50.0:
        warnings.warn(
            f"advective CFL number {vmax * dt_out / hmin:.1f} is large; "
            "expect many substeps", stacklevel=2
        )

    rhs = TapedRhs(_make_build(problem), leaves, problem.n_state)
    return SolveSetup(rhs=rhs, pre_vars=pre_vars, context={"head": head_val,
                                                           "vx": leaves["aux.vx"],
                                                           "vy": leaves["aux.vy"]})


def build_flow(counts=None, t_end=None, output_dt=None, inflow="flux", transport_bc="inflow",
               constants_override=None):
    """Porous-flow preset: 1 x 0.5 m rectangle, 22 x 22 nodes, 16 min
    horizon sampled every minute. inflow='flux' drives a fixed total flux
    through the left face (K scale-free); inflow='head' fixes both heads.
    transport_bc='closed' replaces the prescribed inflow concentration by
    zero-flux faces everywhere (conservation studies)."""
    data = _load()
    constants = {k: v["value"] for k, v in data["constants"].items()}
    constants.update(constants_override or {})
    geo = data["geometry"]
    counts = list(counts or geo["default_counts"])
    lx, ly = geo["domain_m"]
    grid = build_grid(extents=[(0.0, lx), (0.0, ly)], counts=counts)
    n = grid.n_total
    t_end = geo["t_end_min"] if t_end is None else float(t_end)
    dt = geo["output_dt_min"] if output_dt is None else float(output_dt)
    output_times = np.linspace(0.0, t_end, int(round(t_end / dt)) + 1)

    # steady-head operator: flux inflow (or fixed head), fixed outflow head;
    # the outflow Dirichlet nodes are pinned and re-identified when assembling
    q_in = -constants["phi"] * constants["v_in"]  # K dh/dx at the inflow
    if inflow == "flux":
        low_bc = BoundaryCondition("flux", 0, "low", beta=q_in)
    else:
        low_bc = BoundaryCondition("dirichlet", 0, "low", beta=1.0)
    head_bcs = [
        low_bc,
        BoundaryCondition("dirichlet", 0, "high", beta=constants["h_out"]),
        BoundaryCondition("neumann", 1, "low"),
        BoundaryCondition("neumann", 1, "high"),
    ]
    head_divgrad = DivGradOperator(grid, head_bcs)
    pin_idx = grid.face_node_indices(0, "high")
    pin_val = np.full(pin_idx.size, constants["h_out"])
    if inflow == "head":
        low = grid.face_node_indices(0, "low")
        pin_idx = np.concatenate([low, pin_idx])
        pin_val = np.concatenate([np.full(low.size, low_bc.beta), pin_val])

    # transport operators: dispersion with pinned inflow concentration and
    # zero diffusive flux elsewhere; advection by nodal first differences
    if transport_bc == "inflow":
        disp_bcs = [
            BoundaryCondition("dirichlet", 0, "low", beta=constants["u_in"]),
            BoundaryCondition("neumann", 0, "high"),
            BoundaryCondition("neumann", 1, "low"),
            BoundaryCondition("neumann", 1, "high"),
        ]
    else:
        disp_bcs = [BoundaryCondition("neumann", a, side) for a in (0, 1)
                    for side in ("low", "high")]
    disp = DivGradOperator(grid, disp_bcs)
    disp_mat, disp_off = disp.materialize(np.ones(n))
    mask = np.ones(n)
    ic = np.zeros(n)
    if transport_bc == "inflow":
        inflow_nodes = grid.face_node_indices(0, "low")
        mask[inflow_nodes] = 0.0
        ic[inflow_nodes] = constants["u_in"]

    slots = [
        UnknownSlot(
            "K", "space", data["references"]["K_base"]["value"], (0.1, 10.0),
            network_preset="flow", positive=True, bypass_scalar=True,
            units="scale-free",
        )
    ]
    return Problem(
        pid="flow",
        grid=grid,
        state_names=("u",),
        observable="u",
        constants=constants,
        unknown_slots=slots,
        ic=ic,
        output_times=output_times,
        setup_solve=_setup_solve,
        meta={
            "head_divgrad": head_divgrad,
            "head_pin_idx": pin_idx,
            "head_pin_val": pin_val,
            "grad_x": tp.LinOp(gradient_matrix(grid, 0)),
            "grad_y": tp.LinOp(gradient_matrix(grid, 1)),
            "disp_op": tp.LinOp(disp_mat),
            "disp_off": disp_off,
            "interior_mask": mask,
            "units": {"space": "m", "time": "min"},
            "extrapolation_t": geo["extrapolation_t_min"],
        },
    )
