"""Battery thermal runaway: anisotropic heat conduction coupled to a
single-step Arrhenius decomposition of the reacting material.

    rho C_p(T) dT/dt = div(k(T) grad T) + Q_exo
    Q_exo = H W (-dc/dt)
    dc/dt = -A_e exp(-E / (R_c T)) c

Temperature-dependent heat capacity and directional conductivities are
unknown state-dependent fields; the pre-exponential factor A_e is an
unknown scalar. Surfaces exchange heat with a hot ambient through a film
coefficient (the overheating scenario), so runs start at room temperature
and cook toward runaway. Only surface temperatures are observable.

Prismatic cells use a 3D box with in-plane conductivity on the two long
axes and cross-plane conductivity through the thin axis; cylindrical
cells use an axisymmetric r-z grid with radial and longitudinal
conductivities (volumes and face areas carry the 2*pi*r metric).
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .. import tape as tp
from ..errors import StateError
from ..grid import DivGradOperator, build_grid, zero_flux_bcs
from .base import Problem, SolveSetup, TapedRhs, UnknownSlot, leaf_values_from_bindings


def _load():
    with resources.files("pdefit.problems.data").joinpath("battery_constants.json").open() as f:
        return json.load(f)


def _state_field_values(plain, leaves, slot_name, x):
    return plain[slot_name].values(x, leaves=leaves if leaves is not None else None, slot=slot_name)


def _make_build(problem, plain):
    n = problem.grid.n_total
    c = problem.constants
    e_over_r = c["E"] / c["R_c"]
    hw = c["H"] * c["W"]
    conv = problem.meta["conv_coef"]  # h_conv * area / volume, per node
    t_amb = c["T_amb"]
    rho = c["rho"]
    ops = problem.meta["cond_ops"]  # axis -> DivGradOperator
    k_axes = problem.meta["k_axes"]  # slot name -> list of axes

    def build(t, s, leaves):
        T, cc = s[:n], s[n:]
        if not isinstance(s, tp.Var):
            if np.any(T <= 0.0):
                raise StateError("absolute temperature must stay positive")
            if np.min(cc) < -1e-3 * c["c0"]:
                raise StateError("reactant concentration became negative")
        taped = isinstance(s, tp.Var)
        lv = leaves if taped else None
        ae = leaves["A_e.nodes"] if taped else plain["A_e"]
        rate = ae * tp.exp(-e_over_r / T) * cc
        cp = _state_field_values(plain, lv, "Cp", T)
        heat = None
        for slot_name, axes in k_axes.items():
            k_vals = _state_field_values(plain, lv, slot_name, T)
            for ax in axes:
                term = ops[ax].apply(k_vals, T)
                heat = term if heat is None else heat + term
        dT = (heat + conv * (t_amb - T) + hw * rate) / (rho * cp)
        return tp.concatenate([dT, -rate])

    return build


def _setup_solve(problem, bindings, tape):
    leaves, pre_vars, plain = leaf_values_from_bindings(problem, bindings, tape)
    build = _make_build(problem, plain)
    rhs = TapedRhs(build, leaves, problem.n_state)
    return SolveSetup(rhs=rhs, pre_vars=pre_vars)


def _slots(refs):
    return [
        UnknownSlot("A_e", "scalar", refs["A_e"]["value"], (1e24, 1e27), units="1/s"),
        UnknownSlot(
            "Cp", "state", refs["C_p"]["value"], (500.0, 5000.0),
            network_preset="battery", state_var="T", positive=True, units="J/(kg K)",
        ),
        UnknownSlot(
            "k_xy", "state", refs["k_inplane"]["value"], (1.0, 100.0),
            network_preset="battery", state_var="T", positive=True, units="W/(m K)",
        ),
        UnknownSlot(
            "k_z", "state", refs["k_crossplane"]["value"], (0.05, 5.0),
            network_preset="battery", state_var="T", positive=True, units="W/(m K)",
        ),
    ]


def _output_times(geo, t_end, output_dt):
    t_end = geo["train_window_s"] if t_end is None else float(t_end)
    dt = geo["output_dt_s"] if output_dt is None else float(output_dt)
    n_out = int(round(t_end / dt))
    return np.linspace(0.0, t_end, n_out + 1)


def build_battery(counts=None, t_end=None, output_dt=None, constants_override=None):
    """Prismatic battery preset: 100 x 180 x 32 mm box, 8 nodes per axis,
    100 min training window sampled every 200 s."""
    data = _load()
    constants = {k: v["value"] for k, v in data["constants"].items()}
    constants.update(constants_override or {})
    geo = data["geometry"]
    counts = list(counts or geo["prismatic_counts"])
    lx, ly, lz = geo["prismatic_m"]
    grid = build_grid(extents=[(0, lx), (0, ly), (0, lz)], counts=counts)
    n = grid.n_total

    bcs = zero_flux_bcs(grid)
    cond_ops = {ax: DivGradOperator(grid, bcs, axes=[ax]) for ax in range(3)}
    vol = grid.node_volumes()
    conv_coef = np.zeros(n)
    for ax in range(3):
        w_b = grid.cell_widths(ax)
        for side, wb in (("low", w_b[0]), ("high", w_b[-1])):
            idx = grid.face_node_indices(ax, side)
            conv_coef[idx] += constants["h_conv"] * (vol[idx] / wb) / vol[idx]

    ic = np.concatenate([np.full(n, constants["T_init"]), np.full(n, constants["c0"])])
    return Problem(
        pid="battery",
        grid=grid,
        state_names=("T", "c"),
        observable="T",
        constants=constants,
        unknown_slots=_slots(data["references"]),
        ic=ic,
        output_times=_output_times(geo, t_end, output_dt),
        setup_solve=_setup_solve,
        admissible_obs=grid.boundary_node_indices(),
        meta={
            "cond_ops": cond_ops,
            "conv_coef": conv_coef,
            "k_axes": {"k_xy": [0, 1], "k_z": [2]},
            "units": {"space": "m", "time": "s", "T": "K"},
            "full_horizon_s": geo["full_horizon_s"],
            "geometry": "prismatic",
        },
    )


def build_battery_cylinder(counts=None, t_end=None, output_dt=None, constants_override=None):
    """Cylindrical battery preset on an axisymmetric r-z grid; radial and
    longitudinal conductivities replace the in-plane/cross-plane pair."""
    data = _load()
    constants = {k: v["value"] for k, v in data["constants"].items()}
    constants.update(constants_override or {})
    geo = data["geometry"]
    counts = list(counts or geo["cylinder_counts"])
    radius, height = geo["cylinder_radius_m"], geo["cylinder_height_m"]
    grid = build_grid(extents=[(0.0, radius), (0.0, height)], counts=counts)
    nr, nz = grid.dims
    r = grid.axis_coords[0]
    wz = grid.cell_widths(1)

    # radial cell edges and the integral of r dr over each cell
    edges = np.concatenate([[0.0], (r[:-1] + r[1:]) / 2.0, [radius]])
    vol_r = (edges[1:] ** 2 - edges[:-1] ** 2) / 2.0
    idx_r = grid.axis_index_grid(0)
    idx_z = grid.axis_index_grid(1)
    volumes = vol_r[idx_r] * wz[idx_z]

    # face areas: radial faces sit at the cell edges (r * dz); axial faces
    # carry the cell's radial integral
    left_r = np.nonzero(idx_r < nr - 1)[0]
    fw_r = edges[idx_r[left_r] + 1] * wz[idx_z[left_r]]
    left_z = np.nonzero(idx_z < nz - 1)[0]
    fw_z = vol_r[idx_r[left_z]]

    bcs = zero_flux_bcs(grid)
    cond_ops = {
        0: DivGradOperator(grid, bcs, face_weights={0: fw_r}, node_volumes=volumes, axes=[0]),
        1: DivGradOperator(grid, bcs, face_weights={1: fw_z}, node_volumes=volumes, axes=[1]),
    }

    conv_coef = np.zeros(grid.n_total)
    outer = grid.face_node_indices(0, "high")  # side wall at r = radius
    conv_coef[outer] += constants["h_conv"] * (radius * wz[idx_z[outer]]) / volumes[outer]
    for side in ("low", "high"):  # end caps
        idx = grid.face_node_indices(1, side)
        conv_coef[idx] += constants["h_conv"] * vol_r[idx_r[idx]] / volumes[idx]

    refs = dict(data["references"])
    slots = [
        UnknownSlot("A_e", "scalar", refs["A_e"]["value"], (1e24, 1e27), units="1/s"),
        UnknownSlot(
            "Cp", "state", refs["C_p"]["value"], (500.0, 5000.0),
            network_preset="battery", state_var="T", positive=True, units="J/(kg K)",
        ),
        UnknownSlot(
            "k_r", "state", refs["k_crossplane"]["value"], (0.05, 5.0),
            network_preset="battery", state_var="T", positive=True, units="W/(m K)",
        ),
        UnknownSlot(
            "k_zc", "state", refs["k_inplane"]["value"], (1.0, 100.0),
            network_preset="battery", state_var="T", positive=True, units="W/(m K)",
        ),
    ]
    n = grid.n_total
    ic = np.concatenate([np.full(n, constants["T_init"]), np.full(n, constants["c0"])])
    return Problem(
        pid="battery-cyl",
        grid=grid,
        state_names=("T", "c"),
        observable="T",
        constants=constants,
        unknown_slots=slots,
        ic=ic,
        output_times=_output_times(geo, t_end, output_dt),
        setup_solve=_setup_solve,
        admissible_obs=grid.boundary_node_indices(),
        meta={
            "cond_ops": cond_ops,
            "conv_coef": conv_coef,
            "k_axes": {"k_r": [0], "k_zc": [1]},
            "units": {"space": "m", "time": "s", "T": "K"},
            "full_horizon_s": geo["full_horizon_s"],
            "geometry": "cylindrical",
        },
    )


def arrhenius_rate(constants, a_e, temperature):
    """Reaction rate per unit concentration at a given temperature."""
    return a_e * np.exp(-constants["E"] / (constants["R_c"] * np.asarray(temperature)))
