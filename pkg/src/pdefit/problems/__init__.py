"""Physics problem presets and the shared problem plumbing."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ObservationError
from ..integrate import IntegratorConfig, integrate_rk
from .base import (
    NetStateBinding,
    Problem,
    RefStateField,
    SolveSetup,
    TapedRhs,
    UnknownSlot,
)
from .battery import build_battery, build_battery_cylinder
from .cardiac import build_cardiac
from .cell import build_cell
from .decay import build_decay
from .flow import build_flow, flow_setup

PROBLEM_BUILDERS = {
    "cardiac": build_cardiac,
    "battery": build_battery,
    "battery-cyl": build_battery_cylinder,
    "flow": build_flow,
    "cell": build_cell,
    "decay": build_decay,
}


def get_problem(pid, **overrides):
    """Problem preset by name, with builder-specific overrides."""
    try:
        builder = PROBLEM_BUILDERS[pid]
    except KeyError:
        raise ConfigError(
            f"unknown problem preset {pid!r}; available: {sorted(PROBLEM_BUILDERS)}"
        ) from None
    return builder(**overrides)


def forward_solve(problem, bindings, cfg=None, t_eval=None):
    """Integrate a problem with bound parameter values (no gradients)."""
    setup = problem.setup_solve(bindings)
    t_eval = problem.output_times if t_eval is None else np.asarray(t_eval, dtype=float)
    return integrate_rk(setup.rhs.eval, problem.ic, t_eval, cfg or IntegratorConfig())


def observe(trajectory, problem, node_indices, times, var=None):
    """Predicted values of the observable at (node, time) pairs.

    Nodes must be grid nodes and times must match trajectory outputs
    exactly (no interpolation); inadmissible requests raise
    ObservationError.
    """
    var = var or problem.observable
    node_indices = np.asarray(node_indices, dtype=int)
    times = np.asarray(times, dtype=float)
    if node_indices.shape != times.shape:
        raise ObservationError("node and time arrays must have matching shapes")
    problem.validate_observation_request(var, node_indices, times)
    tidx = np.searchsorted(trajectory.times, times)
    tidx = np.clip(tidx, 0, trajectory.times.size - 1)
    left = np.clip(tidx - 1, 0, trajectory.times.size - 1)
    use_left = np.abs(trajectory.times[left] - times) < np.abs(trajectory.times[tidx] - times)
    tidx = np.where(use_left, left, tidx)
    if np.any(np.abs(trajectory.times[tidx] - times) > 1e-9 * np.maximum(1.0, np.abs(times))):
        bad = times[np.abs(trajectory.times[tidx] - times) > 1e-9]
        raise ObservationError(f"times {bad[:5].tolist()} are not trajectory output times")
    state_idx = problem.observation_state_indices(node_indices)
    return trajectory.states[tidx, state_idx]


__all__ = [
    "NetStateBinding",
    "Problem",
    "PROBLEM_BUILDERS",
    "RefStateField",
    "SolveSetup",
    "TapedRhs",
    "UnknownSlot",
    "build_battery",
    "build_battery_cylinder",
    "build_cardiac",
    "build_cell",
    "build_decay",
    "build_flow",
    "flow_setup",
    "forward_solve",
    "get_problem",
    "observe",
]
