"""Shared problem infrastructure: state layout, unknown-parameter slots,
bindings that fill slots during a solve, and the right-hand-side adapters
the adjoint engine consumes.

A right-hand side is exposed as an object with

    eval(t, s) -> ds/dt                      (plain numpy, fast path)
    vjp(t, s, w) -> w^T d(rhs)/d(state)      (adjoint stage sweep)

vjp additionally accumulates w^T d(rhs)/d(leaf) for every named leaf that
parameterizes the solve: per-node field values and auxiliary solve
constants (keys "<slot>.nodes", "aux.*"), or the raw network arrays of
state-dependent fields (keys "<slot>.base", "<slot>.arr<i>"), which are
re-evaluated at the current state inside every stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .. import tape as tp
from ..errors import ConfigError, ObservationError, ShapeError


@dataclass(frozen=True)
class UnknownSlot:
    """Declaration of one unknown parameter of a problem."""

    name: str
    input_kind: str  # 'scalar' | 'space' | 'state'
    reference: float  # reference magnitude (twin truth scale)
    scalar_bounds: tuple  # log-uniform stage-1 init range
    network_preset: str | None = None
    state_var: str | None = None  # driving state variable for 'state' kind
    positive: bool = False
    bypass_scalar: bool = False
    units: str = ""

    def __post_init__(self):
        if self.input_kind not in ("scalar", "space", "state"):
            raise ConfigError(f"unknown input kind {self.input_kind!r}")
        if self.input_kind == "state" and self.state_var is None:
            raise ConfigError(f"slot {self.name}: state-dependent fields need state_var")


class RefStateField:
    """Reference truth for a state-dependent parameter: a plain callable of
    the raw state sample values. Simulation only (no gradient path)."""

    def __init__(self, fn):
        self.fn = fn

    def values(self, x, leaves=None, slot=None):
        if isinstance(x, tp.Var):
            raise ConfigError("reference state fields cannot enter gradient recordings")
        return self.fn(np.asarray(x))


class NetStateBinding:
    """Trainable state-dependent parameter backed by a ParamField. Inside a
    gradient recording the weight arrays and base scalar are tape leaves
    named '<slot>.arr<i>' and '<slot>.base'."""

    def __init__(self, field):
        self.field = field

    @staticmethod
    def _column(x):
        return x.reshape((-1, 1)) if isinstance(x, tp.Var) else np.asarray(x, float)[:, None]

    def values(self, x, leaves=None, slot=None):
        f = self.field
        if leaves is None:
            return f.eval(self._column(x))
        arrays = [leaves[f"{slot}.arr{i}"] for i in range(len(f.weights.arrays))]
        base = None if f.bypass_scalar else leaves[f"{slot}.base"]
        return f.eval(self._column(x), arrays=arrays, base=base)

    def leaf_values(self, slot):
        out = {f"{slot}.arr{i}": a for i, a in enumerate(self.field.weights.arrays)}
        if not self.field.bypass_scalar:
            out[f"{slot}.base"] = np.asarray(self.field.base_scalar, dtype=float)
        return out


@dataclass
class SolveSetup:
    """Everything the adjoint engine needs for one parameter setting."""

    rhs: object  # eval/vjp adapter
    pre_vars: dict = dc_field(default_factory=dict)  # leaf key -> pre-tape Var
    context: dict = dc_field(default_factory=dict)  # solve constants (e.g. velocity)


class TapedRhs:
    """Generic rhs adapter: one builder function evaluated either on plain
    arrays (eval) or on a fresh tape per stage (vjp)."""

    def __init__(self, build, leaf_values, n_state):
        self.build = build
        self.leaf_values = dict(leaf_values)
        self.n_state = n_state
        self.acc = {}

    def eval(self, t, s):
        return self.build(t, s, self.leaf_values)

    def vjp(self, t, s, w):
        t_tape = tp.Tape()
        s_var = t_tape.leaf(s)
        leaves = {k: t_tape.leaf(v) for k, v in self.leaf_values.items()}
        ds = self.build(t, s_var, leaves)
        t_tape.backward({ds: w})
        for k, v in leaves.items():
            if v.grad is not None:
                self.acc[k] = self.acc.get(k, 0.0) + v.grad
        return s_var.grad if s_var.grad is not None else np.zeros_like(s)

    def leaf_grads(self):
        return self.acc


class Problem:
    """One physics system: grid, state layout, constants, unknown slots,
    initial condition, horizon and observability."""

    def __init__(
        self,
        pid,
        grid,
        state_names,
        observable,
        constants,
        unknown_slots,
        ic,
        output_times,
        setup_solve,
        admissible_obs=None,
        meta=None,
    ):
        self.id = pid
        self.grid = grid
        self.state_names = tuple(state_names)
        self.observable = observable
        self.constants = dict(constants)
        self.unknown_slots = list(unknown_slots)
        self.ic = np.asarray(ic, dtype=float)
        self.output_times = np.asarray(output_times, dtype=float)
        self._setup_solve = setup_solve
        self.admissible_obs = admissible_obs
        self.meta = meta or {}
        n = grid.n_total
        if self.ic.size != n * len(self.state_names):
            raise ShapeError("initial condition length does not match the state layout")
        self.slices = {
            name: slice(i * n, (i + 1) * n) for i, name in enumerate(self.state_names)
        }

    @property
    def n_state(self):
        return self.ic.size

    @property
    def t_span(self):
        return float(self.output_times[0]), float(self.output_times[-1])

    def slot(self, name):
        for s in self.unknown_slots:
            if s.name == name:
                return s
        raise ConfigError(f"problem {self.id} has no unknown slot {name!r}")

    def setup_solve(self, bindings, tape=None):
        """Bind parameter values to the unknown slots and build the rhs.

        bindings: dict slot name -> float (scalar slots), per-node array or
        tape Var (space slots), or a state-field binding object. With a tape,
        Vars are chained so the adjoint can seed them after the sweep.
        """
        missing = [s.name for s in self.unknown_slots if s.name not in bindings]
        if missing:
            raise ConfigError(f"missing bindings for slots {missing}")
        return self._setup_solve(self, bindings, tape)

    def observation_state_indices(self, node_indices):
        """Map observed nodes of the observable variable into flat state indices."""
        return self.slices[self.observable].start + np.asarray(node_indices, dtype=int)

    def validate_observation_request(self, var, node_indices, times=None):
        if var != self.observable:
            raise ObservationError(
                f"variable {var!r} is not observable in problem {self.id} "
                f"(only {self.observable!r})"
            )
        nodes = np.asarray(node_indices, dtype=int)
        if nodes.size and (nodes.min() < 0 or nodes.max() >= self.grid.n_total):
            raise ObservationError("observation node index out of range")
        if self.admissible_obs is not None:
            ok = np.isin(nodes, self.admissible_obs)
            if not np.all(ok):
                raise ObservationError(
                    f"nodes {nodes[~ok][:5].tolist()} are not admissible measurement "
                    f"sites for problem {self.id} (surface-only constraint)"
                )
        if times is not None:
            t = np.asarray(times, dtype=float)
            t0, t1 = self.t_span
            if t.size and (t.min() < t0 - 1e-9 or t.max() > t1 + 1e-9):
                raise ObservationError("observation times outside the problem horizon")


def leaf_values_from_bindings(problem, bindings, tape):
    """Normalize bindings into (leaf value dict, pre-tape Var dict, plain dict).

    Scalar and space slots become named leaves; state slots contribute their
    network arrays. Tape Vars in bindings register as pre-tape seeds.
    """
    leaves, pre_vars, plain = {}, {}, {}
    for slot in problem.unknown_slots:
        b = bindings[slot.name]
        if slot.input_kind in ("scalar", "space"):
            key = f"{slot.name}.nodes"
            if isinstance(b, tp.Var):
                if tape is None:
                    raise ConfigError("tape Vars in bindings require a tape")
                leaves[key] = b.value
                pre_vars[key] = b
            else:
                arr = np.asarray(b, dtype=float)
                if slot.input_kind == "space" and arr.shape != (problem.grid.n_total,):
                    raise ShapeError(f"slot {slot.name}: expected one value per node")
                leaves[key] = arr
            plain[slot.name] = leaves[key]
        else:  # state kind
            if isinstance(b, RefStateField):
                plain[slot.name] = b
            elif isinstance(b, NetStateBinding):
                leaves.update(b.leaf_values(slot.name))
                plain[slot.name] = b
            else:
                raise ConfigError(
                    f"slot {slot.name}: state-dependent slots need a state-field binding"
                )
    return leaves, pre_vars, plain
