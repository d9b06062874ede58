"""Exact gradients of the observation misfit through the recorded solver.

The loss is the batch mean absolute error between predicted and observed
responses. Gradients with respect to unknown scalars and network weights
are computed by a discrete adjoint: the accepted Runge-Kutta steps of the
forward solve are replayed in reverse, propagating the costate through
each stage with vector-Jacobian products of the right-hand side,

    v_i = h b_i lam + h sum_{m>i} a_mi g_m,      g_i = (df/du_i)^T v_i,
    lam <- lam + sum_i g_i,

and accumulating (df/d leaf)^T v_i for every parameter leaf. Per-node
field gradients are then chained through the networks on a pre-solve tape
(space-dependent fields, Darcy velocities); state-dependent field
networks accumulate their weight gradients directly inside the stage
sweeps. This reverse pass differentiates the computed discrete trajectory
exactly, so central finite differences of the same fixed-step algorithm
must agree to truncation error.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import tape as tp
from .errors import ConfigError, NumericError
from .fieldnet import ParamField
from .integrate import TABLEAUS, IntegratorConfig, integrate_rk


def loss_mae(predicted, observed):
    """Batch mean absolute error, in the observed state's units."""
    predicted = np.asarray(predicted, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if predicted.shape != observed.shape:
        raise ConfigError("predicted and observed lengths differ")
    if predicted.size == 0:
        raise ConfigError("empty observation batch")
    if not np.all(np.isfinite(observed)):
        raise NumericError("observed values contain non-finite entries")
    return float(np.mean(np.abs(predicted - observed)))


def _active_stages(a, b):
    """Stages whose derivative influences the propagated solution."""
    s = len(b)
    active = [b[i] != 0.0 for i in range(s)]
    for i in range(s - 1, -1, -1):
        if active[i]:
            continue
        active[i] = any(len(a[m]) > i and a[m][i] != 0.0 and active[m] for m in range(i + 1, s))
    return [i for i in range(s) if active[i]]


def adjoint_sweep(rhs_ops, recorded, out_grads):
    """Reverse the recorded solve, seeding dL/d(output k) from out_grads.

    Returns dL/d(initial state); leaf gradients accumulate inside rhs_ops.
    """
    c, a, b, _ = TABLEAUS[recorded.method]
    nstage = len(c)
    active = _active_stages(a, b)
    n_steps = recorded.step_t.size
    by_step = {}
    for k, g in out_grads.items():
        by_step.setdefault(int(recorded.out_step[k]), []).append(g)

    lam = np.zeros_like(recorded.step_state[0]) if n_steps else None
    if lam is None:
        lam = np.zeros(next(iter(out_grads.values())).size) if out_grads else None
    for m in range(n_steps - 1, -1, -1):
        for g in by_step.get(m, ()):
            lam = lam + g
        if not np.any(lam):
            continue
        t, h, y = recorded.step_t[m], recorded.step_h[m], recorded.step_state[m]
        k = [None] * nstage
        u = [None] * nstage
        u[0] = y
        k[0] = rhs_ops.eval(t, y)
        for i in range(1, nstage):
            if i > max(active):
                break
            u[i] = y + h * sum(a[i][j] * k[j] for j in range(i) if a[i][j] != 0.0)
            k[i] = rhs_ops.eval(t + c[i] * h, u[i])
        g_stage = {}
        for i in reversed(active):
            v = h * b[i] * lam
            for m2 in range(i + 1, nstage):
                if m2 in g_stage and len(a[m2]) > i and a[m2][i] != 0.0:
                    v = v + (h * a[m2][i]) * g_stage[m2]
            g_stage[i] = rhs_ops.vjp(t + c[i] * h, u[i], v)
        for i in active:
            lam = lam + g_stage[i]
    for g in by_step.get(-1, ()):  # outputs at the initial time
        lam = lam + g
    return lam


@dataclass
class GradientResult:
    """Loss and its gradients for one batch, shapes matching the slots."""

    loss: float
    scalar_grads: dict = dc_field(default_factory=dict)  # slot -> dL/d base scalar
    weight_grads: dict = dc_field(default_factory=dict)  # slot -> list of arrays
    diagnostics: dict = dc_field(default_factory=dict)

    def validate_finite(self):
        vals = list(self.scalar_grads.values()) + [
            g for arrs in self.weight_grads.values() for g in arrs
        ]
        if not all(np.all(np.isfinite(v)) for v in vals) or not np.isfinite(self.loss):
            raise NumericError("gradient result contains non-finite entries")
        return self


def _make_bindings(problem, fields, tape):
    """Trainable Vars + slot bindings from a parameter set.

    fields: slot name -> float (scalar slots) or ParamField. Returns
    (bindings, trainable var registry).
    """
    from .problems.base import NetStateBinding

    bindings, trainables = {}, {}
    pos = problem.grid.node_positions()
    for slot in problem.unknown_slots:
        f = fields[slot.name]
        if slot.input_kind == "scalar":
            base = float(f.base_scalar) if isinstance(f, ParamField) else float(f)
            if tape is None:
                bindings[slot.name] = base
            else:
                v = tape.leaf(base)
                bindings[slot.name] = v
                trainables[slot.name] = {"base": v, "arrays": []}
        elif slot.input_kind == "space":
            if tape is None:
                bindings[slot.name] = f.eval(pos)
            else:
                arrays = [tape.leaf(a) for a in f.weights.arrays]
                base = None if f.bypass_scalar else tape.leaf(float(f.base_scalar))
                bindings[slot.name] = f.eval(pos, arrays=arrays, base=base)
                trainables[slot.name] = {"base": base, "arrays": arrays}
        else:  # state kind: gradients accumulate in the stage sweeps
            bindings[slot.name] = NetStateBinding(f)
            trainables[slot.name] = {"base": None, "arrays": None}
    return bindings, trainables


def _batch_t_eval(problem, times):
    t0 = problem.t_span[0]
    uniq = np.unique(np.asarray(times, dtype=float))
    if uniq.size and uniq[0] < t0 - 1e-12:
        raise ConfigError("batch contains times before the initial time")
    return np.concatenate([[t0], uniq[uniq > t0 + 1e-12]]), uniq


def batch_loss(problem, fields, nodes, times, values, cfg=None):
    """Forward-only batch MAE (used by finite differences and line search)."""
    bindings, _ = _make_bindings(problem, fields, None)
    setup = problem.setup_solve(bindings)
    t_eval, _ = _batch_t_eval(problem, times)
    traj = integrate_rk(setup.rhs.eval, problem.ic, t_eval, cfg or IntegratorConfig())
    pred, _ = _predict(problem, traj, nodes, times)
    return loss_mae(pred, values)


def _predict(problem, traj, nodes, times):
    sidx = problem.observation_state_indices(nodes)
    tpos = np.searchsorted(traj.times, np.asarray(times, dtype=float))
    tpos = np.clip(tpos, 0, traj.times.size - 1)
    left = np.clip(tpos - 1, 0, traj.times.size - 1)
    use_left = np.abs(traj.times[left] - times) < np.abs(traj.times[tpos] - times)
    tpos = np.where(use_left, left, tpos)
    return traj.states[tpos, sidx], tpos


def loss_and_gradients(problem, fields, nodes, times, values, cfg=None):
    """Batch MAE and its exact gradients w.r.t. every unknown slot.

    Returns a GradientResult with dL/d(base scalar) per slot (Eq. of the
    two-stage chain: the per-node field gradient summed through the
    multiplicative model) and per-array network weight gradients.
    """
    cfg = cfg or IntegratorConfig()
    nodes = np.asarray(nodes, dtype=int)
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if nodes.size == 0:
        raise ConfigError("empty observation batch")
    problem.validate_observation_request(problem.observable, nodes, times)

    pre_tape = tp.Tape()
    bindings, trainables = _make_bindings(problem, fields, pre_tape)
    setup = problem.setup_solve(bindings, tape=pre_tape)
    t_eval, _ = _batch_t_eval(problem, times)
    rec = integrate_rk(setup.rhs.eval, problem.ic, t_eval, cfg, record=True)

    pred, tpos = _predict(problem, rec.trajectory, nodes, times)
    loss = loss_mae(pred, values)
    dL_dpred = np.sign(pred - values) / nodes.size  # MAE subgradient, 0 at kinks

    sidx = problem.observation_state_indices(nodes)
    out_grads = {}
    for k in np.unique(tpos):
        g = np.zeros(problem.n_state)
        sel = tpos == k
        np.add.at(g, sidx[sel], dL_dpred[sel])
        out_grads[int(k)] = g

    adjoint_sweep(setup.rhs, rec, out_grads)

    acc = setup.rhs.leaf_grads()
    seeds = {setup.pre_vars[key]: g for key, g in acc.items() if key in setup.pre_vars}
    if seeds:
        pre_tape.backward(seeds)

    result = GradientResult(loss=loss, diagnostics=dict(rec.trajectory.stats))
    for slot in problem.unknown_slots:
        name = slot.name
        f = fields[name]
        if slot.input_kind == "state":
            arrs = f.weights.arrays
            result.weight_grads[name] = [
                np.asarray(acc.get(f"{name}.arr{i}", np.zeros_like(a)))
                for i, a in enumerate(arrs)
            ]
            if not f.bypass_scalar:
                result.scalar_grads[name] = float(np.sum(acc.get(f"{name}.base", 0.0)))
        else:
            reg = trainables[name]
            if reg.get("base") is not None:
                g = reg["base"].grad
                result.scalar_grads[name] = float(g) if g is not None else 0.0
            if reg.get("arrays"):
                result.weight_grads[name] = [
                    v.grad if v.grad is not None else np.zeros_like(v.value)
                    for v in reg["arrays"]
                ]
    return result.validate_finite()


def grad_scalars(problem, fields, nodes, times, values, cfg=None):
    """Stage-1 gradient: d(batch MAE)/d(base scalars) with networks frozen."""
    res = loss_and_gradients(problem, fields, nodes, times, values, cfg)
    return GradientResult(res.loss, dict(res.scalar_grads), {}, res.diagnostics)


def grad_weights(problem, fields, nodes, times, values, cfg=None):
    """Stage-2 gradient: d(batch MAE)/d(network weights) with scalars frozen."""
    res = loss_and_gradients(problem, fields, nodes, times, values, cfg)
    return GradientResult(res.loss, {}, dict(res.weight_grads), res.diagnostics)


def finite_diff_check(
    problem,
    fields,
    nodes,
    times,
    values,
    cfg=None,
    eps_scalar=1e-6,
    eps_weight=1e-5,
    max_weight_probes=50,
    seed=0,
    check_convergence=False,
):
    """Central-difference probe of the adjoint gradients.

    Scalars are probed multiplicatively (eps_scalar relative); a random
    subset of network weight coordinates is probed additively. Reports the
    worst relative deviation with denominator max(|fd|, |adjoint|, 1e-12),
    taken over the probes whose gradient magnitude exceeds the central
    difference's own roundoff resolution (~eps_machine |loss| / 2 delta);
    smaller gradients cannot be verified by this instrument and are
    reported with below_resolution set instead. Use a fixed-step
    IntegratorConfig: adaptive step-acceptance decisions are not
    differentiable and pollute the finite differences.
    """
    cfg = cfg or IntegratorConfig(method="rk4", fixed_step=0.05)
    if cfg.fixed_step is None:
        raise ConfigError("finite-difference checks require a fixed-step config")
    res = loss_and_gradients(problem, fields, nodes, times, values, cfg)
    rng = np.random.default_rng(seed)
    rows = []
    eps_mach = np.finfo(float).eps

    def fd_probe(make_fields, delta):
        lp = batch_loss(problem, make_fields(+delta), nodes, times, values, cfg)
        lm = batch_loss(problem, make_fields(-delta), nodes, times, values, cfg)
        # absolute resolution of the central difference: cancellation of two
        # nearly equal losses leaves roundoff of order eps * |loss|
        resolution = 30.0 * eps_mach * max(abs(lp), abs(lm)) / (2.0 * delta)
        return (lp - lm) / (2.0 * delta), resolution

    def add_row(label, g_ad, fd_fn, delta):
        g_fd, resolution = fd_fn(delta)
        dev = abs(g_fd - g_ad)
        rel = dev / max(abs(g_fd), abs(g_ad), 1e-12)
        below = max(abs(g_fd), abs(g_ad)) < resolution
        row = dict(
            coord=label, adjoint=g_ad, fd=g_fd, rel_err=rel,
            resolution=resolution, below_resolution=below,
        )
        if check_convergence:
            # a probe is non-converged when halving epsilon moves the FD
            # estimate by a sizeable share of its deviation from the adjoint,
            # i.e. the disagreement is truncation error, not a gradient bug
            g_fd2, _ = fd_fn(delta / 2.0)
            row["non_converged"] = rel > 1e-5 and abs(g_fd2 - g_fd) > 0.25 * dev
        rows.append(row)

    for slot in problem.unknown_slots:
        name = slot.name
        f = fields[name]
        if name not in res.scalar_grads:
            continue
        base = float(f.base_scalar) if isinstance(f, ParamField) else float(f)
        delta = eps_scalar * max(abs(base), 1e-12)

        def make(d, name=name, f=f, base=base):
            out = dict(fields)
            if isinstance(f, ParamField):
                g = ParamField(f.name, base + d, f.weights, f.input_kind, f.scaler,
                               f.bypass_scalar, f.state_var, f.scalar_bounds)
                out[name] = g
            else:
                out[name] = base + d
            return out

        add_row(f"{name}.base", res.scalar_grads[name], lambda dd, mk=make: fd_probe(mk, dd), delta)

    for name, arrs in res.weight_grads.items():
        f = fields[name]
        if not isinstance(f, ParamField):
            continue
        total = sum(a.size for a in arrs)
        n_probe = min(max_weight_probes, total)
        coords = rng.choice(total, size=n_probe, replace=False)
        flat_ad = np.concatenate([a.ravel() for a in arrs])
        for ci in np.sort(coords):

            def make(d, name=name, f=f, ci=ci):
                out = dict(fields)
                w = f.weights.copy()
                flat = w.pack()
                flat[ci] += d
                g = ParamField(f.name, f.base_scalar, w.unpack_from(flat), f.input_kind,
                               f.scaler, f.bypass_scalar, f.state_var, f.scalar_bounds)
                out[name] = g
                return out

            add_row(f"{name}.w[{ci}]", float(flat_ad[ci]),
                    lambda dd, mk=make: fd_probe(mk, dd), eps_weight)

    resolvable = [r for r in rows if not r["below_resolution"]]
    worst = max((r["rel_err"] for r in resolvable), default=0.0)
    return {
        "loss": res.loss,
        "worst_rel_err": worst,
        "n_probes": len(rows),
        "n_resolvable": len(resolvable),
        "rows": rows,
        "flagged": [r["coord"] for r in rows if r.get("non_converged")],
    }


def write_gradcheck_report(path, report):
    """Structured text report: one line per probed coordinate."""
    lines = [
        f"# gradient check: worst_rel_err={report['worst_rel_err']:.3e} "
        f"over {report['n_resolvable']}/{report['n_probes']} resolvable probes, "
        f"loss={report['loss']:.6e}",
        "coord\tadjoint\tfd\trel_err\tbelow_resolution\tnon_converged",
    ]
    for r in report["rows"]:
        lines.append(
            f"{r['coord']}\t{r['adjoint']:.12e}\t{r['fd']:.12e}\t"
            f"{r['rel_err']:.3e}\t{int(r['below_resolution'])}\t"
            f"{int(r.get('non_converged', False))}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
