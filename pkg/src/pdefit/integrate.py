"""Explicit Runge-Kutta time integration and sparse linear solves.

Two methods are provided:

* ``dopri5`` - the Dormand-Prince 5(4) embedded pair, adaptive by default,
  with the standard quartic dense-output interpolant for sampling between
  accepted steps.
* ``rk4`` - classical fixed-step RK4 (no error estimate), used where a
  parameter-independent step sequence matters (gradient checks).

In fixed-step mode the span between consecutive output times is divided
into equal substeps no longer than the requested step, so outputs are hit
exactly and no interpolation enters the computed trajectory.

Recorded solves (``record=True``) additionally return the accepted step
sequence with steps clipped to land exactly on output times; the adjoint
sweep in :mod:`pdefit.gradients` replays that sequence in reverse.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, NumericError, ShapeError, SolveError, StiffnessError

# Dormand-Prince 5(4) tableau
DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# error weights (5th order minus embedded 4th order)
DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# dense-output polynomial: b_i(s) = sum_m P[i, m] s^(m+1)
DP_P = np.array(
    [
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

RK4_C = np.array([0.0, 0.5, 0.5, 1.0])
RK4_A = [np.array([]), np.array([0.5]), np.array([0.0, 0.5]), np.array([0.0, 0.0, 1.0])]
RK4_B = np.array([1 / 6, 1 / 3, 1 / 3, 1 / 6])

TABLEAUS = {"dopri5": (DP_C, DP_A, DP_B, DP_E), "rk4": (RK4_C, RK4_A, RK4_B, None)}


@dataclass
class IntegratorConfig:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8
    max_steps: int = 1_000_000
    initial_step: float | None = None
    method: str = "dopri5"
    fixed_step: float | None = None  # enables fixed-step mode

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ConfigError("tolerances must be positive")
        if self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")
        if self.method not in TABLEAUS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method == "rk4" and self.fixed_step is None:
            raise ConfigError("rk4 has no error estimate; it requires fixed_step")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_times, n_state)
    stats: dict = field(default_factory=dict)

    def state_at(self, t, rtol=1e-9):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > rtol * max(1.0, abs(t)):
            raise ShapeError(f"time {t} not among trajectory output times")
        return self.states[k]


@dataclass
class RecordedSolve:
    """Accepted step sequence of a solve whose steps land on output times."""

    t_eval: np.ndarray
    step_t: np.ndarray  # start time per accepted step
    step_h: np.ndarray
    step_state: list  # state at each step start
    out_step: np.ndarray  # index into steps after which output k is produced
    method: str
    trajectory: Trajectory


def _rms_error_norm(err, y0, y1, cfg):
    scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(rhs, t0, y0, f0, direction, cfg):
    """Hairer-Norsett-Wanner starting-step heuristic (order 5)."""
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * direction * f0
    f1 = rhs(t0 + h0 * direction, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1)


def integrate_rk(rhs, s0, t_eval, cfg=None, args=(), record=False):
    """Integrate ds/dt = rhs(t, s, *args) and sample at t_eval.

    t_eval must be increasing with t_eval[0] the initial time. Adaptive
    runs use the embedded 5(4) error estimate with dense output at
    t_eval (or exact landings when record=True); fixed-step runs divide
    every output interval into equal substeps.

    Returns a Trajectory, or a RecordedSolve when record=True. Raises
    StiffnessError on step-size underflow / step budget exhaustion and
    NumericError if the right-hand side returns non-finite values.
    """
    cfg = cfg or IntegratorConfig()
    s0 = np.asarray(s0, dtype=float)
    if not np.all(np.isfinite(s0)):
        raise NumericError("initial state contains non-finite values")
    t_eval = np.asarray(t_eval, dtype=float)
    if t_eval.size < 1 or np.any(np.diff(t_eval) <= 0):
        raise ConfigError("t_eval must be strictly increasing")

    f = (lambda t, y: rhs(t, y, *args)) if args else rhs

    if cfg.fixed_step is not None:
        return _integrate_fixed(f, s0, t_eval, cfg, record)
    return _integrate_adaptive(f, s0, t_eval, cfg, record)


def _check_finite(dy, t):
    if not np.all(np.isfinite(dy)):
        raise NumericError(f"right-hand side returned non-finite values at t={t}")


def _rk_step(f, t, y, h, c, a, b, nstage):
    k = [None] * nstage
    k[0] = f(t, y)
    for i in range(1, nstage):
        yi = y + h * sum(a[i][j] * k[j] for j in range(i) if a[i][j] != 0.0)
        k[i] = f(t + c[i] * h, yi)
    y1 = y + h * sum(b[i] * k[i] for i in range(nstage) if b[i] != 0.0)
    return y1, k


def _stage_states(y, h, k, c, a, nstage):
    """Stage input states u_i from the stage derivatives (for the adjoint)."""
    us = [y]
    for i in range(1, nstage):
        us.append(y + h * sum(a[i][j] * k[j] for j in range(i) if a[i][j] != 0.0))
    return us


def _integrate_fixed(f, s0, t_eval, cfg, record):
    c, a, b, _ = TABLEAUS[cfg.method]
    nstage = len(c)
    y = s0.copy()
    nfev = 0
    steps_t, steps_h, steps_y = [], [], []
    out = [s0.copy()]
    out_step = [-1]  # t_eval[0] is the initial state
    nsteps = 0
    for k_out in range(1, t_eval.size):
        t_a, t_b = t_eval[k_out - 1], t_eval[k_out]
        nsub = max(1, int(np.ceil((t_b - t_a) / cfg.fixed_step - 1e-12)))
        h = (t_b - t_a) / nsub
        for m in range(nsub):
            t = t_a + m * h
            if nsteps >= cfg.max_steps:
                raise StiffnessError(f"step budget exceeded at t={t}", last_time=t)
            steps_t.append(t)
            steps_h.append(h)
            steps_y.append(y.copy())
            y, kk = _rk_step(f, t, y, h, c, a, b, nstage)
            _check_finite(y, t + h)
            nfev += nstage
            nsteps += 1
        out.append(y.copy())
        out_step.append(nsteps - 1)
    traj = Trajectory(
        t_eval.copy(),
        np.asarray(out),
        {"n_steps": nsteps, "n_rejected": 0, "n_rhs": nfev},
    )
    if not record:
        return traj
    return RecordedSolve(
        t_eval.copy(),
        np.asarray(steps_t),
        np.asarray(steps_h),
        steps_y,
        np.asarray(out_step, dtype=int),
        cfg.method,
        traj,
    )


def _dense_eval(y0, h, k, sigma):
    """Quartic dense-output interpolant of the DP 5(4) pair at fraction sigma."""
    powers = np.array([sigma, sigma**2, sigma**3, sigma**4])
    bw = DP_P @ powers
    return y0 + h * sum(bw[i] * k[i] for i in range(7) if bw[i] != 0.0)


def _integrate_adaptive(f, s0, t_eval, cfg, record):
    c, a, b, e = TABLEAUS[cfg.method]
    if e is None:
        raise ConfigError("adaptive mode requires an embedded error estimate")
    nstage = len(c)
    t0, t_end = float(t_eval[0]), float(t_eval[-1])
    y = s0.copy()
    t = t0
    f0 = f(t0, y)
    _check_finite(f0, t0)
    nfev = 1
    h = cfg.initial_step or _initial_step(f, t0, y, f0, 1.0, cfg)
    nfev += 0 if cfg.initial_step else 1
    h = min(h, t_end - t0)
    h_min = 1e-13 * max(abs(t0), abs(t_end), 1.0)

    out_states = [s0.copy()]
    out_idx = 1  # next output to produce
    steps_t, steps_h, steps_y, out_step = [], [], [], [-1]
    naccept = nreject = 0

    while t < t_end - 1e-12 * max(1.0, abs(t_end)):
        if naccept + nreject >= cfg.max_steps:
            raise StiffnessError(f"step budget exceeded at t={t}", last_time=t)
        if h < h_min:
            raise StiffnessError(f"step size underflow at t={t}", last_time=t)
        h = min(h, t_end - t)
        if record and out_idx < t_eval.size:
            h = min(h, t_eval[out_idx] - t)  # land exactly on outputs
        y1, k = _rk_step(f, t, y, h, c, a, b, nstage)
        _check_finite(y1, t + h)
        nfev += nstage
        err = h * sum(e[i] * k[i] for i in range(nstage) if e[i] != 0.0)
        enorm = _rms_error_norm(err, y, y1, cfg)
        if enorm > 1.0:
            nreject += 1
            h *= max(0.2, 0.9 * enorm ** (-0.2))
            continue
        # accepted
        if record:
            steps_t.append(t)
            steps_h.append(h)
            steps_y.append(y.copy())
        t_new = t + h
        while out_idx < t_eval.size and t_eval[out_idx] <= t_new + 1e-12 * max(1.0, abs(t_new)):
            if record:
                out_states.append(y1.copy())
                out_step.append(naccept)
            else:
                sigma = (t_eval[out_idx] - t) / h
                out_states.append(
                    y1.copy() if abs(sigma - 1.0) < 1e-12 else _dense_eval(y, h, k, sigma)
                )
            out_idx += 1
        y = y1
        t = t_new
        naccept += 1
        h *= min(5.0, max(0.2, 0.9 * enorm ** (-0.2) if enorm > 0 else 5.0))

    if out_idx < t_eval.size:
        raise StiffnessError(f"integration ended at t={t} before t_eval end", last_time=t)
    traj = Trajectory(
        t_eval.copy(),
        np.asarray(out_states),
        {"n_steps": naccept, "n_rejected": nreject, "n_rhs": nfev},
    )
    if not record:
        return traj
    return RecordedSolve(
        t_eval.copy(),
        np.asarray(steps_t),
        np.asarray(steps_h),
        steps_y,
        np.asarray(out_step, dtype=int),
        cfg.method,
        traj,
    )


def solve_linear_system(matrix, rhs, offset=None):
    """Solve matrix @ x = rhs - offset with a sparse direct factorization.

    The solved system absorbs an affine operator's offset so that
    operator(x) = matrix @ x + offset = rhs. Verifies the residual to
    1e-10 * (1 + ||rhs||) and raises SolveError for singular systems
    (e.g. pure-Neumann pressure problems, whose constant nullspace makes
    the head level undetermined).
    """
    b = np.asarray(rhs, dtype=float)
    if offset is not None:
        b = b - offset
    mat = sp.csr_matrix(matrix)
    if mat.shape[0] != mat.shape[1] or mat.shape[0] != b.size:
        raise ShapeError("linear system must be square and match the rhs length")
    # constants in the nullspace (e.g. all-Neumann head BCs) leave the level
    # undetermined; SuperLU can silently return one representative
    mat_scale = np.abs(mat).max()
    if np.linalg.norm(mat @ np.ones(b.size)) <= 1e-12 * mat_scale * b.size:
        raise SolveError(
            "linear system is singular: constant vectors lie in the nullspace "
            "(all-Neumann boundary conditions leave the solution level free)"
        )
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            x = spla.spsolve(mat.tocsc(), b)
        except (spla.MatrixRankWarning, RuntimeError) as exc:
            raise SolveError(
                "linear system is singular (likely an undetermined constant "
                "nullspace from all-Neumann boundary conditions)"
            ) from exc
    if not np.all(np.isfinite(x)):
        raise SolveError("linear solve produced non-finite values (singular system)")
    resid = np.linalg.norm(mat @ x - b)
    if resid > 1e-10 * (1.0 + np.linalg.norm(b)):
        raise SolveError(f"linear solve residual {resid:.3e} exceeds tolerance")
    return x
