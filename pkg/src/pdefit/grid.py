"""Spatial grids and sparse finite-difference operators.

Grids are tensor products of 1D axes (uniform or non-uniform). Nodes are
flattened x-fastest: the flat index of node (i, j, k) on an (nx, ny, nz)
grid is ``i + nx*(j + ny*k)``, i.e. axis 0 varies fastest.

Derivative operators are sparse matrices acting on flat state vectors,
together with an affine offset that carries inhomogeneous boundary terms:

    d^j S / dX^j  ~=  A_j @ S + bc_offset

Interior rows use 3-point central stencils; on non-uniform axes the
generalized 3-point stencil obtained from Taylor expansion through the two
neighbors is used (exact on quadratics). Boundary handling:

* Dirichlet (S = beta): the boundary node's row is zeroed (its value is
  prescribed; callers pin it) and its column is folded into the offsets of
  neighboring rows.
* Neumann (dS/dX = beta, axis direction): second-order ghost-node
  elimination (mirror point at the adjacent spacing).
* Robin (conduction balanced by surface convection): ghost elimination
  with the combined coefficient robin_coeff = h_conv / conductivity,
  units 1/length; beta is the ambient value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericError, PhysicsError, ShapeError
from .tape import LinOp

_UNIFORM_RTOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Tensor-product spatial grid, immutable after construction."""

    axis_coords: tuple  # per-axis strictly increasing coordinate arrays
    dims: tuple  # node count per axis
    uniform: tuple  # per-axis uniformity flags

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def n_total(self):
        return int(np.prod(self.dims))

    def spacings(self, axis):
        """Gaps between consecutive nodes along one axis (length n-1)."""
        return np.diff(self.axis_coords[axis])

    def cell_widths(self, axis):
        """Per-node 1D cell widths (trapezoid rule: half cells at the ends)."""
        h = self.spacings(axis)
        w = np.empty(self.dims[axis])
        w[0] = h[0] / 2.0
        w[-1] = h[-1] / 2.0
        w[1:-1] = (h[:-1] + h[1:]) / 2.0
        return w

    def node_volumes(self):
        """Flat vector of per-node cell volumes (product of axis widths)."""
        vol = self._expand_axis_vector(0, self.cell_widths(0))
        for a in range(1, self.ndim):
            vol = vol * self._expand_axis_vector(a, self.cell_widths(a))
        return vol

    def node_positions(self):
        """(n_total, ndim) array of node coordinates in flat order."""
        mesh = np.meshgrid(*self.axis_coords, indexing="ij")
        # flat order is x-fastest: transpose so axis 0 is the fastest-varying
        return np.stack([m.transpose(range(self.ndim)[::-1]).ravel() for m in mesh], axis=1)

    def flat_index(self, multi):
        """Flat index of a node given per-axis indices (i, j, k, ...)."""
        idx = 0
        for a in reversed(range(self.ndim)):
            idx = idx * self.dims[a] + multi[a]
        return idx

    def axis_index_grid(self, axis):
        """Flat vector giving each node's index along one axis."""
        n = self.n_total
        below = int(np.prod(self.dims[:axis])) if axis > 0 else 1
        return (np.arange(n) // below) % self.dims[axis]

    def _expand_axis_vector(self, axis, vec):
        """Broadcast a per-axis 1D vector to a flat per-node vector."""
        return np.asarray(vec)[self.axis_index_grid(axis)]

    def face_node_indices(self, axis, side):
        """Flat indices of all nodes on one face of the box."""
        k = self.axis_index_grid(axis)
        target = 0 if side == "low" else self.dims[axis] - 1
        return np.nonzero(k == target)[0]

    def boundary_node_indices(self):
        """Flat indices of all nodes lying on any face (battery surfaces)."""
        on_face = np.zeros(self.n_total, dtype=bool)
        for a in range(self.ndim):
            k = self.axis_index_grid(a)
            on_face |= (k == 0) | (k == self.dims[a] - 1)
        return np.nonzero(on_face)[0]


def build_grid(extents=None, counts=None, coords=None):
    """Construct a Grid from per-axis (min, max) extents and counts, or
    from explicit coordinate lists.

    Raises ConfigError for degenerate axes (count < 3, non-increasing
    coordinates, min >= max).
    """
    if coords is not None:
        axes = [np.asarray(c, dtype=float) for c in coords]
    else:
        if extents is None or counts is None:
            raise ConfigError("provide either explicit coords or extents + counts")
        if len(extents) != len(counts):
            raise ConfigError("extents and counts must have the same length")
        axes = []
        for (lo, hi), n in zip(extents, counts):
            if not lo < hi:
                raise ConfigError(f"axis extent must satisfy min < max, got ({lo}, {hi})")
            axes.append(np.linspace(float(lo), float(hi), int(n)))
    uniform = []
    for a, c in enumerate(axes):
        if c.size < 3:
            raise ConfigError(f"axis {a} has {c.size} nodes; at least 3 required")
        h = np.diff(c)
        if np.any(h <= 0):
            raise ConfigError(f"axis {a} coordinates must be strictly increasing")
        uniform.append(bool(h.max() / h.min() - 1.0 < _UNIFORM_RTOL))
        c.setflags(write=False)
    return Grid(tuple(axes), tuple(int(c.size) for c in axes), tuple(uniform))


@dataclass(frozen=True)
class BoundaryCondition:
    """One condition on one face of one axis.

    kind: 'dirichlet' | 'neumann' | 'robin'; beta is the prescribed value
    (state units for Dirichlet/Robin-ambient, state-gradient units for
    Neumann, taken along the axis direction). robin_coeff (1/length) is
    the convection coefficient divided by the conduction coefficient.
    """

    kind: str
    axis: int
    side: str  # 'low' | 'high'
    beta: float = 0.0
    robin_coeff: float = 0.0

    def __post_init__(self):
        # 'flux' (prescribed total flux c dS/dX = beta, independent of the
        # coefficient) is accepted by the conservative div-grad assembly
        # only; it exists for flux-driven Darcy inflows
        if self.kind not in ("dirichlet", "neumann", "robin", "flux"):
            raise ConfigError(f"unknown boundary condition kind {self.kind!r}")
        if self.side not in ("low", "high"):
            raise ConfigError(f"side must be 'low' or 'high', got {self.side!r}")
        if self.kind == "robin" and not self.robin_coeff > 0:
            raise ConfigError("robin boundary conditions require robin_coeff > 0")


def zero_flux_bcs(grid):
    """Zero-Neumann conditions on every face."""
    return [
        BoundaryCondition("neumann", a, side)
        for a in range(grid.ndim)
        for side in ("low", "high")
    ]


def _bc_lookup(bcs, axis):
    found = {}
    for bc in bcs:
        if bc.axis == axis:
            found[bc.side] = bc
    for side in ("low", "high"):
        if side not in found:
            raise ConfigError(f"missing boundary condition for axis {axis} {side} face")
    return found["low"], found["high"]


@dataclass
class DiffOperator:
    """Sparse derivative operator with affine boundary offset."""

    order: int
    axis: int
    matrix: sp.csr_matrix
    bc_offset: np.ndarray
    n_total: int = field(init=False)

    def __post_init__(self):
        self.n_total = self.matrix.shape[0]


def _interior_weights(h_m, h_p, order):
    """3-point stencil weights (w_minus, w_center, w_plus) from Taylor
    expansion through the two neighbors. Exact on quadratics."""
    if order == 1:
        denom = h_m * h_p * (h_m + h_p)
        return (-h_p**2 / denom, (h_p**2 - h_m**2) / denom, h_m**2 / denom)
    denom = h_m * h_p * (h_m + h_p)
    return (2 * h_p / denom, -2 * (h_m + h_p) / denom, 2 * h_m / denom)


def _line_operator(coords, order, bc_low, bc_high):
    """1D stencil matrix and offset on a single axis line."""
    n = coords.size
    h = np.diff(coords)
    rows, cols, vals = [], [], []
    offset = np.zeros(n)

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    for i in range(1, n - 1):
        wm, wc, wp = _interior_weights(h[i - 1], h[i], order)
        put(i, i - 1, wm)
        put(i, i, wc)
        put(i, i + 1, wp)

    for side, bc in (("low", bc_low), ("high", bc_high)):
        b = 0 if side == "low" else n - 1  # boundary node
        j = 1 if side == "low" else n - 2  # interior neighbor
        hb = h[0] if side == "low" else h[-1]
        sgn = 1.0 if side == "low" else -1.0  # +x is inward at the low face
        if bc.kind == "dirichlet":
            # value prescribed: zero the boundary row and fold the boundary
            # column out of every interior row into the offset
            pass
        elif bc.kind == "neumann":
            # mirror ghost at spacing hb: S_ghost = S_j - sgn * 2 hb beta
            if order == 2:
                put(b, b, -2.0 / hb**2)
                put(b, j, 2.0 / hb**2)
                offset[b] += -sgn * 2.0 * bc.beta / hb
            else:
                offset[b] += bc.beta  # derivative prescribed directly
        elif bc.kind == "robin":  # dS/dX at boundary = sgn * rc * (S_b - beta)
            rc = bc.robin_coeff
            if order == 2:
                put(b, b, -(2.0 + 2.0 * hb * rc) / hb**2)
                put(b, j, 2.0 / hb**2)
                offset[b] += 2.0 * rc * bc.beta / hb
            else:
                put(b, b, sgn * rc)
                offset[b] += -sgn * rc * bc.beta
        else:
            raise ConfigError("flux conditions only apply to conservative div-grad operators")

    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    for side, bc in (("low", bc_low), ("high", bc_high)):
        if bc.kind != "dirichlet":
            continue
        b = 0 if side == "low" else n - 1
        col = mat[:, b].toarray().ravel()
        offset += col * bc.beta
        keep = np.ones(n)
        keep[b] = 0.0
        # drop the prescribed column, then zero the boundary node's own row
        # (its value is pinned by callers)
        mat = sp.diags(keep) @ (mat @ sp.diags(keep))
        offset[b] = 0.0

    return mat.tocsr(), offset


def _expand_line(grid, axis, mat1d):
    """Kron-expand a 1D per-axis operator to the flat node space."""
    below = int(np.prod(grid.dims[:axis])) if axis > 0 else 1
    above = int(np.prod(grid.dims[axis + 1 :])) if axis + 1 < grid.ndim else 1
    out = mat1d
    if below > 1:
        out = sp.kron(out, sp.eye(below), format="csr")
    if above > 1:
        out = sp.kron(sp.eye(above), out, format="csr")
    return out.tocsr()


def diff_matrix(grid, axis, order, bcs):
    """Sparse derivative operator of given order (1 or 2) along one axis.

    bcs must contain a condition for both faces of the axis. Returns a
    DiffOperator acting on flat vectors: d^j S/dX^j ~= matrix @ S + bc_offset.
    """
    if order not in (1, 2):
        raise ConfigError(f"derivative order {order} unsupported (only 1 and 2)")
    if not 0 <= axis < grid.ndim:
        raise ConfigError(f"axis {axis} out of range for a {grid.ndim}D grid")
    bc_low, bc_high = _bc_lookup(bcs, axis)
    mat1d, off1d = _line_operator(grid.axis_coords[axis], order, bc_low, bc_high)
    return DiffOperator(
        order, axis, _expand_line(grid, axis, mat1d), grid._expand_axis_vector(axis, off1d)
    )


def gradient_matrix(grid, axis):
    """Nodal first-derivative operator with one-sided 3-point boundary rows
    and no boundary conditions (used for post-solve gradients, e.g. Darcy
    velocities). Exact on quadratics everywhere."""
    c = grid.axis_coords[axis]
    n = c.size
    h = np.diff(c)
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        wm, wc, wp = _interior_weights(h[i - 1], h[i], 1)
        rows += [i, i, i]
        cols += [i - 1, i, i + 1]
        vals += [wm, wc, wp]
    # one-sided second-order 3-point rows at the ends
    h0, h1 = h[0], h[1]
    rows += [0, 0, 0]
    cols += [0, 1, 2]
    vals += [
        -(2 * h0 + h1) / (h0 * (h0 + h1)),
        (h0 + h1) / (h0 * h1),
        -h0 / (h1 * (h0 + h1)),
    ]
    hm1, hm2 = h[-1], h[-2]
    rows += [n - 1, n - 1, n - 1]
    cols += [n - 3, n - 2, n - 1]
    vals += [
        hm1 / (hm2 * (hm2 + hm1)),
        -(hm2 + hm1) / (hm2 * hm1),
        (2 * hm1 + hm2) / (hm1 * (hm2 + hm1)),
    ]
    mat1d = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return _expand_line(grid, axis, mat1d)


def apply_operator(op, state):
    """Evaluate op.matrix @ state + op.bc_offset with validation."""
    state = np.asarray(state, dtype=float)
    if state.shape != (op.n_total,):
        raise ShapeError(f"state length {state.shape} does not match operator size {op.n_total}")
    if not np.all(np.isfinite(state)):
        raise NumericError("state contains non-finite values")
    return op.matrix @ state + op.bc_offset


class DivGradOperator:
    """Conservative discretization of div(c grad S) with c given per node.

    Face fluxes use the arithmetic mean of the adjacent node coefficients;
    the assembled action is

        div(c grad S) ~= sum_axes D_a @ ((M_a @ c) * (G_a @ S)) + R @ S
                         + offset_const + O_c @ c

    where G_a are face gradients, M_a face averages, D_a area-over-volume
    signed divergences, R collects Robin terms and O_c the c-dependent
    boundary offsets. The factored form exposes exact vector-Jacobian
    products with respect to the coefficient, which the adjoint gradient
    path relies on.
    """

    def __init__(self, grid, bcs, face_weights=None, node_volumes=None, axes=None):
        self.grid = grid
        n = grid.n_total
        vol = grid.node_volumes() if node_volumes is None else np.asarray(node_volumes, float)
        self.volumes = vol
        self.grad_ops = []
        self.avg_ops = []
        self.div_ops = []
        robin = sp.csr_matrix((n, n))
        off_const = np.zeros(n)
        off_coeff = sp.lil_matrix((n, n))
        pinned = np.ones(n)

        for axis in (range(grid.ndim) if axes is None else axes):
            bc_low, bc_high = _bc_lookup(bcs, axis)
            coords = grid.axis_coords[axis]
            na = coords.size
            h = np.diff(coords)
            idx = grid.axis_index_grid(axis)
            below = int(np.prod(grid.dims[:axis])) if axis > 0 else 1

            # interior faces along this axis: between node pairs (i, i + below)
            left = np.nonzero(idx < na - 1)[0]
            right = left + below
            nf = left.size
            hf = h[idx[left]]
            if face_weights is None:
                # transverse area = volume / own-axis width
                w_axis = grid._expand_axis_vector(axis, grid.cell_widths(axis))
                area = 0.5 * (vol[left] / w_axis[left] + vol[right] / w_axis[right])
            else:
                area = np.asarray(face_weights[axis], dtype=float)
                if area.shape != (nf,):
                    raise ShapeError("face_weights length mismatch")

            rows_f = np.arange(nf)
            G = sp.csr_matrix(
                (np.concatenate([-1.0 / hf, 1.0 / hf]),
                 (np.concatenate([rows_f, rows_f]), np.concatenate([left, right]))),
                shape=(nf, n),
            )
            M = sp.csr_matrix(
                (np.full(2 * nf, 0.5),
                 (np.concatenate([rows_f, rows_f]), np.concatenate([left, right]))),
                shape=(nf, n),
            )
            D = sp.csr_matrix(
                (np.concatenate([area / vol[left], -area / vol[right]]),
                 (np.concatenate([left, right]), np.concatenate([rows_f, rows_f]))),
                shape=(n, nf),
            )

            # boundary faces
            for side, bc in (("low", bc_low), ("high", bc_high)):
                bidx = grid.face_node_indices(axis, side)
                hb = h[0] if side == "low" else h[-1]
                w_axis_b = grid.cell_widths(axis)[0 if side == "low" else -1]
                barea = vol[bidx] / w_axis_b
                sgn = -1.0 if side == "low" else 1.0  # sign of the face in the divergence
                if bc.kind == "neumann":
                    # axis-direction flux c * beta through the boundary face
                    for i, a_i in zip(bidx, barea):
                        off_coeff[i, i] += sgn * bc.beta * a_i / vol[i]
                elif bc.kind == "flux":
                    # prescribed total flux, no coefficient dependence
                    off_const[bidx] += sgn * bc.beta * barea / vol[bidx]
                elif bc.kind == "robin":
                    rc = bc.robin_coeff
                    d = sp.lil_matrix((n, n))
                    for i, a_i in zip(bidx, barea):
                        d[i, i] = -rc * a_i / vol[i]
                        off_const[i] += rc * bc.beta * a_i / vol[i]
                    robin = robin + d.tocsr()
                else:  # dirichlet: pin boundary nodes, fold their columns
                    pinned[bidx] = 0.0
                    # faces adjacent to the pinned nodes: replace the pinned
                    # state by beta in the face gradient
                    on_face = np.zeros(n, dtype=bool)
                    on_face[bidx] = True
                    fsel = np.nonzero(on_face[left] | on_face[right])[0]
                    G = G.tolil()
                    for f in fsel:
                        i_l, i_r = left[f], right[f]
                        pin = i_l if on_face[i_l] else i_r
                        gval = G[f, pin]
                        # offset contribution beta * gval * c_face via both
                        # averaging parents of the face
                        for jc in (i_l, i_r):
                            for irow, dval in zip(*_col_entries(D, f)):
                                off_coeff[irow, jc] += dval * 0.5 * bc.beta * gval
                        G[f, pin] = 0.0
                    G = G.tocsr()

            self.grad_ops.append(LinOp(G))
            self.avg_ops.append(LinOp(M))
            self.div_ops.append(LinOp(D))

        if np.any(pinned == 0.0):
            mask = sp.diags(pinned)
            robin = mask @ robin
            off_const = off_const * pinned
            off_coeff = sp.lil_matrix(mask @ off_coeff.tocsr())
            self.div_ops = [LinOp(mask @ d.mat) for d in self.div_ops]
        self.robin = LinOp(robin.tocsr())
        self.offset_const = off_const
        self.offset_coeff = LinOp(off_coeff.tocsr())
        self._pin_mask = pinned

    # ---- evaluation ---------------------------------------------------------

    def apply(self, coeff, state):
        """div(c grad S) without materializing the matrix. Accepts plain
        arrays or tape Vars for either argument (gradient recordings)."""
        from . import tape as tp

        out = tp.matvec(self.robin, state) + self.offset_const
        out = out + tp.matvec(self.offset_coeff, coeff)
        for G, M, D in zip(self.grad_ops, self.avg_ops, self.div_ops):
            out = out + tp.matvec(D, tp.matvec(M, coeff) * tp.matvec(G, state))
        return out

    def offset(self, coeff):
        return self.offset_const + self.offset_coeff.mat @ coeff

    def materialize(self, coeff):
        """Assemble the sparse matrix for a fixed coefficient vector.

        Returns (matrix, offset) with div(c grad S) = matrix @ S + offset.
        Raises PhysicsError for non-positive coefficients.
        """
        coeff = np.asarray(coeff, dtype=float)
        if np.any(coeff <= 0):
            raise PhysicsError("diffusion/conduction coefficient must be positive at all nodes")
        mat = self.robin.mat.copy()
        for G, M, D in zip(self.grad_ops, self.avg_ops, self.div_ops):
            mat = mat + D.mat @ sp.diags(M.mat @ coeff) @ G.mat
        return mat.tocsr(), self.offset(coeff)

    # ---- adjoint helpers ----------------------------------------------------

    def vjp_state(self, coeff, w):
        """w^T d(apply)/dS as a vector."""
        out = self.robin.mat_t @ w
        for G, M, D in zip(self.grad_ops, self.avg_ops, self.div_ops):
            out += G.mat_t @ ((M.mat @ coeff) * (D.mat_t @ w))
        return out

    def vjp_coeff(self, state, w):
        """w^T d(apply)/dc as a vector."""
        out = self.offset_coeff.mat_t @ w
        for G, M, D in zip(self.grad_ops, self.avg_ops, self.div_ops):
            out += M.mat_t @ ((G.mat @ state) * (D.mat_t @ w))
        return out


def _col_entries(mat, col):
    """(rows, values) of one column of a sparse matrix."""
    c = mat.getcol(col).tocoo()
    return c.row, c.data


def variable_coeff_divgrad(grid, coeff, bcs):
    """Materialized conservative div(c grad .) operator for a fixed positive
    per-node coefficient. Returns (matrix, offset)."""
    coeff = np.asarray(coeff, dtype=float)
    if coeff.shape != (grid.n_total,):
        raise ShapeError("coefficient length must equal the node count")
    op = DivGradOperator(grid, bcs)
    return op.materialize(coeff)
