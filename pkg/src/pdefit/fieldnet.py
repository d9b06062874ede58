"""Residual feed-forward networks and the multiplicative field-parameter model.

An unknown parameter is represented as

    value(inputs) = base_scalar * (1 + net(scaled inputs))

where the network is a small leaky-rectifier MLP with residual blocks and
the inputs are node coordinates (space-dependent fields) or state samples
(state-dependent fields), affinely rescaled to [-1, 1]. A bypass mode uses
the network output directly with an absolute-value-plus-offset final layer
for fields that are only identifiable up to scale.

Evaluation is generic over plain numpy arrays and :mod:`pdefit.tape`
variables, so the same forward pass serves simulation and the adjoint
gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .errors import ConfigError, NumericError, ShapeError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_width: int
    n_residual_blocks: int
    leaky_slope: float = 0.01
    final_mode: str = "none"  # 'none' | 'abs_plus_offset'
    final_offset: float = 0.0

    def __post_init__(self):
        if self.hidden_width < 1 or self.n_residual_blocks < 1 or self.input_dim < 1:
            raise ConfigError("network width, depth and input dimension must be >= 1")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky slope must lie in (0, 1)")
        if self.final_mode not in ("none", "abs_plus_offset"):
            raise ConfigError(f"unknown final mode {self.final_mode!r}")
        if self.final_mode == "abs_plus_offset" and not self.final_offset > 0:
            raise ConfigError("abs_plus_offset requires a positive offset")

    @property
    def n_layers(self):
        return 2 + 2 * self.n_residual_blocks  # entry + block pairs + exit

    def layer_shapes(self):
        w = self.hidden_width
        shapes = [(self.input_dim, w)]
        shapes += [(w, w)] * (2 * self.n_residual_blocks)
        shapes.append((w, 1))
        return shapes


# per-application presets; battery and cell networks read a single state
# variable, flow and cardiac read 2D space
NETWORK_PRESETS = {
    "battery": MlpSpec(1, 20, 2),
    "cell": MlpSpec(1, 20, 2),
    "flow": MlpSpec(2, 50, 3, final_mode="abs_plus_offset", final_offset=1e-3),
    "cardiac": MlpSpec(2, 150, 4),
}


@dataclass
class MlpWeights:
    """Per-layer weight and bias arrays plus the seeding record."""

    spec: MlpSpec
    arrays: list  # [W0, b0, W1, b1, ...]
    seed: int | None = None

    def copy(self):
        return MlpWeights(self.spec, [a.copy() for a in self.arrays], self.seed)

    def n_params(self):
        return sum(a.size for a in self.arrays)

    def pack(self):
        return np.concatenate([a.ravel() for a in self.arrays])

    def unpack_from(self, flat):
        out = []
        k = 0
        for a in self.arrays:
            out.append(flat[k : k + a.size].reshape(a.shape))
            k += a.size
        if k != flat.size:
            raise ShapeError("flat weight vector length mismatch")
        return MlpWeights(self.spec, out, self.seed)


def init_mlp(spec, seed):
    """Seeded initialization with a small exit layer so the field correction
    starts within a few percent of zero on [-1, 1]^d inputs."""
    rng = np.random.default_rng(seed)
    arrays = []
    shapes = spec.layer_shapes()
    for li, (fan_in, fan_out) in enumerate(shapes):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        if li == len(shapes) - 1:
            bound = 0.01 / np.sqrt(fan_in)
        arrays.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        arrays.append(np.zeros(fan_out))
    return MlpWeights(spec, arrays, seed)


def zero_mlp(spec):
    arrays = []
    for fan_in, fan_out in spec.layer_shapes():
        arrays.append(np.zeros((fan_in, fan_out)))
        arrays.append(np.zeros(fan_out))
    return MlpWeights(spec, arrays, None)


def mlp_forward(weights, spec, inputs, arrays=None):
    """Forward pass for a batch of inputs, shape (n, input_dim) -> (n,).

    `arrays` optionally overrides the weight arrays (e.g. with tape Vars);
    `inputs` may likewise be a tape Var. Residual blocks add their two-layer
    activation path onto the block input.
    """
    a = arrays if arrays is not None else weights.arrays
    x = inputs
    if not isinstance(x, tp.Var):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ShapeError(
                f"inputs must have shape (n, {spec.input_dim}), got {np.shape(inputs)}"
            )
        if not np.all(np.isfinite(x)):
            raise NumericError("network inputs contain non-finite values")
    s = spec.leaky_slope
    h = tp.leaky_relu(tp.dot(x, a[0]) + a[1], s)
    for blk in range(spec.n_residual_blocks):
        i = 2 + 4 * blk
        inner = tp.leaky_relu(tp.dot(h, a[i]) + a[i + 1], s)
        inner = tp.leaky_relu(tp.dot(inner, a[i + 2]) + a[i + 3], s)
        h = h + inner
    out = (tp.dot(h, a[-2]) + a[-1])[:, 0]
    if spec.final_mode == "abs_plus_offset":
        out = tp.absolute(out) + spec.final_offset
    return out


@dataclass(frozen=True)
class InputScaler:
    """Affine map sending the fitted range to [-1, 1] per dimension."""

    lo: np.ndarray
    hi: np.ndarray

    def __call__(self, raw):
        scale = 2.0 / (self.hi - self.lo)
        if isinstance(raw, tp.Var):
            return (raw - self.lo) * scale - 1.0
        return (np.asarray(raw, dtype=float) - self.lo) * scale - 1.0

    def out_of_range(self, raw):
        """Fraction of samples mapping outside [-1, 1] (extrapolation)."""
        z = self(np.asarray(raw, dtype=float))
        return float(np.mean(np.any(np.abs(z) > 1.0 + 1e-12, axis=1)))


def fit_input_scaler(raw_inputs):
    """Fit min -> -1, max -> +1 per input dimension."""
    x = np.atleast_2d(np.asarray(raw_inputs, dtype=float))
    if x.shape[0] < 1:
        raise ConfigError("cannot fit a scaler on empty inputs")
    lo, hi = x.min(axis=0), x.max(axis=0)
    if np.any(hi - lo <= 0):
        raise ConfigError("degenerate inputs: zero range in at least one dimension")
    return InputScaler(lo, hi)


@dataclass
class ParamField:
    """Unknown parameter model: learnable scalar plus network correction."""

    name: str
    base_scalar: float
    weights: MlpWeights
    input_kind: str  # 'space' | 'state'
    scaler: InputScaler | None = None
    bypass_scalar: bool = False
    state_var: str | None = None  # which state drives a state-dependent field
    scalar_bounds: tuple = (1e-3, 1e3)  # physical init range for stage 1

    def eval(self, raw_inputs, arrays=None, base=None):
        """Per-sample parameter values; raw_inputs shape (n, input_dim).

        Accepts tape Vars for raw_inputs, arrays and base so gradients
        can flow through any of them.
        """
        if self.scaler is None:
            raise ConfigError(f"field {self.name!r}: input scaler not initialized")
        scaled = self.scaler(raw_inputs)
        net = mlp_forward(self.weights, self.weights.spec, scaled, arrays=arrays)
        if self.bypass_scalar:
            return net
        b = self.base_scalar if base is None else base
        return (net + 1.0) * b


def eval_field(field_model, raw_inputs):
    """Evaluate a ParamField at node coordinates or state samples.

    1D input vectors are treated as a column of samples for scalar-input
    networks; multi-dimensional inputs must already be (n, input_dim).
    """
    x = np.asarray(raw_inputs, dtype=float)
    if x.ndim == 1:
        if field_model.weights.spec.input_dim != 1:
            raise ShapeError("1D inputs only valid for scalar-input networks")
        x = x[:, None]
    return field_model.eval(x)


def save_weights(path, field_model):
    """Versioned checkpoint: spec header plus flat weight arrays."""
    w = field_model.weights
    meta = dict(
        version=CHECKPOINT_VERSION,
        name=field_model.name,
        input_dim=w.spec.input_dim,
        hidden_width=w.spec.hidden_width,
        n_residual_blocks=w.spec.n_residual_blocks,
        leaky_slope=w.spec.leaky_slope,
        final_mode=w.spec.final_mode,
        final_offset=w.spec.final_offset,
        base_scalar=field_model.base_scalar,
        input_kind=field_model.input_kind,
        bypass_scalar=int(field_model.bypass_scalar),
        state_var=field_model.state_var or "",
        seed=-1 if w.seed is None else w.seed,
    )
    arrays = {f"arr_{i}": a for i, a in enumerate(w.arrays)}
    if field_model.scaler is not None:
        arrays["scaler_lo"] = field_model.scaler.lo
        arrays["scaler_hi"] = field_model.scaler.hi
    np.savez(path, **{f"meta_{k}": np.asarray(v) for k, v in meta.items()}, **arrays)


def load_weights(path):
    data = np.load(path, allow_pickle=False)
    version = int(data["meta_version"])
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    spec = MlpSpec(
        int(data["meta_input_dim"]),
        int(data["meta_hidden_width"]),
        int(data["meta_n_residual_blocks"]),
        float(data["meta_leaky_slope"]),
        str(data["meta_final_mode"]),
        float(data["meta_final_offset"]),
    )
    n_arr = len([k for k in data.files if k.startswith("arr_")])
    arrays = [data[f"arr_{i}"] for i in range(n_arr)]
    seed = int(data["meta_seed"])
    weights = MlpWeights(spec, arrays, None if seed < 0 else seed)
    scaler = None
    if "scaler_lo" in data.files:
        scaler = InputScaler(data["scaler_lo"], data["scaler_hi"])
    return ParamField(
        name=str(data["meta_name"]),
        base_scalar=float(data["meta_base_scalar"]),
        weights=weights,
        input_kind=str(data["meta_input_kind"]),
        scaler=scaler,
        bypass_scalar=bool(int(data["meta_bypass_scalar"])),
        state_var=str(data["meta_state_var"]) or None,
    )
