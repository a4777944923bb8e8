"""Coordinate MLPs: activations, positional encoding, forward pass, init."""
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .autodiff import ParamVector, Var, elementwise
from .errors import ConfigError

ACTIVATIONS = ("relu", "sine", "gaussian", "wavelet", "sinc")

# defaults used when a config names an activation without parameters
DEFAULT_OMEGA0 = 30.0
DEFAULT_SIGMA = 0.05
DEFAULT_WAVELET_OMEGA0 = 10.0
DEFAULT_WAVELET_S = 1.0
DEFAULT_SINC_A = 30.0


@dataclass(frozen=True)
class ActivationKind:
    """Activation family and its shape parameters.

    ``omega0`` is the frequency for sine and the carrier for wavelet,
    ``sigma`` the gaussian width, ``s`` the wavelet envelope width and ``a``
    the sinc frequency scale.
    """

    kind: str
    omega0: float = DEFAULT_OMEGA0
    sigma: float = DEFAULT_SIGMA
    s: float = DEFAULT_WAVELET_S
    a: float = DEFAULT_SINC_A

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")
        for name in ("omega0", "sigma", "s", "a"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"activation parameter {name} must be positive")

    @classmethod
    def relu(cls):
        return cls("relu")

    @classmethod
    def sine(cls, omega0=DEFAULT_OMEGA0):
        return cls("sine", omega0=omega0)

    @classmethod
    def gaussian(cls, sigma=DEFAULT_SIGMA):
        return cls("gaussian", sigma=sigma)

    @classmethod
    def wavelet(cls, omega0=DEFAULT_WAVELET_OMEGA0, s=DEFAULT_WAVELET_S):
        return cls("wavelet", omega0=omega0, s=s)

    @classmethod
    def sinc(cls, a=DEFAULT_SINC_A):
        return cls("sinc", a=a)

    @property
    def kernel(self):
        """(kernel code, first parameter, second parameter)."""
        if self.kind == "relu":
            return kernels.RELU, 1.0, 1.0
        if self.kind == "sine":
            return kernels.SINE, self.omega0, 1.0
        if self.kind == "gaussian":
            return kernels.GAUSSIAN, self.sigma, 1.0
        if self.kind == "wavelet":
            return kernels.WAVELET, self.omega0, self.s
        return kernels.SINC, self.a, 1.0

    def params_dict(self):
        """Only the parameters this kind actually uses."""
        used = {"relu": (), "sine": ("omega0",), "gaussian": ("sigma",),
                "wavelet": ("omega0", "s"), "sinc": ("a",)}[self.kind]
        return {k: getattr(self, k) for k in used}


def activate(kind: ActivationKind, x):
    """phi(x) for a scalar or array ``x`` (no tape)."""
    code, p1, p2 = kind.kernel
    arr = np.asarray(x, dtype=np.float64)
    f, _, _ = kernels.activation(code, p1, p2, arr, 1)
    return float(np.reshape(f, -1)[0]) if arr.ndim == 0 else np.reshape(f, arr.shape)


def apply_activation(kind: ActivationKind, x):
    """phi applied componentwise to a Var (recorded) or an array."""
    code, p1, p2 = kind.kernel
    return elementwise(x, code, p1, p2, name=kind.kind)


@dataclass(frozen=True)
class PositionalEncoding:
    bands: int = 10
    include_input: bool = True

    def __post_init__(self):
        if self.bands < 0:
            raise ConfigError("positional encoding bands must be >= 0")

    def output_dim(self, n0):
        return n0 * (2 * self.bands + (1 if self.include_input else 0))


def encode(pe: PositionalEncoding, x):
    """[x, sin(2^k pi x), cos(2^k pi x) for k < bands], column blocks of width n0."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    parts = [x] if pe.include_input else []
    for k in range(pe.bands):
        w = (2.0 ** k) * math.pi
        parts.append(np.sin(w * x))
        parts.append(np.cos(w * x))
    if not parts:
        return np.zeros((x.shape[0], 0))
    return np.concatenate(parts, axis=1)


@dataclass(frozen=True)
class NetworkSpec:
    """Depth L = len(hidden) + 1; linear output layer."""

    input_dim: int
    hidden: tuple
    output_dim: int
    activation: ActivationKind = field(default_factory=ActivationKind.relu)
    encoding: Optional[PositionalEncoding] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) < 1:
            raise ConfigError("network depth must be >= 2 (at least one hidden layer)")
        if self.input_dim < 1 or self.output_dim < 1 or min(self.hidden) < 1:
            raise ConfigError("all layer widths must be >= 1")

    @property
    def depth(self):
        return len(self.hidden) + 1

    @property
    def encoded_dim(self):
        if self.encoding is None:
            return self.input_dim
        return self.encoding.output_dim(self.input_dim)

    @property
    def widths(self):
        """n_0 (after encoding), n_1, ..., n_L."""
        return (self.encoded_dim,) + self.hidden + (self.output_dim,)

    @property
    def is_paper_configuration(self):
        return self.encoding is None or self.activation.kind == "relu"

    def layout(self):
        w = self.widths
        shapes = []
        for k in range(1, len(w)):
            shapes.append((k, "weight", (w[k - 1], w[k])))
            shapes.append((k, "bias", (w[k],)))
        return ParamVector.build_layout(shapes)

    @property
    def n_params(self):
        w = self.widths
        return sum(w[k - 1] * w[k] + w[k] for k in range(1, len(w)))

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": {"kind": self.activation.kind, **self.activation.params_dict()},
            "encoding": None if self.encoding is None else asdict(self.encoding),
        }

    @classmethod
    def from_dict(cls, d):
        act = dict(d["activation"])
        enc = d.get("encoding")
        return cls(
            input_dim=int(d["input_dim"]),
            hidden=tuple(d["hidden"]),
            output_dim=int(d["output_dim"]),
            activation=ActivationKind(act.pop("kind"), **{k: float(v) for k, v in act.items()}),
            encoding=None if enc is None else PositionalEncoding(int(enc["bands"]), bool(enc["include_input"])),
        )

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _param_array(params):
    if isinstance(params, ParamVector):
        return params.flat
    if isinstance(params, Var):
        return params
    return np.asarray(params, dtype=np.float64)


def forward(spec: NetworkSpec, params, X):
    """Network output F_L for inputs X (N x n0).

    ``params`` may be a ParamVector, a flat array, or a tape Var; with a Var
    the whole computation is recorded for differentiation.
    """
    theta = _param_array(params)
    if theta.shape != (spec.n_params,):
        raise ConfigError(f"parameter vector has shape {theta.shape}, network needs ({spec.n_params},)")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != spec.input_dim:
        raise ConfigError(f"inputs have {X.shape[1]} columns, network expects {spec.input_dim}")
    F = encode(spec.encoding, X) if spec.encoding is not None else X
    layout = spec.layout()
    last = spec.depth
    for i in range(0, len(layout), 2):
        we, be = layout[i], layout[i + 1]
        W = theta[we.slice].reshape(we.shape)
        b = theta[be.slice]
        Z = F @ W + b
        F = Z if we.layer == last else apply_activation(spec.activation, Z)
    return F


def forward_reference(spec: NetworkSpec, params, X):
    """Scalar-loop evaluation of the same network, for testing."""
    flat = _param_array(params)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    F = encode(spec.encoding, X) if spec.encoding is not None else X
    rows = [list(map(float, r)) for r in F]
    layout = spec.layout()
    out = []
    for row in rows:
        cur = row
        for i in range(0, len(layout), 2):
            we, be = layout[i], layout[i + 1]
            W = flat[we.slice].reshape(we.shape)
            b = flat[be.slice]
            nxt = []
            for j in range(we.shape[1]):
                z = 0.0
                for k in range(we.shape[0]):
                    z += cur[k] * W[k, j]
                z += b[j]
                nxt.append(z if we.layer == spec.depth else activate(spec.activation, z))
            cur = nxt
        out.append(cur)
    return np.array(out)


def init_bounds(spec: NetworkSpec, gain=1.0, hidden_gain=1.0):
    """Uniform half-widths per weight layer, k = 1..L.

    ``hidden_gain`` further scales layers k >= 2, which lets narrow
    activations (small Gaussian sigma) start out of saturation.
    """
    w = spec.widths
    out = []
    for k in range(1, len(w)):
        fan_in, fan_out = w[k - 1], w[k]
        if spec.activation.kind == "sine":
            bound = 1.0 / fan_in if k == 1 else math.sqrt(6.0 / fan_in) / spec.activation.omega0
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
        out.append(gain * bound * (hidden_gain if k >= 2 else 1.0))
    return out


def init_params(spec: NetworkSpec, seed, gain=1.0, hidden_gain=1.0) -> ParamVector:
    """Uniform weights scaled per activation, zero biases; deterministic in seed."""
    rng = np.random.default_rng(seed)
    bounds = init_bounds(spec, gain, hidden_gain)
    arrays = []
    for e in spec.layout():
        if e.role == "weight":
            a = bounds[e.layer - 1]
            arrays.append(rng.uniform(-a, a, size=e.shape))
        else:
            arrays.append(np.zeros(e.shape))
    return ParamVector.from_views(spec.layout(), arrays)
