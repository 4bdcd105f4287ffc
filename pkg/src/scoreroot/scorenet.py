"""Per-datum score networks, the mean network, and the debiased score.

A :class:`ScoreNetwork` is a plain ELU multilayer perceptron over
``(theta, x)`` (or over ``theta`` alone for the mean network) with an input
standardization folded into the stored object, so callers always work in
natural units.  A :class:`DebiasedScore` pairs a frozen score part with an
optional frozen mean part and exposes the aggregated score and Jacobian for
a whole dataset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore
from .diffcore import dual_add, dual_affine_in, dual_elu, dual_matmul
from .errors import DimensionMismatch

_MAGIC = b"LFSN1"
_ACT_ELU = 0


@dataclass(frozen=True)
class MlpSpec:
    """Layer geometry of a network: input width, hidden widths, output width."""

    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (32, 32)

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("dimensions must be positive")
        if len(self.hidden) < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("need at least one hidden layer of positive width")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def param_count(self):
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


def _elu(x):
    return np.where(x > 0.0, x, np.expm1(x))


def _elu_prime(x):
    return np.where(x > 0.0, 1.0, np.exp(x))


class _BoundMlp:
    """diffcore binding: parameter leaves plus a dual-aware forward pass."""

    def __init__(self, net, tape):
        self._tape = tape
        self._shift = tape.constant(net.input_shift.reshape(1, -1))
        self._inv_scale = tape.constant((1.0 / net.input_scale).reshape(1, -1))
        self.params = []
        self._layers = []
        for w, b in net.layers():
            wv = tape.leaf(w)
            bv = tape.leaf(b)
            self.params.extend([wv, bv])
            self._layers.append((wv, bv))

    def apply(self, x):
        h = dual_affine_in(x, self._shift, self._inv_scale)
        last = len(self._layers) - 1
        for i, (w, b) in enumerate(self._layers):
            h = dual_add(dual_matmul(h, w), b)
            if i < last:
                h = dual_elu(h)
        return h


class ScoreNetwork:
    """ELU MLP with folded input standardization and a freeze flag."""

    def __init__(self, spec: MlpSpec, params: np.ndarray,
                 input_shift=None, input_scale=None, frozen: bool = False):
        params = np.asarray(params, dtype=float)
        if params.shape != (spec.param_count,):
            raise DimensionMismatch(
                f"expected {spec.param_count} parameters, got {params.shape}")
        self.spec = spec
        self.params = params
        self.input_shift = (np.zeros(spec.input_dim) if input_shift is None
                            else np.asarray(input_shift, dtype=float))
        self.input_scale = (np.ones(spec.input_dim) if input_scale is None
                            else np.asarray(input_scale, dtype=float))
        if self.input_shift.shape != (spec.input_dim,) or self.input_scale.shape != (spec.input_dim,):
            raise DimensionMismatch("standardization moments do not match input_dim")
        self.frozen = frozen

    @classmethod
    def initialize(cls, spec: MlpSpec, rng: np.random.Generator):
        """Uniform Glorot weights, zero biases."""
        chunks = []
        dims = spec.layer_dims
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return cls(spec, np.concatenate(chunks))

    def layers(self):
        """Yield (weight, bias) views into the flat parameter vector."""
        dims = self.spec.layer_dims
        offset = 0
        out = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            w = self.params[offset: offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.params[offset: offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def set_standardization(self, shift, scale):
        if self.frozen:
            raise ValueError("network is frozen")
        shift = np.asarray(shift, dtype=float)
        scale = np.asarray(scale, dtype=float)
        if shift.shape != (self.spec.input_dim,) or scale.shape != (self.spec.input_dim,):
            raise DimensionMismatch("standardization moments do not match input_dim")
        if np.any(scale <= 0):
            raise ValueError("scales must be positive")
        self.input_shift = shift
        self.input_scale = scale

    def set_params(self, params):
        if self.frozen:
            raise ValueError("network is frozen")
        params = np.asarray(params, dtype=float)
        if params.shape != (self.spec.param_count,):
            raise DimensionMismatch("parameter vector has wrong length")
        self.params = params

    def freeze(self):
        self.params = self.params.copy()
        self.params.flags.writeable = False
        self.frozen = True
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Batched forward pass; ``x`` is ``(n, input_dim)``."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise DimensionMismatch(
                f"expected (n, {self.spec.input_dim}) inputs, got {x.shape}")
        h = (x - self.input_shift) / self.input_scale
        layers = self.layers()
        for i, (w, b) in enumerate(layers):
            h = h @ w + b
            if i < len(layers) - 1:
                h = _elu(h)
        return h

    def jacobian(self, x: np.ndarray, block: range) -> np.ndarray:
        """Input Jacobian over the ``block`` coordinates, shaped ``(n, out, len(block))``.

        Forward accumulation: one tangent per block coordinate carried through
        the layers, equivalent to the diffcore forward-mode sweeps.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise DimensionMismatch(
                f"expected (n, {self.spec.input_dim}) inputs, got {x.shape}")
        block = list(block)
        n = x.shape[0]
        h = (x - self.input_shift) / self.input_scale
        tang = np.zeros((1, len(block), self.spec.input_dim))
        for j, coord in enumerate(block):
            tang[0, j, coord] = 1.0 / self.input_scale[coord]
        tang = np.broadcast_to(tang, (n, len(block), self.spec.input_dim)).copy()
        layers = self.layers()
        for i, (w, b) in enumerate(layers):
            z = h @ w + b
            tang = tang @ w
            if i < len(layers) - 1:
                tang *= _elu_prime(z)[:, None, :]
                h = _elu(z)
            else:
                h = z
        return tang.transpose(0, 2, 1)

    def bind(self, tape):
        return _BoundMlp(self, tape)

    def fingerprint(self) -> bytes:
        return self.params.tobytes() + self.input_shift.tobytes() + self.input_scale.tobytes()


def eval_single(net: ScoreNetwork, theta, x) -> np.ndarray:
    """One forward evaluation at a single ``(theta, x)`` pair."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    joint = np.concatenate([theta, x])
    if joint.size != net.spec.input_dim:
        raise DimensionMismatch(
            f"theta+x has {joint.size} coordinates, net expects {net.spec.input_dim}")
    return net.forward(joint.reshape(1, -1))[0]


@dataclass
class AnalyticScore:
    """Exact per-datum score for test oracles and analytic benchmark models."""

    theta_dim: int
    data_dim: int
    score_fn: callable
    jac_fn: callable
    frozen: bool = True

    def per_datum(self, theta, data):
        return np.asarray(self.score_fn(np.asarray(theta, float), np.asarray(data, float)))

    def per_datum_jacobian(self, theta, data):
        return np.asarray(self.jac_fn(np.asarray(theta, float), np.asarray(data, float)))


class MlpScorePart:
    """Adapter giving a score MLP the per-datum interface over (theta, x).

    ``transform`` is an optional parameter-free map applied to the data block
    before it enters the network (see ``SimulatorModel.score_features``).
    """

    def __init__(self, net: ScoreNetwork, theta_dim: int, transform=None):
        self.net = net
        self.theta_dim = theta_dim
        self.transform = transform
        self.data_dim = net.spec.input_dim - theta_dim
        if self.data_dim < 1:
            raise DimensionMismatch("score network input must include data coordinates")

    @property
    def frozen(self):
        return self.net.frozen

    def _inputs(self, theta, data):
        data = np.atleast_2d(np.asarray(data, dtype=float))
        if self.transform is not None:
            data = self.transform(data)
        theta_block = np.broadcast_to(np.asarray(theta, float), (data.shape[0], self.theta_dim))
        return np.hstack([theta_block, data])

    def per_datum(self, theta, data):
        return self.net.forward(self._inputs(theta, data))

    def per_datum_jacobian(self, theta, data):
        return self.net.jacobian(self._inputs(theta, data), range(self.theta_dim))


class MlpMeanPart:
    """Adapter for the theta-only mean network."""

    def __init__(self, net: ScoreNetwork):
        self.net = net
        self.theta_dim = net.spec.input_dim

    @property
    def frozen(self):
        return self.net.frozen

    def value(self, theta):
        return self.net.forward(np.asarray(theta, float).reshape(1, -1))[0]

    def jacobian(self, theta):
        return self.net.jacobian(np.asarray(theta, float).reshape(1, -1),
                                 range(self.theta_dim))[0]


@dataclass
class DebiasedScore:
    """Score part minus an optional mean part, aggregated over a dataset."""

    score_part: object
    mean_part: object = None
    name: str = field(default="")

    def __post_init__(self):
        if not getattr(self.score_part, "frozen", True):
            raise ValueError("score part must be frozen")
        if self.mean_part is not None and not getattr(self.mean_part, "frozen", True):
            raise ValueError("mean part must be frozen")

    @property
    def theta_dim(self):
        return self.score_part.theta_dim

    def per_datum(self, theta, data) -> np.ndarray:
        """Debiased per-datum scores, ``(n, theta_dim)``."""
        vals = self.score_part.per_datum(theta, data)
        if self.mean_part is not None:
            vals = vals - self.mean_part.value(theta)
        return vals

    def eval_aggregate(self, theta, data, weights=None) -> np.ndarray:
        vals = self.per_datum(theta, data)
        if weights is None:
            return vals.sum(axis=0)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (vals.shape[0],):
            raise DimensionMismatch("weights length does not match dataset size")
        return weights @ vals

    def per_datum_jacobian(self, theta, data, include_mean: bool = True) -> np.ndarray:
        jac = self.score_part.per_datum_jacobian(theta, data)
        if include_mean and self.mean_part is not None:
            jac = jac - self.mean_part.jacobian(theta)
        return jac

    def aggregate_jacobian(self, theta, data, weights=None,
                           include_mean: bool = True) -> np.ndarray:
        jac = self.per_datum_jacobian(theta, data, include_mean=include_mean)
        if weights is None:
            return jac.sum(axis=0)
        weights = np.asarray(weights, dtype=float)
        return np.einsum("i,ijk->jk", weights, jac)


def save_network(net: ScoreNetwork, path):
    """Versioned binary layout: magic, layer dims, activation, flags, f64 payload."""
    dims = net.spec.layer_dims
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<I", _ACT_ELU))
        fh.write(struct.pack("<B", 1 if net.frozen else 0))
        fh.write(np.ascontiguousarray(net.params, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(net.input_shift, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(net.input_scale, dtype="<f8").tobytes())


def load_network(path) -> ScoreNetwork:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        (n_dims,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{n_dims}I", fh.read(4 * n_dims))
        (act,) = struct.unpack("<I", fh.read(4))
        if act != _ACT_ELU:
            raise ValueError(f"unknown activation tag {act}")
        (frozen,) = struct.unpack("<B", fh.read(1))
        spec = MlpSpec(input_dim=dims[0], output_dim=dims[-1], hidden=tuple(dims[1:-1]))
        params = np.frombuffer(fh.read(8 * spec.param_count), dtype="<f8").astype(float)
        shift = np.frombuffer(fh.read(8 * dims[0]), dtype="<f8").astype(float)
        scale = np.frombuffer(fh.read(8 * dims[0]), dtype="<f8").astype(float)
    net = ScoreNetwork(spec, params, shift, scale, frozen=False)
    if frozen:
        net.freeze()
    return net
