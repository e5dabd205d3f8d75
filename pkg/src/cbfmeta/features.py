"""Feed-forward basis network R^2 -> R^d with exact manual gradients.

The network is the shared feature map under the Bayesian last layer: hidden
layers with a smooth activation, linear output. Besides the forward pass it
exposes the exact Jacobian with respect to the input point (needed for
barrier gradients) and the exact parameter gradient given per-output
cotangents (needed for meta-training). tanh is the default activation
because the learned barrier must be continuously differentiable; relu is
available but non-smooth at zero.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import container
from .errors import FormatMismatch

_MAGIC = b"CBFM-FNET-1\n"


def _tanh(a):
    return np.tanh(a)


def _tanh_deriv(a):
    t = np.tanh(a)
    return 1.0 - t * t


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_deriv(a):
    return (a > 0.0).astype(float)


_ACTIVATIONS = {"tanh": (_tanh, _tanh_deriv), "relu": (_relu, _relu_deriv)}


@dataclass(frozen=True)
class NetSpec:
    input_dim: int = 2
    hidden: tuple[int, ...] = (256, 256, 256)
    output_dim: int = 32
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden=tuple(d["hidden"]),
            output_dim=int(d["output_dim"]),
            activation=d["activation"],
        )


@dataclass(eq=False)
class NetParams:
    """Per-layer weights/biases, flat-indexable as one parameter vector."""

    spec: NetSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dims = self.spec.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("layer count inconsistent with spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} shapes inconsistent with spec")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def n_params(spec: NetSpec) -> int:
    dims = spec.layer_dims
    return sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(len(dims) - 1))


def init_params(spec: NetSpec, rng: np.random.Generator) -> NetParams:
    """Per-layer uniform fan-in initialization, reproducible from the rng."""
    dims = spec.layer_dims
    weights, biases = [], []
    for i in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[i])
        weights.append(rng.uniform(-bound, bound, size=(dims[i + 1], dims[i])))
        biases.append(rng.uniform(-bound, bound, size=dims[i + 1]))
    return NetParams(spec, weights, biases)


def to_flat(params: NetParams) -> np.ndarray:
    chunks = []
    for w, b in zip(params.weights, params.biases):
        chunks.append(w.ravel())
        chunks.append(b)
    return np.concatenate(chunks) if chunks else np.empty(0)


def from_flat(spec: NetSpec, vec: np.ndarray) -> NetParams:
    if len(vec) != n_params(spec):
        raise ValueError("flat vector length inconsistent with spec")
    dims = spec.layer_dims
    weights, biases, pos = [], [], 0
    for i in range(len(dims) - 1):
        size = dims[i + 1] * dims[i]
        weights.append(vec[pos : pos + size].reshape(dims[i + 1], dims[i]).copy())
        pos += size
        biases.append(vec[pos : pos + dims[i + 1]].copy())
        pos += dims[i + 1]
    return NetParams(spec, weights, biases)


def _forward_cache(params: NetParams, z: np.ndarray):
    """Forward pass keeping hidden pre-activations and activations."""
    act, _ = _ACTIVATIONS[params.spec.activation]
    x = z
    pre, acts = [], [z]
    for i in range(params.n_layers - 1):
        a = x @ params.weights[i].T + params.biases[i]
        pre.append(a)
        x = act(a)
        acts.append(x)
    out = x @ params.weights[-1].T + params.biases[-1]
    return out, pre, acts


def forward(params: NetParams, z):
    """Basis vector phi(z); accepts a single point (2,) or a batch (n, 2)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    out, _, _ = _forward_cache(params, np.atleast_2d(z))
    return out[0] if single else out


def input_jacobian(params: NetParams, z) -> np.ndarray:
    """Exact Jacobian of phi with respect to z: (d, input_dim)."""
    phi, jac = forward_and_jacobian(params, z)
    return jac


def forward_and_jacobian(params: NetParams, z):
    """phi(z) and d phi / d z in one pass.

    Single point: ((d,), (d, in)). Batch (n, 2): ((n, d), (n, d, in)).
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    _, deriv = _ACTIVATIONS[params.spec.activation]
    x = zb
    jac = np.broadcast_to(
        np.eye(params.spec.input_dim), (len(zb), params.spec.input_dim, params.spec.input_dim)
    ).copy()
    act, _ = _ACTIVATIONS[params.spec.activation]
    for i in range(params.n_layers - 1):
        a = x @ params.weights[i].T + params.biases[i]
        jac = np.einsum("oh,nhi->noi", params.weights[i], jac)
        jac *= deriv(a)[:, :, None]
        x = act(a)
    out = x @ params.weights[-1].T + params.biases[-1]
    jac = np.einsum("oh,nhi->noi", params.weights[-1], jac)
    if single:
        return out[0], jac[0]
    return out, jac


def parameter_gradient(params: NetParams, z, adjoints) -> np.ndarray:
    """Exact gradient of sum_n adjoint_n . phi(z_n) over the flat parameters.

    ``adjoints`` holds one cotangent per output per batch row, shape (n, d).
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    adjoints = np.atleast_2d(np.asarray(adjoints, dtype=float))
    if len(z) == 0:
        raise ValueError("batch must be nonempty")
    if adjoints.shape != (len(z), params.spec.output_dim):
        raise ValueError("adjoint shape inconsistent with batch and spec")
    _, deriv = _ACTIVATIONS[params.spec.activation]
    _, pre, acts = _forward_cache(params, z)
    grads_w = [None] * params.n_layers
    grads_b = [None] * params.n_layers
    delta = adjoints
    for i in range(params.n_layers - 1, -1, -1):
        grads_w[i] = delta.T @ acts[i]
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * deriv(pre[i - 1])
    chunks = []
    for gw, gb in zip(grads_w, grads_b):
        chunks.append(gw.ravel())
        chunks.append(gb)
    return np.concatenate(chunks)


def save(params: NetParams, path) -> None:
    """Write a checkpoint; load(save(p)) is bit-exact."""
    arrays = []
    for w, b in zip(params.weights, params.biases):
        arrays.append(w)
        arrays.append(b)
    container.write_file(path, _MAGIC, {"spec": params.spec.to_dict()}, arrays)


def load(path) -> NetParams:
    meta, arrays = container.read_file(path, _MAGIC)
    return _params_from_payload(meta, arrays)


def loads(data: bytes) -> NetParams:
    meta, arrays = container.unpack(data, _MAGIC)
    return _params_from_payload(meta, arrays)


def _params_from_payload(meta: dict, arrays: list[np.ndarray]) -> NetParams:
    try:
        spec = NetSpec.from_dict(meta["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatMismatch("invalid spec header") from exc
    if len(arrays) != 2 * (len(spec.hidden) + 1):
        raise FormatMismatch("array count inconsistent with spec")
    weights = arrays[0::2]
    biases = arrays[1::2]
    try:
        return NetParams(spec, list(weights), list(biases))
    except ValueError as exc:
        raise FormatMismatch(str(exc)) from exc
