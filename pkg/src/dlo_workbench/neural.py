"""
Dense networks for the actor and the critic.

Forward pass, exact reverse-mode gradients, ADAM and Polyak averaging over
plain numpy arrays in double precision. Rows are samples; a 1-D input is
treated as a batch of one and returned as 1-D.

Gradients are values: `backward` never touches the weights, so the trainer
can sum gradients across replicas before any update is applied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, DimensionMismatchError, OptimizerError

logger = logging.getLogger(__name__)

MLP_FORMAT_VERSION = "mlp v1"
ADAM_FORMAT_VERSION = "adam v1"
FINAL_LAYER_INIT = 3e-3

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("tanh", "identity")

_DTYPE = np.dtype("<f8")


# ============================================================
# Domain types
# ============================================================

@dataclass(frozen=True)
class MlpSpec:
    """Layer layout of a fully connected network."""

    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (256, 256, 256)
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or self.output_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise DimensionMismatchError(f"layer widths must be > 0, got {self.layer_dims}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unsupported output activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (int(self.input_dim), *self.hidden, int(self.output_dim))

    def spec_line(self) -> str:
        hidden = ",".join(str(h) for h in self.hidden)
        return (
            f"spec input={self.input_dim} hidden={hidden} output={self.output_dim}"
            f" hidden_activation={self.hidden_activation}"
            f" output_activation={self.output_activation}"
        )

    @classmethod
    def from_spec_line(cls, line: str) -> MlpSpec:
        parts = line.split()
        if not parts or parts[0] != "spec":
            raise CheckpointFormatError(f"expected a spec line, got {line!r}")
        try:
            fields_ = dict(p.split("=", 1) for p in parts[1:])
            hidden = tuple(int(h) for h in fields_["hidden"].split(",") if h)
            return cls(
                input_dim=int(fields_["input"]),
                output_dim=int(fields_["output"]),
                hidden=hidden,
                hidden_activation=fields_["hidden_activation"],
                output_activation=fields_["output_activation"],
            )
        except (KeyError, ValueError) as exc:
            raise CheckpointFormatError(f"malformed spec line {line!r}: {exc}") from exc


@dataclass
class MlpWeights:
    """Per-layer weight matrices (fan_in, fan_out) and bias vectors."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    version: int = field(default=0, compare=False)

    def copy(self) -> MlpWeights:
        return MlpWeights(
            self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )

    def arrays(self):
        """Yield (kind, layer, array) in serialization order."""
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield "weight", layer, w
            yield "bias", layer, b

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, _, a in self.arrays())


@dataclass
class MlpGradients:
    """Same shapes as the paired MlpWeights."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: MlpWeights) -> MlpGradients:
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def copy(self) -> MlpGradients:
        return MlpGradients([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self):
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield "weight", layer, w
            yield "bias", layer, b

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, _, a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, _, a in self.arrays()])


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations retained for `backward`."""

    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    output: np.ndarray
    single: bool
    owner: int
    version: int


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_weights: list[np.ndarray] = field(default_factory=list)
    m_biases: list[np.ndarray] = field(default_factory=list)
    v_weights: list[np.ndarray] = field(default_factory=list)
    v_biases: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_weights(cls, net: MlpWeights, learning_rate: float, **kwargs) -> AdamState:
        return cls(
            learning_rate=float(learning_rate),
            m_weights=[np.zeros_like(w) for w in net.weights],
            m_biases=[np.zeros_like(b) for b in net.biases],
            v_weights=[np.zeros_like(w) for w in net.weights],
            v_biases=[np.zeros_like(b) for b in net.biases],
            **kwargs,
        )

    def copy(self) -> AdamState:
        return AdamState(
            self.learning_rate, self.beta1, self.beta2, self.eps, self.step,
            [a.copy() for a in self.m_weights], [a.copy() for a in self.m_biases],
            [a.copy() for a in self.v_weights], [a.copy() for a in self.v_biases],
        )

    def arrays(self):
        for name in ("m_weights", "m_biases", "v_weights", "v_biases"):
            for layer, a in enumerate(getattr(self, name)):
                yield name, layer, a


# ============================================================
# Initialization and forward/backward
# ============================================================

def init_weights(spec: MlpSpec, seed) -> MlpWeights:
    """
    Hidden layers uniform in +-1/sqrt(fan_in), final layer uniform in +-3e-3.

    Args:
        spec: Network layout
        seed: Anything numpy's default_rng accepts (int or int sequence)

    Returns:
        Fresh weights, bit-identical for identical seeds
    """
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = layer == len(dims) - 2
        bound = FINAL_LAYER_INIT if last else 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpWeights(spec, weights, biases)


def forward(net: MlpWeights, x) -> tuple[np.ndarray, ForwardCache]:
    """Affine, ReLU per hidden layer, affine, output activation."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.ndim != 2 or h.shape[1] != net.spec.input_dim:
        raise DimensionMismatchError(
            f"network expects input dim {net.spec.input_dim}, got shape {x.shape}"
        )
    inputs, pre = [], []
    last = len(net.weights) - 1
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        if layer < last:
            h = np.maximum(z, 0.0)
        elif net.spec.output_activation == "tanh":
            h = np.tanh(z)
        else:
            h = z
    cache = ForwardCache(inputs, pre, h, single, id(net), net.version)
    return (h[0] if single else h), cache


def backward(
    net: MlpWeights, cache: ForwardCache, output_grad
) -> tuple[MlpGradients, np.ndarray]:
    """
    Reverse-mode gradients of sum(output * output_grad).

    Returns:
        (parameter gradients, gradient with respect to the network input)
    """
    if cache.owner != id(net) or cache.version != net.version:
        raise DimensionMismatchError("forward cache does not belong to these weights (stale)")
    g = np.asarray(output_grad, dtype=np.float64)
    g = g.reshape(1, -1) if cache.single else g
    if g.shape != cache.output.shape:
        raise DimensionMismatchError(
            f"output_grad shape {g.shape} does not match output shape {cache.output.shape}"
        )
    if net.spec.output_activation == "tanh":
        g = g * (1.0 - cache.output * cache.output)

    n_layers = len(net.weights)
    grad_w: list[np.ndarray] = [None] * n_layers
    grad_b: list[np.ndarray] = [None] * n_layers
    for layer in range(n_layers - 1, -1, -1):
        grad_w[layer] = cache.inputs[layer].T @ g
        grad_b[layer] = g.sum(axis=0)
        g = g @ net.weights[layer].T
        if layer > 0:
            g = g * (cache.pre_activations[layer - 1] > 0.0)
    input_grad = g[0] if cache.single else g
    return MlpGradients(grad_w, grad_b), input_grad


# ============================================================
# Gradient arithmetic
# ============================================================

def _check_congruent(a, b, what: str) -> None:
    shapes_a = [x.shape for _, _, x in a.arrays()]
    shapes_b = [x.shape for _, _, x in b.arrays()]
    if shapes_a != shapes_b:
        raise DimensionMismatchError(f"{what}: shapes {shapes_a} vs {shapes_b}")


def add_gradients(a: MlpGradients, b: MlpGradients) -> MlpGradients:
    _check_congruent(a, b, "cannot add gradients")
    return MlpGradients(
        [x + y for x, y in zip(a.weights, b.weights)],
        [x + y for x, y in zip(a.biases, b.biases)],
    )


def scale_gradients(g: MlpGradients, factor: float) -> MlpGradients:
    return MlpGradients([w * factor for w in g.weights], [b * factor for b in g.biases])


# ============================================================
# Optimizer and target maintenance
# ============================================================

def adam_step(
    net: MlpWeights, grads: MlpGradients, state: AdamState
) -> tuple[MlpWeights, AdamState]:
    """One bias-corrected ADAM update, applied in place; returns (net, state)."""
    _check_congruent(net, grads, "gradients do not match weights")
    if not grads.all_finite():
        raise OptimizerError("non-finite gradient passed to adam_step")
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    pairs = (
        (net.weights, grads.weights, state.m_weights, state.v_weights),
        (net.biases, grads.biases, state.m_biases, state.v_biases),
    )
    for params, gs, ms, vs in pairs:
        for p, g, m, v in zip(params, gs, ms, vs):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
            p -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    net.version += 1
    return net, state


def polyak_update(target: MlpWeights, online: MlpWeights, tau: float) -> MlpWeights:
    """w_T <- tau * w + (1 - tau) * w_T for every parameter."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    _check_congruent(target, online, "target and online networks differ")
    target.weights = [tau * w + (1.0 - tau) * wt for w, wt in zip(online.weights, target.weights)]
    target.biases = [tau * b + (1.0 - tau) * bt for b, bt in zip(online.biases, target.biases)]
    target.version += 1
    return target


def weight_distance(a: MlpWeights, b: MlpWeights) -> float:
    """Euclidean norm of the difference of all parameters."""
    _check_congruent(a, b, "cannot compare weights")
    return float(np.sqrt(sum(np.sum((x - y) ** 2) for (_, _, x), (_, _, y)
                             in zip(a.arrays(), b.arrays()))))


# ============================================================
# Serialization
# ============================================================

def serialize_weights(net: MlpWeights) -> bytes:
    """
    `mlp v1` header, spec line, dims line, then little-endian float64 blocks
    (per layer: weight matrix row-major, then bias).
    """
    dims = " ".join(str(d) for d in net.spec.layer_dims)
    header = f"{MLP_FORMAT_VERSION}\n{net.spec.spec_line()}\ndims {dims}\n".encode()
    body = b"".join(np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for _, _, a in net.arrays())
    return header + body


def _split_header(data: bytes, n_lines: int) -> tuple[list[str], bytes]:
    lines = []
    rest = data
    for _ in range(n_lines):
        head, sep, rest = rest.partition(b"\n")
        if not sep:
            raise CheckpointFormatError("truncated header")
        lines.append(head.decode("ascii", errors="replace"))
    return lines, rest


def deserialize_weights(data: bytes, expected: MlpSpec | None = None) -> MlpWeights:
    """Inverse of `serialize_weights`; bit-exact."""
    (version, spec_line, dims_line), body = _split_header(data, 3)
    if version != MLP_FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported network format {version!r}")
    spec = MlpSpec.from_spec_line(spec_line)
    dims = tuple(int(d) for d in dims_line.split()[1:])
    if dims != spec.layer_dims:
        raise CheckpointFormatError(f"dims line {dims} disagrees with spec {spec.layer_dims}")
    if expected is not None and spec != expected:
        raise DimensionMismatchError(
            f"checkpoint network {spec.layer_dims} does not match expected {expected.layer_dims}"
        )
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        for shape, out in (((fan_in, fan_out), weights), ((fan_out,), biases)):
            count = int(np.prod(shape))
            chunk = body[offset: offset + 8 * count]
            if len(chunk) != 8 * count:
                raise CheckpointFormatError("network payload truncated")
            out.append(np.frombuffer(chunk, dtype=_DTYPE).astype(np.float64).reshape(shape))
            offset += 8 * count
    if offset != len(body):
        raise CheckpointFormatError(f"{len(body) - offset} trailing bytes after network payload")
    return MlpWeights(spec, weights, biases)


def save_weights(net: MlpWeights, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_weights(net))
    return path


def load_weights(path: str | Path, expected: MlpSpec | None = None) -> MlpWeights:
    return deserialize_weights(Path(path).read_bytes(), expected)


def serialize_adam(state: AdamState) -> bytes:
    header = (
        f"{ADAM_FORMAT_VERSION}\n"
        f"lr={state.learning_rate!r} beta1={state.beta1!r} beta2={state.beta2!r}"
        f" eps={state.eps!r} step={state.step}\n"
    ).encode()
    body = b"".join(np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for _, _, a in state.arrays())
    return header + body


def deserialize_adam(data: bytes, net: MlpWeights) -> AdamState:
    """Moment shapes are taken from the paired network."""
    (version, params), body = _split_header(data, 2)
    if version != ADAM_FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported optimizer format {version!r}")
    try:
        values = dict(p.split("=", 1) for p in params.split())
        state = AdamState.for_weights(
            net,
            float(values["lr"]),
            beta1=float(values["beta1"]),
            beta2=float(values["beta2"]),
            eps=float(values["eps"]),
        )
        state.step = int(values["step"])
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"malformed optimizer header {params!r}") from exc
    offset = 0
    for _, _, a in state.arrays():
        chunk = body[offset: offset + 8 * a.size]
        if len(chunk) != 8 * a.size:
            raise CheckpointFormatError("optimizer payload truncated")
        a[...] = np.frombuffer(chunk, dtype=_DTYPE).reshape(a.shape)
        offset += 8 * a.size
    if offset != len(body):
        raise CheckpointFormatError("trailing bytes after optimizer payload")
    return state


# ============================================================
# Section container
# ============================================================

def pack_sections(header: str, sections: dict[str, bytes]) -> bytes:
    """Concatenate named binary sections behind a one-line header."""
    parts = [f"{header} sections={len(sections)}\n".encode()]
    for name, payload in sections.items():
        if " " in name or "\n" in name:
            raise ValueError(f"invalid section name {name!r}")
        parts.append(f"section {name} {len(payload)}\n".encode())
        parts.append(payload)
        parts.append(b"\n")
    return b"".join(parts)


def unpack_sections(data: bytes, header: str) -> dict[str, bytes]:
    first, sep, rest = data.partition(b"\n")
    words = first.decode("ascii", errors="replace").rsplit(" ", 1)
    if not sep or len(words) != 2 or words[0] != header or not words[1].startswith("sections="):
        raise CheckpointFormatError(f"expected {header!r} container, got {first[:40]!r}")
    count = int(words[1].split("=", 1)[1])
    sections: dict[str, bytes] = {}
    for _ in range(count):
        line, sep, rest = rest.partition(b"\n")
        parts = line.decode("ascii", errors="replace").split()
        if not sep or len(parts) != 3 or parts[0] != "section":
            raise CheckpointFormatError(f"malformed section header {line[:40]!r}")
        size = int(parts[2])
        payload, rest = rest[:size], rest[size:]
        if len(payload) != size or rest[:1] != b"\n":
            raise CheckpointFormatError(f"section {parts[1]!r} truncated")
        sections[parts[1]] = payload
        rest = rest[1:]
    return sections
