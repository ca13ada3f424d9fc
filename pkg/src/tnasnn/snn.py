"""LIF neurons, network specs and time-unrolled forward execution."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, as_tensor, avgpool2, conv2d, custom_grad, get_default_dtype, matmul

CONV = "conv3x3"
POOL = "avgpool2"
FC = "fully_connected"
DROPOUT = "dropout"
LIF = "lif"
OUTPUT = "output_accumulator"

WEIGHTED = (CONV, FC, OUTPUT)

CIFARNET = "128C3-256C3-AP2-512C3-AP2-1023C3-512C3-1024FC-512FC-Out"


@dataclass(frozen=True)
class LifParams:
    alpha: float = 0.5
    theta: float = 1.0
    surrogate_width: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"LIF alpha must lie in [0, 1], got {self.alpha}")
        if self.theta <= 0:
            raise ConfigurationError(f"LIF theta must be positive, got {self.theta}")
        if self.surrogate_width <= 0:
            raise ConfigurationError(f"surrogate width must be positive, got {self.surrogate_width}")


@dataclass
class LifState:
    u: Tensor
    s_prev: Tensor

    @classmethod
    def zeros(cls, shape, dtype=None) -> "LifState":
        dtype = dtype or get_default_dtype()
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


def boxcar(u_minus_theta, width: float = 0.5):
    """Surrogate derivative of the spike: 0.5 inside ``|u - theta| <= width``, else 0."""
    if width <= 0:
        raise ContractError(f"boxcar width must be positive, got {width}")
    if isinstance(u_minus_theta, Tensor):
        return Tensor(boxcar(u_minus_theta.data, width))
    x = np.asarray(u_minus_theta)
    return np.where(np.abs(x) <= width, 0.5, 0.0).astype(x.dtype if x.dtype.kind == "f" else float)


def spike(u: Tensor, params: LifParams) -> Tensor:
    """Heaviside spike on the way forward, boxcar surrogate on the way back."""
    theta, width = params.theta, params.surrogate_width
    fired = Tensor((u.data >= theta).astype(u.dtype))
    return custom_grad(fired, u, lambda v: boxcar(v - theta, width))


def lif_step(state: LifState, input_current, params: LifParams) -> tuple[LifState, Tensor]:
    # the reset uses the spike emitted on the previous step
    current = as_tensor(input_current)
    if state.u.shape != current.shape or state.s_prev.shape != current.shape:
        raise DimensionError(
            f"LIF state {state.u.shape}/{state.s_prev.shape} does not match input {current.shape}")
    s = state.s_prev.data
    if not np.all((s == 0) | (s == 1)):
        raise ContractError("previous spikes must be exactly 0 or 1")
    u = params.alpha * (state.u * (1.0 - state.s_prev)) + current
    spikes = spike(u, params)
    return LifState(u, spikes), spikes


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    size: int | None = None
    p: float | None = None
    lif: LifParams | None = None


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    timesteps: int = 5
    arch: str = ""

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.timesteps < 1:
            raise ConfigurationError(f"timesteps must be >= 1, got {self.timesteps}")
        if not self.layers or self.layers[-1].kind != OUTPUT:
            raise ConfigurationError("the last layer must be the non-spiking output accumulator")
        for i, layer in enumerate(self.layers[:-1]):
            if layer.kind in (CONV, FC):
                nxt = next((l.kind for l in self.layers[i + 1:] if l.kind not in (POOL, DROPOUT)), None)
                if nxt != LIF:
                    raise ConfigurationError(f"layer {i} ({layer.kind}) is not followed by a LIF layer")

    @property
    def num_classes(self) -> int:
        return self.layers[-1].size

    def weighted_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in WEIGHTED]

    def lif_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind == LIF]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Weight and bias shapes keyed by parameter name, in layer order."""
        shapes: dict[str, tuple[int, ...]] = {}
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == CONV:
                if len(shape) != 3:
                    raise ConfigurationError(f"layer {i}: convolution after a flattened layer")
                shapes[weight_name(self, i)] = (layer.size, shape[0], 3, 3)
                shapes[bias_name(self, i)] = (layer.size,)
                shape = (layer.size,) + shape[1:]
            elif layer.kind == POOL:
                if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                    raise ConfigurationError(f"layer {i}: cannot pool feature map {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind in (FC, OUTPUT):
                fan_in = int(np.prod(shape))
                shapes[weight_name(self, i)] = (fan_in, layer.size)
                shapes[bias_name(self, i)] = (layer.size,)
                shape = (layer.size,)
        return shapes

    def with_theta(self, layer_index: int, theta: float) -> "NetworkSpec":
        layers = list(self.layers)
        layer = layers[layer_index]
        if layer.kind != LIF:
            raise ConfigurationError(f"layer {layer_index} is not a LIF layer")
        layers[layer_index] = replace(layer, lif=replace(layer.lif, theta=theta))
        return replace(self, layers=layers)


def _prefix(kind: str) -> str:
    return {CONV: "conv", FC: "fc", OUTPUT: "out"}[kind]


def weight_name(spec: NetworkSpec, index: int) -> str:
    return f"{_prefix(spec.layers[index].kind)}{index}.weight"


def bias_name(spec: NetworkSpec, index: int) -> str:
    return f"{_prefix(spec.layers[index].kind)}{index}.bias"


_TOKEN = re.compile(r"^(?:(\d+)C3|AP2|(\d+)FC|Out)$")


def parse_architecture(arch: str, input_shape, num_classes: int, timesteps: int = 5,
                       dropout_p: float = 0.2, lif: LifParams | None = None) -> NetworkSpec:
    """Build a :class:`NetworkSpec` from a string such as ``"128C3-AP2-512FC-Out"``.

    ``<n>C3`` adds a 3x3 convolution and a LIF layer, ``AP2`` a 2x2 average
    pool, ``<n>FC`` a fully connected layer, LIF layer and dropout, and
    ``Out`` the output accumulator with ``num_classes`` units.
    """
    lif = lif or LifParams()
    if not 0.0 <= dropout_p < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {dropout_p}")
    tokens = [t.strip() for t in arch.split("-") if t.strip()]
    if not tokens:
        raise ConfigurationError("empty architecture string")
    layers: list[LayerSpec] = []
    for pos, token in enumerate(tokens):
        m = _TOKEN.match(token)
        if m is None:
            raise ConfigurationError(f"unrecognised architecture token {token!r}")
        if token == "Out" and pos != len(tokens) - 1:
            raise ConfigurationError("'Out' must be the final token")
        if m.group(1):
            layers += [LayerSpec(CONV, int(m.group(1))), LayerSpec(LIF, lif=lif)]
        elif token == "AP2":
            layers.append(LayerSpec(POOL))
        elif m.group(2):
            layers += [LayerSpec(FC, int(m.group(2))), LayerSpec(LIF, lif=lif)]
            if dropout_p > 0:
                layers.append(LayerSpec(DROPOUT, p=dropout_p))
        else:
            layers.append(LayerSpec(OUTPUT, int(num_classes)))
    if tokens[-1] != "Out":
        raise ConfigurationError("architecture must end with 'Out'")
    spec = NetworkSpec(layers, tuple(input_shape), timesteps, arch)
    spec.param_shapes()
    return spec


def kaiming_init(spec: NetworkSpec, seed: int) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights (bound sqrt(1/fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def check_params(spec: NetworkSpec, params) -> None:
    expected = spec.param_shapes()
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ConfigurationError(f"parameter set is missing {missing}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ConfigurationError(
                f"parameter {name} has shape {tuple(params[name].shape)}, spec expects {shape}")


@dataclass
class ForwardTrace:
    """Optional per-call statistics gathered by :func:`forward_timesteps`."""
    spike_counts: dict[int, float] = field(default_factory=dict)
    neuron_counts: dict[int, int] = field(default_factory=dict)


def forward_timesteps(spec: NetworkSpec, params, x, T: int | None = None,
                      rng: np.random.Generator | None = None, train: bool = False,
                      trace: ForwardTrace | None = None) -> list[Tensor]:
    """Run the network for ``T`` steps and return the output layer's value per step.

    ``x`` is either a static batch ``N x C x H x W`` (presented unchanged at
    every step) or a temporal batch ``N x T x C x H x W``. LIF states start at
    zero. Dropout masks, active only when ``train`` is set, are drawn from
    ``rng`` once per call and shared by all steps.
    """
    T = spec.timesteps if T is None else int(T)
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    check_params(spec, params)
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    dtype = params[weight_name(spec, spec.weighted_layers()[0])].dtype
    in_dims = len(spec.input_shape)
    if data.ndim == in_dims + 1 and data.shape[1:] == spec.input_shape:
        temporal = False
    elif data.ndim == in_dims + 2 and data.shape[2:] == spec.input_shape:
        temporal = True
        if data.shape[1] != T:
            raise ConfigurationError(f"temporal input has {data.shape[1]} steps, T={T}")
    else:
        raise ConfigurationError(f"input shape {data.shape} does not match spec input {spec.input_shape}")
    data = data.astype(dtype, copy=False)
    if train and rng is None and any(l.kind == DROPOUT for l in spec.layers):
        raise ContractError("training-mode forward with dropout needs a seeded rng")

    states: dict[int, LifState] = {}
    masks: dict[int, Tensor] = {}
    first_current: Tensor | None = None
    first = spec.weighted_layers()[0]
    outputs = []
    for t in range(T):
        h = Tensor(data[:, t] if temporal else data)
        for i, layer in enumerate(spec.layers):
            kind = layer.kind
            if kind in WEIGHTED:
                if i == first and not temporal and first_current is not None:
                    # constant-current encoding: the first layer's drive never changes
                    h = first_current
                    continue
                w, b = params[weight_name(spec, i)], params[bias_name(spec, i)]
                if kind == CONV:
                    h = conv2d(h, w) + b.reshape(1, -1, 1, 1)
                else:
                    if h.ndim > 2:
                        h = h.flatten()
                    h = matmul(h, w) + b
                if i == first and not temporal:
                    first_current = h
            elif kind == POOL:
                h = avgpool2(h)
            elif kind == LIF:
                state = states.get(i)
                if state is None:
                    state = LifState.zeros(h.shape, h.dtype)
                states[i], h = lif_step(state, h, layer.lif)
                if trace is not None:
                    trace.spike_counts[i] = trace.spike_counts.get(i, 0.0) + float(h.data.sum())
                    trace.neuron_counts[i] = int(np.prod(h.shape[1:]))
            elif kind == DROPOUT:
                if not train or not layer.p:
                    continue
                mask = masks.get(i)
                if mask is None:
                    keep = rng.random(h.shape) >= layer.p
                    mask = masks[i] = Tensor(keep.astype(h.dtype) / (1.0 - layer.p))
                h = h * mask
        outputs.append(h)
    return outputs


def summed_logits(outputs: list[Tensor]) -> Tensor:
    total = outputs[0]
    for out in outputs[1:]:
        total = total + out
    return total
