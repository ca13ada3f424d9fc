"""Delayed ternary (or sign-binary) weight compression with straight-through updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import snn
from .errors import ConfigurationError, ContractError
from .tensor import Tensor, custom_grad

COMPRESSION_MODES = ("ternary", "binary_sign")


def ternarize(w, delta: float):
    """Map weights to -1 below ``-delta``, +1 above ``delta`` and 0 in between (inclusive)."""
    if not delta > 0:
        raise ContractError(f"delta must be positive, got {delta}")
    if isinstance(w, Tensor):
        return Tensor(ternarize(w.data, delta))
    w = np.asarray(w)
    out = np.zeros_like(w, dtype=w.dtype if w.dtype.kind == "f" else np.float64)
    out[w > delta] = 1.0
    out[w < -delta] = -1.0
    return out


def binarize_sign(w):
    """sign(w) with zero mapped to +1, so the result lies in {-1, +1}."""
    if isinstance(w, Tensor):
        return Tensor(binarize_sign(w.data))
    w = np.asarray(w)
    return np.where(w < 0, -1.0, 1.0).astype(w.dtype if w.dtype.kind == "f" else np.float64)


@dataclass
class TernaryPolicy:
    delta: float = 0.1
    start_epoch: int = 150
    exempt_layers: frozenset | None = None  # weighted-layer ordinals; None = first and last
    mode: str = "ternary"

    def __post_init__(self):
        if self.mode not in COMPRESSION_MODES:
            raise ConfigurationError(f"compression mode must be one of {COMPRESSION_MODES}")
        if self.mode == "ternary" and not self.delta > 0:
            raise ConfigurationError(f"ternary delta must be positive, got {self.delta}")
        if self.start_epoch < 0:
            raise ConfigurationError("start_epoch must be >= 0")
        if self.exempt_layers is not None:
            self.exempt_layers = frozenset(int(i) for i in self.exempt_layers)

    def quantize(self, w):
        return binarize_sign(w) if self.mode == "binary_sign" else ternarize(w, self.delta)

    def exempt_names(self, spec: snn.NetworkSpec) -> set[str]:
        weighted = spec.weighted_layers()
        ordinals = {0, len(weighted) - 1} if self.exempt_layers is None else self.exempt_layers
        exempt = set()
        for k in ordinals:
            if not -len(weighted) <= k < len(weighted):
                raise ConfigurationError(f"exempt layer {k} out of range for {len(weighted)} weighted layers")
            exempt.add(snn.weight_name(spec, weighted[k]))
        return exempt


@dataclass
class QuantizedView:
    latent: Tensor
    deployed: np.ndarray

    @classmethod
    def of(cls, latent: Tensor, policy: TernaryPolicy) -> "QuantizedView":
        return cls(latent, policy.quantize(latent.data))


def _straight_through(g):
    return np.ones_like(g)


@dataclass
class CompressionState:
    spec: snn.NetworkSpec
    policy: TernaryPolicy
    views: dict[str, QuantizedView] = field(default_factory=dict)
    active: bool = False
    start_epoch: int | None = None

    def refresh(self) -> None:
        """Re-derive every deployed tensor from its (just updated) latent weights."""
        for view in self.views.values():
            view.deployed = self.policy.quantize(view.latent.data)

    def forward_params(self, params: dict[str, Tensor]) -> dict[str, Tensor]:
        """Parameters for a recorded forward pass: deployed values, identity gradient to latents."""
        if not self.active:
            return params
        live = dict(params)
        for name, view in self.views.items():
            live[name] = custom_grad(Tensor(view.deployed), view.latent, _straight_through)
        return live

    def deployed_params(self, params: dict[str, Tensor]) -> dict[str, Tensor]:
        if not self.active:
            return params
        live = dict(params)
        for name, view in self.views.items():
            live[name] = Tensor(view.deployed)
        return live


def activate_compression(spec: snn.NetworkSpec, params: dict[str, Tensor], policy: TernaryPolicy,
                         epoch: int) -> CompressionState:
    """Install quantized views on every non-exempt weight once ``epoch`` reaches the start.

    Before ``policy.start_epoch`` the returned state is inactive and the model
    is untouched. Biases and exempt layers always stay full precision.
    """
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    exempt = policy.exempt_names(spec)
    targets = [snn.weight_name(spec, i) for i in spec.weighted_layers()
               if snn.weight_name(spec, i) not in exempt]
    if not targets:
        raise ConfigurationError("every weighted layer is exempt; nothing to compress")
    state = CompressionState(spec, policy)
    if epoch < policy.start_epoch:
        return state
    snn.check_params(spec, params)
    state.views = {name: QuantizedView.of(params[name], policy) for name in targets}
    state.active = True
    state.start_epoch = epoch
    return state


def tna_ternary_handoff(spec: snn.NetworkSpec, base: dict[str, Tensor], twins, policy: TernaryPolicy,
                        mode: str, epoch: int) -> CompressionState:
    """Compress the base network while its twin(s) keep full-precision weights."""
    if mode != "tna":
        raise ConfigurationError(f"the twin hand-off needs mode=tna, got {mode!r}")
    if epoch < policy.start_epoch:
        raise ContractError(f"hand-off at epoch {epoch} precedes start_epoch {policy.start_epoch}")
    if isinstance(twins, dict):
        twins = [twins]
    if not twins:
        raise ConfigurationError("the hand-off needs at least one twin network")
    if any(twin is base for twin in twins):
        raise ConfigurationError("twin and base must be distinct parameter sets")
    return activate_compression(spec, base, policy, epoch)


def sparsity_report(state: CompressionState) -> dict[str, float]:
    if not state.active:
        raise ContractError("sparsity_report needs an active compression state")
    return {name: float(np.mean(view.deployed == 0)) for name, view in state.views.items()}
