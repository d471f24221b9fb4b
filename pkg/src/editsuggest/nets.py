"""Feed-forward network builders and the three output heads.

An MLP here is a list of affine layers with tanh or relu between them and
a head tag that fixes how the final affine output is interpreted:

* ``gaussian``: output of width 2k splits into mean and log-variance,
* ``softmax``: output normalized to a probability vector,
* ``log_potential``: raw output used as unnormalized log-scores that are
  combined additively across observations before any normalization.

Parameters may be plain arrays or autodiff nodes; the apply functions work
on either, so the same code path serves evaluation and training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .dists import CategoricalParams, DiagGaussianParams

__all__ = [
    "ACTIVATIONS",
    "HEADS",
    "NetConfig",
    "MlpParams",
    "init_mlp",
    "apply_gaussian_head",
    "apply_softmax_head",
    "apply_log_softmax_head",
    "apply_log_potential_head",
    "mlp_param_items",
    "lift_mlp",
]

ACTIVATIONS = ("tanh", "relu")
HEADS = ("gaussian", "softmax", "log_potential")


@dataclass(frozen=True)
class NetConfig:
    """Architecture of one MLP; ``out_dim`` is the raw final-layer width."""

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "tanh"
    head: str = "gaussian"
    init_scale: float = 1.0

    def __post_init__(self):
        dims = (self.in_dim, *self.hidden, self.out_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")


@dataclass
class MlpParams:
    """Per-layer weights/biases, one activation tag per hidden layer, head tag."""

    weights: list
    biases: list
    activations: tuple[str, ...]
    head: str

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        if len(self.activations) != len(self.weights) - 1:
            raise ValueError("need one activation per hidden layer")
        for i in range(len(self.weights) - 1):
            w, w_next = _value(self.weights[i]), _value(self.weights[i + 1])
            if w.shape[1] != w_next.shape[0]:
                raise ValueError(f"layer {i} output {w.shape[1]} != layer {i+1} input")

    @property
    def in_dim(self) -> int:
        return _value(self.weights[0]).shape[0]

    @property
    def out_dim(self) -> int:
        return _value(self.weights[-1]).shape[1]


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)


def init_mlp(cfg: NetConfig, seed) -> MlpParams:
    """Gaussian init with std ``init_scale / sqrt(fan_in)`` per layer, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = (cfg.in_dim, *cfg.hidden, cfg.out_dim)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = cfg.init_scale / np.sqrt(fan_in)
        weights.append(rng.standard_normal((fan_in, fan_out)) * std)
        biases.append(np.zeros(fan_out))
    return MlpParams(
        weights=weights,
        biases=biases,
        activations=(cfg.activation,) * len(cfg.hidden),
        head=cfg.head,
    )


def _forward(params: MlpParams, x) -> Node:
    h = ad.as_node(x)
    if _value(h).shape[-1] != params.in_dim:
        raise ValueError(
            f"input dim {_value(h).shape[-1]} does not match net input {params.in_dim}"
        )
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.affine(h, w, b)
        if i < len(params.weights) - 1:
            h = ad.tanh(h) if params.activations[i] == "tanh" else ad.relu(h)
    return h


def _require_head(params: MlpParams, head: str) -> None:
    if params.head != head:
        raise ValueError(f"net has head {params.head!r}, expected {head!r}")


def apply_gaussian_head(params: MlpParams, x) -> DiagGaussianParams:
    """Run the net and split its output into mean and clamped log-variance."""
    _require_head(params, "gaussian")
    out = _forward(params, x)
    width = params.out_dim
    if width % 2 != 0:
        raise ValueError(f"gaussian head needs an even output width, got {width}")
    k = width // 2
    return DiagGaussianParams(
        mean=ad.slice_(out, 0, k, axis=-1),
        log_var=ad.slice_(out, k, width, axis=-1),
    )


def apply_softmax_head(params: MlpParams, x) -> CategoricalParams:
    _require_head(params, "softmax")
    return CategoricalParams(probs=ad.softmax(_forward(params, x)))


def apply_log_softmax_head(params: MlpParams, x) -> Node:
    """Log-probabilities from a softmax head (stable log-domain view)."""
    _require_head(params, "softmax")
    return ad.log_softmax(_forward(params, x))


def apply_log_potential_head(params: MlpParams, x) -> Node:
    """Unnormalized log-potentials; callers sum them across observations."""
    _require_head(params, "log_potential")
    return _forward(params, x)


def mlp_param_items(prefix: str, params: MlpParams):
    """Named (name, array) pairs, ``{prefix}.w{i}`` / ``{prefix}.b{i}``."""
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        yield f"{prefix}.w{i}", _value(w)
        yield f"{prefix}.b{i}", _value(b)


def lift_mlp(prefix: str, params: MlpParams, leaves: dict[str, Node]) -> MlpParams:
    """Copy of ``params`` whose arrays are parameter leaves, registered in ``leaves``."""
    weights, biases = [], []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        w_leaf = ad.param(_value(w), name=f"{prefix}.w{i}")
        b_leaf = ad.param(_value(b), name=f"{prefix}.b{i}")
        leaves[w_leaf.name] = w_leaf
        leaves[b_leaf.name] = b_leaf
        weights.append(w_leaf)
        biases.append(b_leaf)
    return MlpParams(
        weights=weights, biases=biases, activations=params.activations, head=params.head
    )
