"""Probability primitives: diagonal Gaussians, categoricals, Gaussian mixtures.

All operations build autodiff graphs and return a :class:`~editsuggest.autodiff.Node`
(read ``.value`` for the number), so log-densities and KL terms are
differentiable end to end.  Parameter containers accept either plain
float64 arrays or graph nodes; the latter keeps gradients flowing into
whatever produced the parameters.

Vector arguments may carry a leading batch axis: a density of a ``(B, D)``
input against ``(B, D)`` or ``(D,)`` parameters reduces over the last axis
and returns a ``(B,)`` node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, as_node

__all__ = [
    "LOG_VAR_MIN",
    "LOG_VAR_MAX",
    "DiagGaussianParams",
    "CategoricalParams",
    "GmmParams",
    "diag_gaussian_logpdf",
    "reparam_sample",
    "kl_diag_gaussians",
    "categorical_kl",
    "categorical_kl_from_logs",
    "gmm_logpdf",
]

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
_LOG_2PI = math.log(2.0 * math.pi)


def _raw(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


@dataclass
class DiagGaussianParams:
    """Mean and log-variance of a Gaussian with diagonal covariance.

    ``log_var`` is clamped to ``[-10, 10]`` at construction, which bounds
    each variance to ``[e^-10, e^10]`` and prevents likelihood collapse.
    """

    mean: object
    log_var: object

    def __post_init__(self):
        if _raw(self.mean).shape != _raw(self.log_var).shape:
            raise ValueError(
                f"mean shape {_raw(self.mean).shape} != log_var shape {_raw(self.log_var).shape}"
            )
        if isinstance(self.log_var, Node):
            self.log_var = ad.clip(self.log_var, LOG_VAR_MIN, LOG_VAR_MAX)
        else:
            self.log_var = np.clip(
                np.asarray(self.log_var, dtype=np.float64), LOG_VAR_MIN, LOG_VAR_MAX
            )

    @property
    def dim(self) -> int:
        return _raw(self.mean).shape[-1]


@dataclass
class CategoricalParams:
    """Probability vector over a finite set of outcomes."""

    probs: object

    def __post_init__(self):
        p = _raw(self.probs)
        if p.ndim < 1 or p.shape[-1] < 1:
            raise ValueError("categorical needs at least one outcome")
        if np.any(p < -1e-12):
            raise ValueError("categorical probabilities must be nonnegative")
        if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-12):
            raise ValueError("categorical probabilities must sum to 1")

    def __len__(self) -> int:
        return _raw(self.probs).shape[-1]


@dataclass
class GmmParams:
    """Mixture weights plus per-component diagonal Gaussians over one space."""

    weights: CategoricalParams
    components: list[DiagGaussianParams]

    def __post_init__(self):
        if len(self.components) < 1:
            raise ValueError("mixture needs at least one component")
        if len(self.weights) != len(self.components):
            raise ValueError(
                f"{len(self.weights)} weights for {len(self.components)} components"
            )
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError(f"components disagree on dimension: {sorted(dims)}")

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim


def _check_last_dim(a, b, what: str) -> None:
    if _raw(a).shape[-1] != _raw(b).shape[-1]:
        raise ValueError(
            f"{what}: dimension mismatch {_raw(a).shape[-1]} != {_raw(b).shape[-1]}"
        )


def diag_gaussian_logpdf(y, p: DiagGaussianParams) -> Node:
    """Exact log density of ``y`` under the diagonal Gaussian ``p``.

    Sum over the last axis of ``-0.5 * (log 2pi + log_var + (y-mean)^2 / var)``.
    """
    y = as_node(y)
    _check_last_dim(y, p.mean, "diag_gaussian_logpdf")
    diff = ad.sub(y, p.mean)
    quad = ad.mul(ad.mul(diff, diff), ad.exp(ad.mul(p.log_var, -1.0)))
    per_dim = ad.add(ad.add(quad, p.log_var), _LOG_2PI)
    return ad.mul(ad.reduce_sum(per_dim, axis=-1), -0.5)


def reparam_sample(p: DiagGaussianParams, noise) -> Node:
    """``mean + exp(log_var / 2) * noise`` for caller-supplied standard-normal noise.

    Keeping the noise an explicit argument makes sampling a deterministic,
    differentiable function of the parameters; gradients flow into both
    ``mean`` and ``log_var``.
    """
    noise = as_node(noise)
    _check_last_dim(noise, p.mean, "reparam_sample")
    return ad.add(p.mean, ad.mul(ad.exp(ad.mul(p.log_var, 0.5)), noise))


def kl_diag_gaussians(q: DiagGaussianParams, p: DiagGaussianParams) -> Node:
    """Closed-form KL(q || p) between diagonal Gaussians; zero iff q equals p."""
    _check_last_dim(q.mean, p.mean, "kl_diag_gaussians")
    lv_diff = ad.sub(q.log_var, p.log_var)
    mean_diff = ad.sub(q.mean, p.mean)
    quad = ad.mul(ad.mul(mean_diff, mean_diff), ad.exp(ad.mul(p.log_var, -1.0)))
    per_dim = ad.sub(ad.add(ad.exp(lv_diff), quad), ad.add(lv_diff, 1.0))
    return ad.mul(ad.reduce_sum(per_dim, axis=-1), 0.5)


def categorical_kl(q: CategoricalParams, p: CategoricalParams) -> Node:
    """KL(q || p) in nats with the convention ``0 * log 0 = 0``.

    Raises if the prior puts zero mass where ``q`` has mass.  With graph
    inputs the zero-mass convention is unavailable (log of an exact zero
    surfaces as a non-finite error); feed strictly positive simplexes or
    use :func:`categorical_kl_from_logs` on log-probabilities.
    """
    if len(q) != len(p):
        raise ValueError(f"length mismatch: {len(q)} != {len(p)}")
    q_raw, p_raw = _raw(q.probs), _raw(p.probs)
    if np.any((p_raw <= 0.0) & (q_raw > 0.0)):
        raise ValueError("prior has zero mass where q has mass")
    if isinstance(q.probs, Node) or isinstance(p.probs, Node):
        ratio = ad.sub(ad.log(q.probs), ad.log(p.probs))
        return ad.reduce_sum(ad.mul(q.probs, ratio), axis=-1)
    mask = q_raw > 0.0
    terms = np.zeros_like(q_raw)
    terms[mask] = q_raw[mask] * (np.log(q_raw[mask]) - np.log(p_raw[mask]))
    return ad.constant(terms.sum(axis=-1))


def categorical_kl_from_logs(log_q, log_p) -> Node:
    """KL between categoricals given as log-probability nodes (stable path)."""
    log_q, log_p = as_node(log_q), as_node(log_p)
    _check_last_dim(log_q, log_p, "categorical_kl_from_logs")
    return ad.reduce_sum(ad.mul(ad.exp(log_q), ad.sub(log_q, log_p)), axis=-1)


def gmm_logpdf(z, g: GmmParams) -> Node:
    """Log density of ``z`` under the mixture, via log-sum-exp over components.

    Mixture weights must be strictly positive (they come from a softmax
    everywhere in this package).
    """
    z = as_node(z)
    _check_last_dim(z, g.components[0].mean, "gmm_logpdf")
    cols = []
    for comp in g.components:
        lp = diag_gaussian_logpdf(z, comp)
        cols.append(ad.reshape(lp, lp.value.shape + (1,)))
    stacked = ad.concat(cols, axis=-1)
    log_w = ad.log(as_node(g.weights.probs))
    return ad.logsumexp(ad.add(stacked, log_w))
