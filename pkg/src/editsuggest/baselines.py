"""Comparison models: a unimodal Gaussian MLP regressor and a mixture
density network (MDN).

Both are trained by exact conditional log-likelihood on the identical
datasets, splits, and seeds as the mixture VAE (the fair-comparison
contract lives in the CLI).  The Gaussian MLP demonstrates the averaging
pathology of unimodal predictors on multimodal edits; the MDN emits the
weights, means, and variances of a conditional Gaussian mixture directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nets
from .cgm_vae import ModelConfig, _gauss_rows_logpdf, _stack_records
from ._training import TrainConfig, TrainingDiverged, run_training
from .seeding import stream_rng

__all__ = [
    "MDN_LOGIT_CLAMP",
    "GaussianMlpModel",
    "MdnModel",
    "init_gaussian_mlp",
    "init_mdn",
    "gaussian_mlp_loglik",
    "train_gaussian_mlp",
    "mdn_loglik",
    "mdn_sample",
    "train_mdn",
]

# keeps every mixing weight above ~1e-6 of the dominant one, so logs of
# emitted weights never hit zero
MDN_LOGIT_CLAMP = 6.9


@dataclass
class GaussianMlpModel:
    """Single Gaussian head over sliders, conditioned on features only."""

    config: ModelConfig
    net: nets.MlpParams
    train_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.net.head != "gaussian":
            raise ValueError("Gaussian MLP needs a gaussian head")
        if self.net.in_dim != self.config.x_dim or self.net.out_dim != 2 * self.config.y_dim:
            raise ValueError("net dimensions disagree with config")

    def param_dict(self) -> dict[str, np.ndarray]:
        return dict(nets.mlp_param_items("net", self.net))

    def with_params(self, params: dict[str, np.ndarray]) -> "GaussianMlpModel":
        return replace(self, net=_mlp_from(params, "net", self.net))


@dataclass
class MdnModel:
    """Net emitting M mixing logits, M slider means, and M slider log-variances."""

    config: ModelConfig
    n_mixture: int
    net: nets.MlpParams
    train_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_mixture < 1:
            raise ValueError("need at least one mixture component")
        expected = self.n_mixture * (1 + 2 * self.config.y_dim)
        if self.net.in_dim != self.config.x_dim or self.net.out_dim != expected:
            raise ValueError(
                f"MDN output width must be M*(1 + 2*y_dim) = {expected}, got {self.net.out_dim}"
            )

    def param_dict(self) -> dict[str, np.ndarray]:
        return dict(nets.mlp_param_items("net", self.net))

    def with_params(self, params: dict[str, np.ndarray]) -> "MdnModel":
        return replace(self, net=_mlp_from(params, "net", self.net))


def _mlp_from(params: dict, prefix: str, template: nets.MlpParams) -> nets.MlpParams:
    n_layers = len(template.weights)
    return nets.MlpParams(
        weights=[params[f"{prefix}.w{i}"] for i in range(n_layers)],
        biases=[params[f"{prefix}.b{i}"] for i in range(n_layers)],
        activations=template.activations,
        head=template.head,
    )


def gaussian_mlp_loglik(x, y, model: GaussianMlpModel) -> ad.Node:
    """Exact Gaussian log-likelihood; per-record vector for batched rows."""
    return _gaussian_loglik_net(model.net, x, y)


def _gaussian_loglik_net(net, x, y) -> ad.Node:
    from .dists import diag_gaussian_logpdf

    return diag_gaussian_logpdf(y, nets.apply_gaussian_head(net, x))


def _mdn_heads(net, x, n_mixture: int, y_dim: int):
    """Split the raw net output into clamped logits, means, and log-variances.

    Batched input (B, Dx) yields logits (B, M), means (B, M, Dy), and
    log-variances (B, M, Dy) as graph nodes.
    """
    out = nets.apply_log_potential_head(net, x)
    batched = out.value.ndim == 2
    b = out.value.shape[0] if batched else 1
    m, dy = n_mixture, y_dim
    logits = ad.clip(ad.slice_(out, 0, m, axis=-1), -MDN_LOGIT_CLAMP, MDN_LOGIT_CLAMP)
    means = ad.reshape(ad.slice_(out, m, m + m * dy, axis=-1), (b, m, dy))
    log_vars = ad.reshape(ad.slice_(out, m + m * dy, m * (1 + 2 * dy), axis=-1), (b, m, dy))
    if not batched:
        logits = ad.reshape(logits, (m,))
    return logits, means, log_vars


def mdn_loglik(x, y, model: MdnModel) -> ad.Node:
    """Exact conditional mixture log-density log sum_m w_m N(y; mu_m, var_m).

    Mixing weights come from a softmax over clamped logits; the whole
    expression is one log-sum-exp, differentiable end to end.  Batched
    rows give a per-record vector.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    batched = x.ndim == 2
    b = x.shape[0] if batched else 1
    m, dy = model.n_mixture, model.config.y_dim
    logits, means, log_vars = _mdn_heads(model.net, x, m, dy)
    log_w = ad.log_softmax(logits)  # (b, m) or (m,)
    log_vars = ad.clip(log_vars, -10.0, 10.0)
    y_block = np.broadcast_to(y.reshape(b, 1, dy), (b, m, dy))
    diff = ad.sub(ad.constant(y_block), means)
    quad = ad.mul(ad.mul(diff, diff), ad.exp(ad.mul(log_vars, -1.0)))
    comp_lp = ad.mul(
        ad.reduce_sum(ad.add(ad.add(quad, log_vars), np.log(2.0 * np.pi)), axis=-1), -0.5
    )  # (b, m)
    log_w2 = log_w if batched else ad.reshape(log_w, (1, m))
    scores = ad.add(comp_lp, log_w2)
    out = ad.logsumexp(scores)  # (b,)
    return out if batched else ad.reshape(out, ())


def mdn_sample(x, model: MdnModel, seed) -> np.ndarray:
    """Ancestral draw: pick a component from the weights, then its Gaussian."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.config.x_dim,):
        raise ValueError(f"feature vector shape {x.shape} does not match config")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    logits, means, log_vars = _mdn_heads(model.net, x, model.n_mixture, model.config.y_dim)
    shifted = logits.value - logits.value.max()
    weights = np.exp(shifted) / np.exp(shifted).sum()
    comp = rng.choice(model.n_mixture, p=weights)
    lv = np.clip(log_vars.value[0, comp], -10.0, 10.0)
    return means.value[0, comp] + np.exp(0.5 * lv) * rng.standard_normal(model.config.y_dim)


def _train_loglik_model(train_records, val_records, cfg: TrainConfig, model, loglik_fn):
    """Shared trainer: maximize mean per-record log-likelihood, keep best-val."""
    if len(train_records) == 0:
        raise ValueError("empty training dataset")
    if len(val_records) == 0:
        raise ValueError("empty validation dataset")
    x_train, y_train = _stack_records(train_records)
    x_val, y_val = _stack_records(val_records)
    params = model.param_dict()

    def batch_objective(current, idx, step):
        leaves = {name: ad.param(value, name=name) for name, value in current.items()}
        working = model.with_params(leaves)
        ll = loglik_fn(x_train[idx], y_train[idx], working)
        return ad.mul(ad.reduce_sum(ll), 1.0 / len(idx)), leaves

    def val_objective(current, epoch):
        working = model.with_params(current)
        return float(loglik_fn(x_val, y_val, working).value.mean())

    best_params, history = run_training(
        len(train_records), cfg, batch_objective, val_objective, params
    )
    best = model.with_params(best_params)
    best.train_log = history
    return best


def init_gaussian_mlp(config: ModelConfig, seed: int) -> GaussianMlpModel:
    net = nets.init_mlp(
        nets.NetConfig(
            in_dim=config.x_dim,
            hidden=config.hidden,
            out_dim=2 * config.y_dim,
            activation=config.activation,
            head="gaussian",
        ),
        stream_rng(seed, "init-mlp"),
    )
    return GaussianMlpModel(config=config, net=net)


def init_mdn(config: ModelConfig, n_mixture: int, seed: int) -> MdnModel:
    net = nets.init_mlp(
        nets.NetConfig(
            in_dim=config.x_dim,
            hidden=config.hidden,
            out_dim=n_mixture * (1 + 2 * config.y_dim),
            activation=config.activation,
            head="log_potential",
        ),
        stream_rng(seed, "init-mdn"),
    )
    return MdnModel(config=config, n_mixture=n_mixture, net=net)


def train_gaussian_mlp(train_records, val_records, cfg: TrainConfig) -> GaussianMlpModel:
    """Maximum-likelihood training of the unimodal baseline; deterministic."""
    x, y = _stack_records(train_records)
    config = ModelConfig(
        x_dim=x.shape[1],
        y_dim=y.shape[1],
        latent_dim=1,
        n_components=1,
        hidden=cfg.hidden,
        activation=cfg.activation,
    )
    model = init_gaussian_mlp(config, cfg.seed)
    return _train_loglik_model(train_records, val_records, cfg, model, gaussian_mlp_loglik)


def train_mdn(train_records, val_records, cfg: TrainConfig, n_mixture: int | None = None) -> MdnModel:
    """Maximum-likelihood MDN training; ``n_mixture`` defaults to the
    mixture-component grid value in ``cfg`` for comparability."""
    x, y = _stack_records(train_records)
    m = cfg.n_components if n_mixture is None else n_mixture
    config = ModelConfig(
        x_dim=x.shape[1],
        y_dim=y.shape[1],
        latent_dim=1,
        n_components=max(m, 1),
        hidden=cfg.hidden,
        activation=cfg.activation,
    )
    model = init_mdn(config, m, cfg.seed)
    return _train_loglik_model(train_records, val_records, cfg, model, mdn_loglik)
