"""Conditional Gaussian-mixture VAE over (image features, slider vector) pairs.

Generative process per record: draw a cluster ``s`` from mixture weights,
a latent ``z`` from that cluster's Gaussian, then sliders
``y ~ N(mean(z, x), var(z, x))`` from the decoder net.  The variational
family is ``q(s | x, y) q(z | x, y, s)`` with a softmax recognition net
for ``s`` and a Gaussian recognition net (one-hot ``s`` appended to the
input) for ``z``.

The training objective marginalizes the cluster explicitly: for each
record and each component ``k`` it draws one reparameterized ``z`` and
accumulates

    q(k | x, y) * [ log p(y|x,z) + log N(z; mu_k, var_k) + log pi_k
                    - log q(z | x, y, k) - log q(k | x, y) ],

which keeps the gradient exact for all parameters including the learned
mixture prior (weights through a softmax parameterization, variances
through a log parameterization).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nets
from .dists import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    CategoricalParams,
    DiagGaussianParams,
    GmmParams,
    diag_gaussian_logpdf,
    reparam_sample,
)
from ._training import TrainConfig, TrainingDiverged, run_training
from .seeding import stream_rng
from .synthdata import ImageEditRecord

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "TrainingDiverged",
    "CgmVaeModel",
    "init_cgm_vae",
    "elbo",
    "train",
    "propose_edits",
    "predictive_loglik",
]


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and architecture shared by all nets of one model."""

    x_dim: int
    y_dim: int
    latent_dim: int
    n_components: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        if min(self.x_dim, self.y_dim, self.latent_dim, self.n_components) < 1:
            raise ValueError("all model dimensions must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "x_dim": self.x_dim,
            "y_dim": self.y_dim,
            "latent_dim": self.latent_dim,
            "n_components": self.n_components,
            "hidden": list(self.hidden),
            "activation": self.activation,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            x_dim=d["x_dim"],
            y_dim=d["y_dim"],
            latent_dim=d["latent_dim"],
            n_components=d["n_components"],
            hidden=tuple(d["hidden"]),
            activation=d["activation"],
        )


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


@dataclass
class CgmVaeModel:
    """Learned mixture prior plus decoder and the two recognition nets."""

    config: ModelConfig
    gmm_logits: np.ndarray
    gmm_means: np.ndarray
    gmm_log_vars: np.ndarray
    decoder: nets.MlpParams
    recog_s: nets.MlpParams
    recog_z: nets.MlpParams
    train_log: list = field(default_factory=list)

    def __post_init__(self):
        c = self.config
        if self.gmm_logits.shape != (c.n_components,):
            raise ValueError("mixture logits shape mismatch")
        if self.gmm_means.shape != (c.n_components, c.latent_dim):
            raise ValueError("mixture means shape mismatch")
        if self.gmm_log_vars.shape != (c.n_components, c.latent_dim):
            raise ValueError("mixture log-variances shape mismatch")
        if self.decoder.in_dim != c.latent_dim + c.x_dim or self.decoder.out_dim != 2 * c.y_dim:
            raise ValueError("decoder dimensions disagree with config")
        if self.recog_s.in_dim != c.x_dim + c.y_dim or self.recog_s.out_dim != c.n_components:
            raise ValueError("cluster recognition net dimensions disagree with config")
        if (
            self.recog_z.in_dim != c.x_dim + c.y_dim + c.n_components
            or self.recog_z.out_dim != 2 * c.latent_dim
        ):
            raise ValueError("latent recognition net dimensions disagree with config")

    @property
    def gmm(self) -> GmmParams:
        """The latent prior as explicit mixture parameters."""
        lv = np.clip(self.gmm_log_vars, LOG_VAR_MIN, LOG_VAR_MAX)
        return GmmParams(
            weights=CategoricalParams(_softmax_np(self.gmm_logits)),
            components=[
                DiagGaussianParams(mean=self.gmm_means[k], log_var=lv[k])
                for k in range(self.config.n_components)
            ],
        )

    def param_dict(self) -> dict[str, np.ndarray]:
        out = {
            "gmm.logits": self.gmm_logits,
            "gmm.means": self.gmm_means,
            "gmm.log_vars": self.gmm_log_vars,
        }
        out.update(nets.mlp_param_items("decoder", self.decoder))
        out.update(nets.mlp_param_items("recog_s", self.recog_s))
        out.update(nets.mlp_param_items("recog_z", self.recog_z))
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> "CgmVaeModel":
        view = _view(self.config, params)
        return replace(
            self,
            gmm_logits=view.gmm_logits,
            gmm_means=view.gmm_means,
            gmm_log_vars=view.gmm_log_vars,
            decoder=view.decoder,
            recog_s=view.recog_s,
            recog_z=view.recog_z,
        )


def _net_configs(c: ModelConfig) -> dict[str, nets.NetConfig]:
    common = dict(hidden=c.hidden, activation=c.activation)
    return {
        "decoder": nets.NetConfig(
            in_dim=c.latent_dim + c.x_dim, out_dim=2 * c.y_dim, head="gaussian", **common
        ),
        "recog_s": nets.NetConfig(
            in_dim=c.x_dim + c.y_dim, out_dim=c.n_components, head="softmax", **common
        ),
        "recog_z": nets.NetConfig(
            in_dim=c.x_dim + c.y_dim + c.n_components,
            out_dim=2 * c.latent_dim,
            head="gaussian",
            **common,
        ),
    }


def init_cgm_vae(config: ModelConfig, seed: int) -> CgmVaeModel:
    """Fresh model: seeded net weights, spread mixture means, unit variances."""
    cfgs = _net_configs(config)
    return CgmVaeModel(
        config=config,
        gmm_logits=np.zeros(config.n_components),
        gmm_means=stream_rng(seed, "init-gmm").standard_normal(
            (config.n_components, config.latent_dim)
        ),
        gmm_log_vars=np.zeros((config.n_components, config.latent_dim)),
        decoder=nets.init_mlp(cfgs["decoder"], stream_rng(seed, "init-decoder")),
        recog_s=nets.init_mlp(cfgs["recog_s"], stream_rng(seed, "init-recog_s")),
        recog_z=nets.init_mlp(cfgs["recog_z"], stream_rng(seed, "init-recog_z")),
    )


@dataclass
class _View:
    """Model parameters as either raw arrays or registered graph leaves."""

    config: ModelConfig
    gmm_logits: object
    gmm_means: object
    gmm_log_vars: object
    decoder: nets.MlpParams
    recog_s: nets.MlpParams
    recog_z: nets.MlpParams


def _view(config: ModelConfig, params: dict) -> _View:
    """Assemble a view from named parameters (raw arrays or graph leaves)."""
    cfgs = _net_configs(config)

    def mlp(prefix):
        cfg = cfgs[prefix]
        n_layers = len(cfg.hidden) + 1
        return nets.MlpParams(
            weights=[params[f"{prefix}.w{i}"] for i in range(n_layers)],
            biases=[params[f"{prefix}.b{i}"] for i in range(n_layers)],
            activations=(cfg.activation,) * len(cfg.hidden),
            head=cfg.head,
        )

    return _View(
        config=config,
        gmm_logits=params["gmm.logits"],
        gmm_means=params["gmm.means"],
        gmm_log_vars=params["gmm.log_vars"],
        decoder=mlp("decoder"),
        recog_s=mlp("recog_s"),
        recog_z=mlp("recog_z"),
    )


def _lift(params: dict[str, np.ndarray]) -> dict[str, ad.Node]:
    return {name: ad.param(value, name=name) for name, value in params.items()}


def _row(mat, k: int):
    """Row ``k`` as a (1, D) slice of an array or node."""
    if isinstance(mat, ad.Node):
        return ad.slice_(mat, k, k + 1, axis=0)
    return mat[k : k + 1]


def _stack_records(records) -> tuple[np.ndarray, np.ndarray]:
    if len(records) == 0:
        raise ValueError("empty record batch")
    x = np.stack([r.x for r in records])
    y = np.stack([r.y for r in records])
    return x, y


def _one_hot_block(n: int, k: int, width: int) -> np.ndarray:
    block = np.zeros((n, width))
    block[:, k] = 1.0
    return block


def _elbo_graph(view: _View, x: np.ndarray, y: np.ndarray, eps: np.ndarray) -> ad.Node:
    """Mean per-record ELBO with explicit marginalization over the cluster."""
    c = view.config
    n = x.shape[0]
    xy = np.concatenate([x, y], axis=1)
    log_qs = nets.apply_log_softmax_head(view.recog_s, xy)  # (n, L)
    log_pi = ad.log_softmax(view.gmm_logits)  # (L,)
    total = None
    for k in range(c.n_components):
        q_z = nets.apply_gaussian_head(
            view.recog_z, np.concatenate([xy, _one_hot_block(n, k, c.n_components)], axis=1)
        )
        z = reparam_sample(q_z, eps[k])  # (n, Dz)
        p_y = nets.apply_gaussian_head(view.decoder, ad.concat([z, ad.constant(x)], axis=-1))
        prior_k = DiagGaussianParams(
            mean=_row(view.gmm_means, k), log_var=_row(view.gmm_log_vars, k)
        )
        log_qs_k = ad.reshape(ad.slice_(log_qs, k, k + 1, axis=-1), (n,))
        term = ad.sub(
            ad.add(
                ad.add(diag_gaussian_logpdf(y, p_y), diag_gaussian_logpdf(z, prior_k)),
                ad.slice_(log_pi, k, k + 1, axis=-1),
            ),
            ad.add(diag_gaussian_logpdf(z, q_z), log_qs_k),
        )
        weighted = ad.mul(ad.exp(log_qs_k), term)
        total = weighted if total is None else ad.add(total, weighted)
    return ad.mul(ad.reduce_sum(total), 1.0 / n)


def elbo(records, model: CgmVaeModel, rng) -> ad.Node:
    """Mean per-record ELBO of a batch; a scalar graph node.

    ``rng`` supplies the reparameterization noise (one draw per record per
    mixture component), so the value is deterministic given a seeded
    generator.  Gradients flow to every parameter when the graph is built
    through lifted leaves; on a plain model this is evaluation only.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x, y = _stack_records(records)
    c = model.config
    eps = rng.standard_normal((c.n_components, x.shape[0], c.latent_dim))
    return _elbo_graph(_view(c, model.param_dict()), x, y, eps)


def train(train_records, val_records, cfg: TrainConfig) -> CgmVaeModel:
    """Stochastic-gradient training with validation-best checkpoint selection.

    Deterministic given ``cfg.seed``: init, shuffling, and noise all come
    from named seed streams.  The returned model carries a per-epoch
    train/validation ELBO log.  Raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    if len(train_records) == 0:
        raise ValueError("empty training dataset")
    if len(val_records) == 0:
        raise ValueError("empty validation dataset")
    x_train, y_train = _stack_records(train_records)
    x_val, y_val = _stack_records(val_records)
    config = ModelConfig(
        x_dim=x_train.shape[1],
        y_dim=y_train.shape[1],
        latent_dim=cfg.latent_dim,
        n_components=cfg.n_components,
        hidden=cfg.hidden,
        activation=cfg.activation,
    )
    model = init_cgm_vae(config, cfg.seed)
    params = model.param_dict()
    noise_rng = stream_rng(cfg.seed, "train-noise")

    def batch_objective(current, idx, step):
        leaves = _lift(current)
        eps = noise_rng.standard_normal((config.n_components, len(idx), config.latent_dim))
        return _elbo_graph(_view(config, leaves), x_train[idx], y_train[idx], eps), leaves

    def val_objective(current, epoch):
        eps = stream_rng(cfg.seed, "val-noise", epoch).standard_normal(
            (config.n_components, x_val.shape[0], config.latent_dim)
        )
        return float(_elbo_graph(_view(config, current), x_val, y_val, eps).value)

    best_params, history = run_training(
        len(train_records), cfg, batch_objective, val_objective, params
    )
    best = model.with_params(best_params)
    best.train_log = history
    return best


def propose_edits(x, k_proposals: int, model: CgmVaeModel, seed) -> np.ndarray:
    """``k_proposals`` slider vectors sampled from the generative model.

    Each proposal draws a cluster from the mixture weights and a latent
    from that component, then returns the decoder MEAN (a modal edit, not
    a draw from the observation noise).  Deterministic given ``seed``.
    """
    if k_proposals < 1:
        raise ValueError("k_proposals must be >= 1")
    c = model.config
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (c.x_dim,):
        raise ValueError(f"feature vector shape {x.shape} does not match x_dim {c.x_dim}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    comps = rng.choice(c.n_components, size=k_proposals, p=_softmax_np(model.gmm_logits))
    eps = rng.standard_normal((k_proposals, c.latent_dim))
    lv = np.clip(model.gmm_log_vars, LOG_VAR_MIN, LOG_VAR_MAX)
    z = model.gmm_means[comps] + np.exp(0.5 * lv[comps]) * eps
    dec_in = np.concatenate([z, np.tile(x, (k_proposals, 1))], axis=1)
    return nets.apply_gaussian_head(model.decoder, dec_in).mean.value.copy()


def _gauss_rows_logpdf(x: np.ndarray, mean: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """Row-wise diagonal-Gaussian log density, plain numpy."""
    return -0.5 * (
        np.log(2.0 * np.pi) * x.shape[-1]
        + log_var.sum(axis=-1)
        + ((x - mean) ** 2 * np.exp(-log_var)).sum(axis=-1)
    )


def predictive_loglik(
    x,
    y,
    model: CgmVaeModel,
    s_samples: int = 1000,
    seed=0,
    with_stderr: bool = False,
):
    """Importance-sampled estimate of log p(y | x) using the recognition nets.

    Draws ``(s_i, z_i)`` from ``q(s | x, y) q(z | x, y, s_i)`` and averages
    the weights ``p(y, z_i, s_i | x) / q(s_i, z_i | x, y)`` through
    log-sum-exp.  The estimate lower-bounds the true value in expectation
    and is nondecreasing in ``s_samples`` in expectation.  With
    ``with_stderr=True`` also returns the delta-method Monte Carlo
    standard error of the log estimate.
    """
    if s_samples < 1:
        raise ValueError("s_samples must be >= 1")
    c = model.config
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    xy = np.concatenate([x, y])
    log_qs = nets.apply_log_softmax_head(model.recog_s, xy).value  # (L,)
    log_pi = np.log(_softmax_np(model.gmm_logits))
    comps = rng.choice(c.n_components, size=s_samples, p=np.exp(log_qs))
    eps = rng.standard_normal((s_samples, c.latent_dim))

    q_means = np.empty((c.n_components, c.latent_dim))
    q_lvs = np.empty((c.n_components, c.latent_dim))
    for k in range(c.n_components):
        q_k = nets.apply_gaussian_head(
            model.recog_z, np.concatenate([xy, np.eye(c.n_components)[k]])
        )
        q_means[k] = q_k.mean.value
        q_lvs[k] = q_k.log_var.value

    z = q_means[comps] + np.exp(0.5 * q_lvs[comps]) * eps  # (S, Dz)
    prior_lv = np.clip(model.gmm_log_vars, LOG_VAR_MIN, LOG_VAR_MAX)
    log_prior_z = _gauss_rows_logpdf(z, model.gmm_means[comps], prior_lv[comps])
    log_q_z = _gauss_rows_logpdf(z, q_means[comps], q_lvs[comps])
    dec = nets.apply_gaussian_head(
        model.decoder, np.concatenate([z, np.tile(x, (s_samples, 1))], axis=1)
    )
    log_lik = _gauss_rows_logpdf(y, dec.mean.value, dec.log_var.value)

    log_w = log_pi[comps] + log_prior_z + log_lik - log_qs[comps] - log_q_z
    top = log_w.max()
    estimate = float(top + np.log(np.exp(log_w - top).sum()) - np.log(s_samples))
    if not with_stderr:
        return estimate
    ratios = np.exp(log_w - (top + np.log(np.exp(log_w - top).mean())))
    stderr = float(ratios.std(ddof=1) / np.sqrt(s_samples)) if s_samples > 1 else float("inf")
    return estimate, stderr
