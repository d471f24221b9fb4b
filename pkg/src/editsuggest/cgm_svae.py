"""Hierarchical mixture VAE that clusters users by editing style.

One cluster index ``s_u`` is shared by all of a user's records; per-image
latents ``z_un`` come from that cluster's Gaussian.  Instead of a softmax
over clusters per record, a recognition net emits an unnormalized
log-potential vector per image, and the user-level posterior is exact
given those potentials:

    log q(s_u = k) = log pi_k + sum_n r_k(y_un, x_un) - normalizer.

Potentials combine additively, so the posterior is exchangeable in the
order of a user's records, extends to any record count, and reduces to
the mixture weights for a user with no records.  When the potentials
equal the per-image class log-likelihoods, the posterior is exact (no
approximation error), which the tests exploit as an oracle.

Global mixture parameters are learned point estimates updated by the same
gradient step as the nets; the user-level objective is

    sum_k q(k) * sum_n [ log p(y|x,z_nk) - (log q(z_nk|x,y,k) - log N(z_nk; mu_k, var_k)) ]
    - KL(q(s_u) || pi),

with gradients flowing through q(s_u) into the potential net.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nets
from .cgm_vae import ModelConfig, _gauss_rows_logpdf, _one_hot_block, _softmax_np
from .dists import (
    LOG_VAR_MAX,
    LOG_VAR_MIN,
    CategoricalParams,
    DiagGaussianParams,
    GmmParams,
    categorical_kl_from_logs,
    diag_gaussian_logpdf,
    reparam_sample,
)
from ._training import TrainConfig, TrainingDiverged, run_training
from .seeding import ContentKeyedNoise, stream_rng
from .synthdata import UserRecordSet

__all__ = [
    "CgmSvaeModel",
    "UserPosterior",
    "init_cgm_svae",
    "combine_potentials",
    "user_posterior",
    "elbo_user",
    "train",
    "personalized_predictive_ll",
    "map_user_category",
]


@dataclass
class UserPosterior:
    """Posterior over a user's style cluster."""

    probs: CategoricalParams

    @property
    def values(self) -> np.ndarray:
        p = self.probs.probs
        return p.value if isinstance(p, ad.Node) else np.asarray(p)


@dataclass
class CgmSvaeModel:
    """Mixture prior over user styles, decoder, potential and latent recognizers."""

    config: ModelConfig
    gmm_logits: np.ndarray
    gmm_means: np.ndarray
    gmm_log_vars: np.ndarray
    decoder: nets.MlpParams
    recog_r: nets.MlpParams
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
        if self.recog_r.in_dim != c.x_dim + c.y_dim or self.recog_r.out_dim != c.n_components:
            raise ValueError("potential net dimensions disagree with config")
        if self.recog_r.head != "log_potential":
            raise ValueError("potential net must carry the log_potential head")
        if (
            self.recog_z.in_dim != c.x_dim + c.y_dim + c.n_components
            or self.recog_z.out_dim != 2 * c.latent_dim
        ):
            raise ValueError("latent recognition net dimensions disagree with config")

    @property
    def gmm(self) -> GmmParams:
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
        out.update(nets.mlp_param_items("recog_r", self.recog_r))
        out.update(nets.mlp_param_items("recog_z", self.recog_z))
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> "CgmSvaeModel":
        view = _view(self.config, params)
        return replace(
            self,
            gmm_logits=view.gmm_logits,
            gmm_means=view.gmm_means,
            gmm_log_vars=view.gmm_log_vars,
            decoder=view.decoder,
            recog_r=view.recog_r,
            recog_z=view.recog_z,
        )


def _net_configs(c: ModelConfig) -> dict[str, nets.NetConfig]:
    common = dict(hidden=c.hidden, activation=c.activation)
    return {
        "decoder": nets.NetConfig(
            in_dim=c.latent_dim + c.x_dim, out_dim=2 * c.y_dim, head="gaussian", **common
        ),
        "recog_r": nets.NetConfig(
            in_dim=c.x_dim + c.y_dim, out_dim=c.n_components, head="log_potential", **common
        ),
        "recog_z": nets.NetConfig(
            in_dim=c.x_dim + c.y_dim + c.n_components,
            out_dim=2 * c.latent_dim,
            head="gaussian",
            **common,
        ),
    }


def init_cgm_svae(config: ModelConfig, seed: int) -> CgmSvaeModel:
    """Fresh model.  The potential net's output layer starts at zero so every
    user posterior begins at the mixture weights; a random start there
    saturates the summed potentials before any structure exists and locks
    all users into one component."""
    cfgs = _net_configs(config)
    recog_r = nets.init_mlp(cfgs["recog_r"], stream_rng(seed, "init-recog_r"))
    recog_r.weights[-1] = np.zeros_like(recog_r.weights[-1])
    return CgmSvaeModel(
        config=config,
        gmm_logits=np.zeros(config.n_components),
        gmm_means=stream_rng(seed, "init-gmm").standard_normal(
            (config.n_components, config.latent_dim)
        ),
        gmm_log_vars=np.zeros((config.n_components, config.latent_dim)),
        decoder=nets.init_mlp(cfgs["decoder"], stream_rng(seed, "init-decoder")),
        recog_r=recog_r,
        recog_z=nets.init_mlp(cfgs["recog_z"], stream_rng(seed, "init-recog_z")),
    )


@dataclass
class _View:
    config: ModelConfig
    gmm_logits: object
    gmm_means: object
    gmm_log_vars: object
    decoder: nets.MlpParams
    recog_r: nets.MlpParams
    recog_z: nets.MlpParams


def _view(config: ModelConfig, params: dict) -> _View:
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
        recog_r=mlp("recog_r"),
        recog_z=mlp("recog_z"),
    )


def _lift(params: dict[str, np.ndarray]) -> dict[str, ad.Node]:
    return {name: ad.param(value, name=name) for name, value in params.items()}


def _row(mat, k: int):
    if isinstance(mat, ad.Node):
        return ad.slice_(mat, k, k + 1, axis=0)
    return mat[k : k + 1]


def combine_potentials(log_pi, potentials) -> ad.Node:
    """Normalized log posterior from a log-prior and per-record potentials.

    ``log q(k) = log_pi[k] + sum_n potentials[n, k] - log-sum-exp(...)``.
    The sum makes the result exchangeable in record order; an empty
    potential block (shape (0, L)) returns the normalized prior, and a
    record whose potential is constant across components cancels in the
    normalizer.
    """
    scores = ad.add(log_pi, ad.reduce_sum(ad.as_node(potentials), axis=0))
    return ad.sub(scores, ad.reshape(ad.logsumexp(scores), (1,)))


def _user_log_posterior(view: _View, x: np.ndarray, y: np.ndarray) -> ad.Node:
    log_pi = ad.log_softmax(view.gmm_logits)
    if x.shape[0] == 0:
        return combine_potentials(log_pi, np.zeros((0, view.config.n_components)))
    potentials = nets.apply_log_potential_head(view.recog_r, np.concatenate([x, y], axis=1))
    return combine_potentials(log_pi, potentials)


def user_posterior(user: UserRecordSet, model: CgmSvaeModel) -> UserPosterior:
    """Exact cluster posterior given the potential net; the mixture weights
    for a user with no records.  Invariant to the order of the records."""
    view = _view(model.config, model.param_dict())
    log_q = _user_log_posterior(view, user.x, user.y)
    return UserPosterior(probs=CategoricalParams(np.exp(log_q.value)))


def _elbo_user_graph(view: _View, x: np.ndarray, y: np.ndarray, eps: np.ndarray) -> ad.Node:
    """Variational objective for one user; scalar node, gradients everywhere."""
    c = view.config
    n = x.shape[0]
    log_q = _user_log_posterior(view, x, y)  # (L,)
    log_pi = ad.log_softmax(view.gmm_logits)
    xy = np.concatenate([x, y], axis=1)
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
        inner = ad.reduce_sum(
            ad.sub(
                ad.add(diag_gaussian_logpdf(y, p_y), diag_gaussian_logpdf(z, prior_k)),
                diag_gaussian_logpdf(z, q_z),
            )
        )
        q_k = ad.reshape(ad.exp(ad.slice_(log_q, k, k + 1, axis=-1)), ())
        contrib = ad.mul(q_k, inner)
        total = contrib if total is None else ad.add(total, contrib)
    return ad.sub(total, categorical_kl_from_logs(log_q, log_pi))


def _noise_block(noise: ContentKeyedNoise, x: np.ndarray, y: np.ndarray, n_components: int, dim: int) -> np.ndarray:
    eps = np.empty((n_components, x.shape[0], dim))
    for i in range(x.shape[0]):
        for k in range(n_components):
            eps[k, i] = noise.draw(x[i], y[i], k, dim)
    return eps


def elbo_user(user: UserRecordSet, model: CgmSvaeModel, noise: ContentKeyedNoise) -> ad.Node:
    """Per-user variational objective (summed over the user's records).

    ``noise`` keys the reparameterization draw to each record's content,
    so the value is invariant (to float round-off) under reordering of the
    user's records, and duplicated records receive identical draws.
    """
    if len(user) == 0:
        raise ValueError("elbo_user requires at least one record")
    view = _view(model.config, model.param_dict())
    eps = _noise_block(noise, user.x, user.y, model.config.n_components, model.config.latent_dim)
    return _elbo_user_graph(view, user.x, user.y, eps)


def _warm_start_from_flat(model: CgmSvaeModel, train_users, val_users, cfg: TrainConfig) -> CgmSvaeModel:
    """Record-level warm-up: train the flat mixture VAE on the pooled records
    and transplant its parameters.

    The flat objective marginalizes the cluster per record, so every
    component keeps receiving gradient and the mixture specializes; under
    the per-user objective a cold start tends to lock all users into one
    component (the summed potentials saturate long before the latent space
    has structure).  The cluster recognizer's logits transfer directly as
    the potential net (identical shapes, unnormalized per-record class
    scores), after which the per-user objective refines everything.
    """
    from . import cgm_vae as flat
    from .synthdata import flatten_users
    from dataclasses import replace as dc_replace

    flat_cfg = dc_replace(cfg, epochs=cfg.pretrain_epochs, batch_size=64, pretrain_epochs=0)
    flat_model = flat.train(flatten_users(train_users), flatten_users(val_users), flat_cfg)
    model.gmm_logits = flat_model.gmm_logits.copy()
    model.gmm_means = flat_model.gmm_means.copy()
    model.gmm_log_vars = flat_model.gmm_log_vars.copy()
    model.decoder = nets.MlpParams(
        weights=[w.copy() for w in flat_model.decoder.weights],
        biases=[b.copy() for b in flat_model.decoder.biases],
        activations=flat_model.decoder.activations,
        head="gaussian",
    )
    model.recog_z = nets.MlpParams(
        weights=[w.copy() for w in flat_model.recog_z.weights],
        biases=[b.copy() for b in flat_model.recog_z.biases],
        activations=flat_model.recog_z.activations,
        head="gaussian",
    )
    model.recog_r = nets.MlpParams(
        weights=[w.copy() for w in flat_model.recog_s.weights],
        biases=[b.copy() for b in flat_model.recog_s.biases],
        activations=flat_model.recog_s.activations,
        head="log_potential",
    )
    return model


def train(train_users, val_users, cfg: TrainConfig) -> CgmSvaeModel:
    """Gradient ascent on the mean per-user objective over user minibatches.

    ``cfg.batch_size`` counts users per step (8 is a sensible default at
    desk scale).  Users in ``val_users`` score the per-epoch validation
    objective; the best-validation parameter set is returned.
    Deterministic given ``cfg.seed``.

    With ``cfg.pretrain_epochs > 0`` the parameters warm-start from a flat
    record-level mixture VAE trained on the pooled records (see
    :func:`_warm_start_from_flat`); the per-user ascent then runs for
    ``cfg.epochs`` as usual.
    """
    if len(train_users) == 0:
        raise ValueError("empty training user list")
    if len(val_users) == 0:
        raise ValueError("empty validation user list")
    if any(len(u) == 0 for u in train_users) or any(len(u) == 0 for u in val_users):
        raise ValueError("every user must have at least one record")
    sample = train_users[0]
    config = ModelConfig(
        x_dim=sample.x.shape[1],
        y_dim=sample.y.shape[1],
        latent_dim=cfg.latent_dim,
        n_components=cfg.n_components,
        hidden=cfg.hidden,
        activation=cfg.activation,
    )
    model = init_cgm_svae(config, cfg.seed)
    if cfg.pretrain_epochs > 0:
        model = _warm_start_from_flat(model, train_users, val_users, cfg)
    params = model.param_dict()

    def batch_objective(current, idx, step):
        leaves = _lift(current)
        view = _view(config, leaves)
        noise = ContentKeyedNoise(cfg.seed, "train-noise", step)
        total = None
        for i in idx:
            u = train_users[i]
            eps = _noise_block(noise, u.x, u.y, config.n_components, config.latent_dim)
            node = _elbo_user_graph(view, u.x, u.y, eps)
            total = node if total is None else ad.add(total, node)
        return ad.mul(total, 1.0 / len(idx)), leaves

    def val_objective(current, epoch):
        view = _view(config, current)
        noise = ContentKeyedNoise(cfg.seed, "val-noise", epoch)
        values = []
        for u in val_users:
            eps = _noise_block(noise, u.x, u.y, config.n_components, config.latent_dim)
            values.append(float(_elbo_user_graph(view, u.x, u.y, eps).value))
        return float(np.mean(values))

    best_params, history = run_training(
        len(train_users), cfg, batch_objective, val_objective, params
    )
    best = model.with_params(best_params)
    best.train_log = history
    return best


def personalized_predictive_ll(
    user: UserRecordSet,
    n_cond: int,
    n_eval: int,
    model: CgmSvaeModel,
    s_samples: int = 256,
    seed=0,
) -> float:
    """Held-out predictive log-likelihood after watching ``n_cond`` records.

    Infers q(s_u) from the user's first ``n_cond`` records, then for each
    of the next ``n_eval`` records estimates
    ``log sum_k q(k) p(y | x, s=k)`` with ``s_samples`` importance samples
    of ``z`` inside each component; returns the mean over the evaluated
    records.
    """
    if n_cond < 0 or n_eval < 1:
        raise ValueError("need n_cond >= 0 and n_eval >= 1")
    if n_cond + n_eval > len(user):
        raise ValueError(
            f"user {user.user_id!r} has {len(user)} records, "
            f"needs {n_cond} + {n_eval} for this protocol"
        )
    c = model.config
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    with np.errstate(divide="ignore"):  # a fully decided posterior is fine here
        log_q = np.log(user_posterior(user.take(range(n_cond)), model).values)
    prior_lv = np.clip(model.gmm_log_vars, LOG_VAR_MIN, LOG_VAR_MAX)
    one_hot = np.eye(c.n_components)
    lls = []
    for i in range(n_cond, n_cond + n_eval):
        x, y = user.x[i], user.y[i]
        xy = np.concatenate([x, y])
        log_per_comp = np.empty(c.n_components)
        for k in range(c.n_components):
            q_k = nets.apply_gaussian_head(model.recog_z, np.concatenate([xy, one_hot[k]]))
            mean_k, lv_k = q_k.mean.value, q_k.log_var.value
            eps = rng.standard_normal((s_samples, c.latent_dim))
            z = mean_k + np.exp(0.5 * lv_k) * eps
            log_prior = _gauss_rows_logpdf(z, model.gmm_means[k], prior_lv[k])
            log_qz = _gauss_rows_logpdf(z, mean_k, lv_k)
            dec = nets.apply_gaussian_head(
                model.decoder, np.concatenate([z, np.tile(x, (s_samples, 1))], axis=1)
            )
            log_lik = _gauss_rows_logpdf(y, dec.mean.value, dec.log_var.value)
            log_w = log_prior + log_lik - log_qz
            top = log_w.max()
            log_per_comp[k] = top + np.log(np.exp(log_w - top).sum()) - np.log(s_samples)
        scores = log_q + log_per_comp
        top = scores.max()
        lls.append(top + np.log(np.exp(scores - top).sum()))
    return float(np.mean(lls))


def map_user_category(user: UserRecordSet, model: CgmSvaeModel) -> int:
    """Most probable style cluster; ties break toward the lowest index."""
    return int(np.argmax(user_posterior(user, model).values))
