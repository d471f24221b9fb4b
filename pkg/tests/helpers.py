"""Shared oracle utilities for the test suite.

Everything here is deliberately independent of the package's autodiff
stack: plain numpy forward passes, quadrature, and closed-form density
algebra, used to cross-check the real implementations.
"""

import numpy as np

from editsuggest.seeding import stream_rng
from editsuggest.synthdata import GenConfig, block_offsets


def np_mlp(weights, biases, x, activation="tanh"):
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ np.asarray(w) + np.asarray(b)
        if i < len(weights) - 1:
            h = np.tanh(h) if activation == "tanh" else np.maximum(h, 0.0)
    return h


def np_gaussian_head(mlp, x):
    out = np_mlp(mlp.weights, mlp.biases, x)
    k = out.shape[-1] // 2
    return out[..., :k], np.clip(out[..., k:], -10.0, 10.0)


def np_gauss_logpdf(v, mean, log_var):
    v = np.asarray(v, dtype=np.float64)
    return -0.5 * (
        np.log(2 * np.pi) * v.shape[-1]
        + np.sum(log_var, axis=-1)
        + np.sum((v - mean) ** 2 * np.exp(-log_var), axis=-1)
    )


def quadrature_loglik(model, x, y, grid=10_000, lo=-10.0, hi=10.0):
    """Brute-force log p(y|x) for a latent-dim-1 mixture VAE via trapezoid."""
    assert model.config.latent_dim == 1
    zs = np.linspace(lo, hi, grid)[:, None]
    pi = np.exp(model.gmm_logits) / np.exp(model.gmm_logits).sum()
    lv = np.clip(model.gmm_log_vars, -10.0, 10.0)
    total = 0.0
    for k in range(model.config.n_components):
        prior = np.exp(np_gauss_logpdf(zs, model.gmm_means[k], lv[k]))
        dec_mean, dec_lv = np_gaussian_head(
            model.decoder, np.concatenate([zs, np.tile(x, (grid, 1))], axis=1)
        )
        lik = np.exp(np_gauss_logpdf(y, dec_mean, dec_lv))
        total += pi[k] * np.trapezoid(prior * lik, zs[:, 0])
    return float(np.log(total))


def style_groups_config(
    seed: int,
    n_groups: int = 3,
    users_per_group: int = 40,
    images_per_user: int = 30,
    offset_scale: float = 0.5,
) -> GenConfig:
    """Well-separated editing-style groups on disjoint slider blocks."""
    rng = stream_rng(seed, "style-groups")
    dy, dc, dx = 11, 2, 8
    return GenConfig(
        n_groups=n_groups,
        users_per_group=users_per_group,
        images_per_user=images_per_user,
        x_dim=dx,
        y_dim=dy,
        content_dim=dc,
        style_maps=rng.standard_normal((n_groups, dy, dc)) * 0.12 / np.sqrt(dc),
        mode_offsets=[
            block_offsets(n_groups, dy, offset_scale)[g : g + 1] for g in range(n_groups)
        ],
        feature_map=rng.standard_normal((dx, dc)) / np.sqrt(dc),
        obs_noise_std=0.05,
        feature_noise_std=0.05,
        seed=seed,
    )
