"""Shared minibatch training loop: Adam, shuffling, validation-best selection.

Each trainer supplies a batch objective builder (returning a scalar node to
MAXIMIZE plus the parameter leaves of its graph) and a validation scorer.
The loop minimizes the negated objective, tracks the best validation score,
and raises :class:`TrainingDiverged` the moment anything goes non-finite.
Everything is deterministic given the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .optim import adam_step, init_adam
from .seeding import stream_rng

__all__ = ["TrainConfig", "TrainingDiverged", "run_training"]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by every trainable model in this package.

    ``latent_dim`` and ``n_components`` default to the small end of the
    declared search grids ({2, 20} and {3, 5, 10}); any positive value is
    accepted.  ``batch_size`` counts records for flat models and users for
    the hierarchical one.
    """

    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    latent_dim: int = 2
    n_components: int = 3
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    # hierarchical trainer only: epochs of record-level warm-up before the
    # per-user objective takes over (0 disables the phase)
    pretrain_epochs: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.latent_dim < 1 or self.n_components < 1:
            raise ValueError("latent_dim and n_components must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be nonnegative")


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss or gradient."""


def run_training(
    n_items: int,
    cfg: TrainConfig,
    batch_objective,
    val_objective,
    params: dict[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Maximize the mean batch objective; return best-validation params and log.

    ``batch_objective(params, indices, step) -> (node, leaves)`` builds the
    graph for one minibatch; ``val_objective(params, epoch) -> float``
    scores a parameter set.  The returned log holds one entry per epoch
    with the running train objective and the validation objective.
    """
    if n_items < 1:
        raise ValueError("empty dataset")
    shuffle_rng = stream_rng(cfg.seed, "shuffle")
    state = init_adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    best_val = -np.inf
    best_params = params
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n_items)
        batch_values = []
        for start in range(0, n_items, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            try:
                objective, leaves = batch_objective(params, idx, step)
                grad_nodes = ad.backward(ad.mul(objective, -1.0))
            except NonFiniteError as err:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {step}: {err}"
                ) from err
            grads = {
                name: grad_nodes[node] for name, node in leaves.items() if node in grad_nodes
            }
            params, state = adam_step(params, grads, state)
            batch_values.append(float(objective.value))
            step += 1
        try:
            val = val_objective(params, epoch)
        except NonFiniteError as err:
            raise TrainingDiverged(f"non-finite validation value at epoch {epoch}: {err}") from err
        history.append(
            {"epoch": epoch, "train": float(np.mean(batch_values)), "val": float(val)}
        )
        if val > best_val:
            best_val = val
            best_params = params
    return best_params, history
