"""Synthetic ground-truth generator for image-feature / slider-edit data.

The generative process per user (group ``g`` fixed for the user) and image:

    content   c ~ N(0, I)
    features  x = F c + feature_noise * eps_x
    mode      m ~ per-group mode weights
    sliders   y = clamp(S_g c + offset[g, m] + obs_noise * eps_y, -1, 1)

Distinct groups play the role of editing styles (different style maps
``S_g`` and offsets); multiple modes within a group make the conditional
slider density multimodal even for a single style.  Because the process
is linear-Gaussian given (group, mode), the exact conditional density
p(y | x) is available in closed form and serves as a verification oracle
for every trained model.  The clamp is applied in generation but ignored
by the oracle; configurations keep clamping rare, and the resulting bias
is accepted and documented here rather than corrected.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .seeding import stream_rng

__all__ = [
    "GenConfig",
    "ImageEditRecord",
    "UserRecordSet",
    "generate",
    "oracle_loglik",
    "flatten_users",
    "group_records",
    "to_pseudo_users",
    "save_dataset",
    "load_dataset",
    "preset_config",
    "PRESETS",
]


@dataclass
class ImageEditRecord:
    """One (user, image features, slider vector) training datum.

    ``group`` is the hidden generator label; it exists only for test-time
    verification and is never an input to any model.
    """

    user_id: str
    x: np.ndarray
    y: np.ndarray
    group: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 1 or self.y.ndim != 1:
            raise ValueError("record x and y must be vectors")
        if np.any(np.abs(self.y) > 1.0 + 1e-9):
            raise ValueError("slider values must lie in [-1, 1]")


@dataclass
class UserRecordSet:
    """All records of one user: x rows (N, Dx) aligned with y rows (N, Dy)."""

    user_id: str
    x: np.ndarray
    y: np.ndarray
    group: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 2:
            raise ValueError("x and y must be 2-D row blocks")
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y row counts differ")

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, indices) -> "UserRecordSet":
        idx = np.asarray(indices, dtype=np.intp)
        return UserRecordSet(self.user_id, self.x[idx], self.y[idx], self.group)


@dataclass
class GenConfig:
    """Full parameterization of the synthetic generator (serializable)."""

    n_groups: int
    users_per_group: int
    images_per_user: int
    x_dim: int
    content_dim: int
    style_maps: np.ndarray          # (G, Dy, Dc)
    mode_offsets: list              # per group: (M_g, Dy)
    feature_map: np.ndarray         # (Dx, Dc)
    obs_noise_std: float
    feature_noise_std: float
    seed: int
    y_dim: int = 11
    mode_weights: list | None = None  # per group: (M_g,), default uniform

    def __post_init__(self):
        for name in ("n_groups", "users_per_group", "images_per_user", "x_dim", "content_dim", "y_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        # zero noise is allowed for degenerate test configs; the density
        # oracle needs strictly positive noise and checks separately
        if self.obs_noise_std < 0 or self.feature_noise_std < 0:
            raise ValueError("noise stds must be nonnegative")
        self.style_maps = np.asarray(self.style_maps, dtype=np.float64)
        self.feature_map = np.asarray(self.feature_map, dtype=np.float64)
        self.mode_offsets = [np.asarray(o, dtype=np.float64) for o in self.mode_offsets]
        if self.style_maps.shape != (self.n_groups, self.y_dim, self.content_dim):
            raise ValueError(f"style_maps shape {self.style_maps.shape} is wrong")
        if self.feature_map.shape != (self.x_dim, self.content_dim):
            raise ValueError(f"feature_map shape {self.feature_map.shape} is wrong")
        if len(self.mode_offsets) != self.n_groups:
            raise ValueError("need one mode-offset block per group")
        for o in self.mode_offsets:
            if o.ndim != 2 or o.shape[1] != self.y_dim or o.shape[0] < 1:
                raise ValueError(f"mode offsets must be (modes, y_dim), got {o.shape}")
        if self.mode_weights is None:
            self.mode_weights = [np.full(len(o), 1.0 / len(o)) for o in self.mode_offsets]
        self.mode_weights = [np.asarray(w, dtype=np.float64) for w in self.mode_weights]
        for w, o in zip(self.mode_weights, self.mode_offsets):
            if w.shape != (o.shape[0],) or abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
                raise ValueError("mode weights must be a simplex matching mode count")

    def to_json_dict(self) -> dict:
        return {
            "n_groups": self.n_groups,
            "users_per_group": self.users_per_group,
            "images_per_user": self.images_per_user,
            "x_dim": self.x_dim,
            "y_dim": self.y_dim,
            "content_dim": self.content_dim,
            "style_maps": self.style_maps.tolist(),
            "mode_offsets": [o.tolist() for o in self.mode_offsets],
            "mode_weights": [w.tolist() for w in self.mode_weights],
            "feature_map": self.feature_map.tolist(),
            "obs_noise_std": self.obs_noise_std,
            "feature_noise_std": self.feature_noise_std,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GenConfig":
        return cls(
            n_groups=d["n_groups"],
            users_per_group=d["users_per_group"],
            images_per_user=d["images_per_user"],
            x_dim=d["x_dim"],
            y_dim=d["y_dim"],
            content_dim=d["content_dim"],
            style_maps=np.array(d["style_maps"]),
            mode_offsets=[np.array(o) for o in d["mode_offsets"]],
            mode_weights=[np.array(w) for w in d["mode_weights"]],
            feature_map=np.array(d["feature_map"]),
            obs_noise_std=d["obs_noise_std"],
            feature_noise_std=d["feature_noise_std"],
            seed=d["seed"],
        )


def generate(cfg: GenConfig) -> list[UserRecordSet]:
    """Draw the full user population; deterministic given ``cfg.seed``."""
    rng = stream_rng(cfg.seed, "synthdata")
    users = []
    uid = 0
    for g in range(cfg.n_groups):
        style = cfg.style_maps[g]
        offsets = cfg.mode_offsets[g]
        weights = cfg.mode_weights[g]
        for _ in range(cfg.users_per_group):
            n = cfg.images_per_user
            content = rng.standard_normal((n, cfg.content_dim))
            x = content @ cfg.feature_map.T + cfg.feature_noise_std * rng.standard_normal(
                (n, cfg.x_dim)
            )
            modes = rng.choice(len(offsets), size=n, p=weights)
            y = (
                content @ style.T
                + offsets[modes]
                + cfg.obs_noise_std * rng.standard_normal((n, cfg.y_dim))
            )
            users.append(UserRecordSet(f"u{uid:04d}", x, np.clip(y, -1.0, 1.0), group=g))
            uid += 1
    return users


def _content_posterior(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Posterior over content given features: returns (gain, covariance).

    c | x ~ N(gain @ x, cov) with cov = (I + F'F / s^2)^-1 and
    gain = cov F' / s^2, from the standard linear-Gaussian identities.
    """
    f = cfg.feature_map
    s2 = cfg.feature_noise_std**2
    prec = np.eye(cfg.content_dim) + f.T @ f / s2
    cov = np.linalg.inv(prec)
    gain = cov @ f.T / s2
    return gain, cov


def oracle_loglik(record: ImageEditRecord, cfg: GenConfig) -> float:
    """Exact log p(y | x) under the generator, ignoring the slider clamp.

    Marginalizes group and mode in closed form after collapsing the
    content posterior: for each (g, m), y | x is Gaussian with mean
    ``S_g E[c|x] + offset`` and covariance ``S_g Cov[c|x] S_g' + obs^2 I``.
    """
    if record.x.shape != (cfg.x_dim,) or record.y.shape != (cfg.y_dim,):
        raise ValueError("record dimensions do not match the generator config")
    if cfg.obs_noise_std == 0 or cfg.feature_noise_std == 0:
        raise ValueError("oracle density requires strictly positive noise stds")
    gain, cov = _content_posterior(cfg)
    c_mean = gain @ record.x
    log_group_w = -np.log(cfg.n_groups)
    terms = []
    for g in range(cfg.n_groups):
        style = cfg.style_maps[g]
        y_cov = style @ cov @ style.T + cfg.obs_noise_std**2 * np.eye(cfg.y_dim)
        chol = np.linalg.cholesky(y_cov)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        for m, w in enumerate(cfg.mode_weights[g]):
            if w == 0.0:
                continue
            diff = record.y - (style @ c_mean + cfg.mode_offsets[g][m])
            u = np.linalg.solve(chol, diff)
            quad = float(u @ u)
            lp = -0.5 * (quad + logdet + cfg.y_dim * np.log(2.0 * np.pi))
            terms.append(log_group_w + np.log(w) + lp)
    terms = np.array(terms)
    top = terms.max()
    return float(top + np.log(np.exp(terms - top).sum()))


def flatten_users(users: list[UserRecordSet]) -> list[ImageEditRecord]:
    records = []
    for u in users:
        for i in range(len(u)):
            records.append(ImageEditRecord(u.user_id, u.x[i], u.y[i], group=u.group))
    return records


def group_records(records: list[ImageEditRecord]) -> list[UserRecordSet]:
    """Regroup flat records into per-user sets, preserving first-seen order."""
    order: dict[str, list[ImageEditRecord]] = {}
    for r in records:
        order.setdefault(r.user_id, []).append(r)
    users = []
    for uid, recs in order.items():
        groups = {r.group for r in recs}
        group = groups.pop() if len(groups) == 1 else None
        users.append(
            UserRecordSet(uid, np.stack([r.x for r in recs]), np.stack([r.y for r in recs]), group)
        )
    return users


def to_pseudo_users(users: list[UserRecordSet], chunk: int = 50) -> list[UserRecordSet]:
    """Split each user's records into consecutive chunks treated as new users.

    Mirrors the expert-data trick of pretending each block of ``chunk``
    image-slider pairs belongs to a separate user, which multiplies the
    user count when only a few heavy editors exist.  Trailing records that
    do not fill a chunk are dropped.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    out = []
    for u in users:
        for j in range(len(u) // chunk):
            sl = slice(j * chunk, (j + 1) * chunk)
            out.append(UserRecordSet(f"{u.user_id}_p{j:02d}", u.x[sl], u.y[sl], u.group))
    return out


def save_dataset(records: list[ImageEditRecord], path) -> None:
    """CSV with header ``user_id, x_0.., y_0.., group``; floats round-trip exactly."""
    if not records:
        raise ValueError("cannot save an empty dataset")
    dx, dy = records[0].x.size, records[0].y.size
    with_group = all(r.group is not None for r in records)
    header = (
        ["user_id"]
        + [f"x_{i}" for i in range(dx)]
        + [f"y_{i}" for i in range(dy)]
        + (["group"] if with_group else [])
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in records:
            if r.x.size != dx or r.y.size != dy:
                raise ValueError("records disagree on dimensions")
            row = [r.user_id] + [repr(float(v)) for v in r.x] + [repr(float(v)) for v in r.y]
            if with_group:
                row.append(str(int(r.group)))
            writer.writerow(row)


def load_dataset(path) -> list[ImageEditRecord]:
    """Inverse of :func:`save_dataset`; the group column is optional."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty dataset file") from None
        x_cols = [h for h in header if h.startswith("x_")]
        y_cols = [h for h in header if h.startswith("y_")]
        if header[:1] != ["user_id"]:
            raise ValueError(f"{path}: first column must be user_id")
        if not x_cols:
            raise ValueError(f"{path}: no x_* feature columns in header")
        if not y_cols:
            raise ValueError(f"{path}: no y_* slider columns in header")
        expected_x = [f"x_{i}" for i in range(len(x_cols))]
        expected_y = [f"y_{i}" for i in range(len(y_cols))]
        has_group = header[-1] == "group"
        want = ["user_id"] + expected_x + expected_y + (["group"] if has_group else [])
        if header != want:
            missing = [c for c in want if c not in header]
            raise ValueError(f"{path}: malformed header, missing or misordered columns {missing}")
        dx, dy = len(x_cols), len(y_cols)
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                x = np.array([float(v) for v in row[1 : 1 + dx]])
                y = np.array([float(v) for v in row[1 + dx : 1 + dx + dy]])
                group = int(row[-1]) if has_group else None
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
            try:
                records.append(ImageEditRecord(row[0], x, y, group=group))
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return records


def block_offsets(n_vectors: int, y_dim: int, scale: float, sliders_per_block: int = 3) -> np.ndarray:
    """Offset vectors on disjoint slider blocks: vector ``i`` puts ``scale``
    on sliders ``[i*b, (i+1)*b)``.  Mutually orthogonal by construction and,
    unlike dense directions, they keep each affected slider's marginal
    strongly multimodal (mass at 0 from unaffected modes, a separate hump
    at ``scale``)."""
    b = sliders_per_block
    if n_vectors * b > y_dim:
        raise ValueError(f"{n_vectors} blocks of {b} sliders exceed y_dim {y_dim}")
    out = np.zeros((n_vectors, y_dim))
    for i in range(n_vectors):
        out[i, i * b : (i + 1) * b] = scale
    return out


def preset_config(name: str, seed: int) -> GenConfig:
    """Named generator presets of increasing edit magnitude.

    ``casual``: many light users, small edits, two modes per group.
    ``frequent``: fewer, heavier users with stronger edits.
    ``expert``: three well-separated edit styles (one mode per group,
    three modes marginally) on disjoint slider blocks, few heavy users;
    combine with :func:`to_pseudo_users` to multiply the user count.

    Offsets of the casual and frequent presets come from one orthonormal
    family (every pair of modes ``offset_scale * sqrt(2)`` apart); the
    expert preset uses :func:`block_offsets` so the affected sliders show
    clearly separated marginal modes.
    """
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}, choose from {sorted(PRESETS)}")
    spec = PRESETS[name]
    rng = stream_rng(seed, f"preset-{name}")
    g, dy, dc, dx = spec["groups"], 11, spec["content_dim"], spec["x_dim"]
    style_maps = rng.standard_normal((g, dy, dc)) * spec["style_scale"] / np.sqrt(dc)
    n_modes = spec["modes_per_group"]
    if name == "expert":
        directions = block_offsets(g * n_modes, dy, spec["offset_scale"])
    else:
        basis, _ = np.linalg.qr(rng.standard_normal((dy, dy)))
        directions = basis.T[: g * n_modes] * spec["offset_scale"]
    mode_offsets = [directions[gi * n_modes : (gi + 1) * n_modes] for gi in range(g)]
    feature_map = rng.standard_normal((dx, dc)) / np.sqrt(dc)
    return GenConfig(
        n_groups=g,
        users_per_group=spec["users_per_group"],
        images_per_user=spec["images_per_user"],
        x_dim=dx,
        y_dim=dy,
        content_dim=dc,
        style_maps=style_maps,
        mode_offsets=mode_offsets,
        feature_map=feature_map,
        obs_noise_std=spec["obs_noise_std"],
        feature_noise_std=spec["feature_noise_std"],
        seed=seed,
    )


PRESETS: dict[str, dict] = {
    "casual": dict(
        groups=2,
        users_per_group=60,
        images_per_user=10,
        x_dim=8,
        content_dim=2,
        modes_per_group=2,
        style_scale=0.18,
        offset_scale=0.25,
        obs_noise_std=0.06,
        feature_noise_std=0.05,
    ),
    "frequent": dict(
        groups=3,
        users_per_group=25,
        images_per_user=30,
        x_dim=8,
        content_dim=2,
        modes_per_group=2,
        style_scale=0.22,
        offset_scale=0.35,
        obs_noise_std=0.05,
        feature_noise_std=0.05,
    ),
    "expert": dict(
        groups=3,
        users_per_group=2,
        images_per_user=1000,
        x_dim=8,
        content_dim=2,
        modes_per_group=1,
        style_scale=0.12,
        offset_scale=0.5,
        obs_noise_std=0.05,
        feature_noise_std=0.05,
    ),
}
