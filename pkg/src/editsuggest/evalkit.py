"""Evaluation metrics and experiment protocols.

Covers the four quantities every experiment reports:

* held-out predictive log-likelihood (exact for the baselines and the
  generator oracle, importance-sampled for the mixture VAE),
* per-slider Jensen-Shannon divergence between binned marginal histograms
  of true and model-proposed sliders (base 2, so values live in [0, 1]),
* proposal-to-reference alignment error in slider space (exact minimum
  over one-to-one assignments),
* the personalization curve: predictive log-likelihood of a fixed block
  of held-out records as a function of how many records were used to
  infer the user's style, normalized to zero at zero records.
"""

from __future__ import annotations

import io
import csv
import json
import warnings
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import baselines as bl
from . import cgm_vae
from . import cgm_svae
from .seeding import derive_seed
from .synthdata import GenConfig, UserRecordSet, oracle_loglik

__all__ = [
    "MetricValue",
    "EvalReport",
    "HistogramSpec",
    "histogram_probs",
    "jsd_bits",
    "jsd_per_slider",
    "align_proposals",
    "sample_predictions",
    "record_loglik",
    "ll_report",
    "jsd_report",
    "CurveResult",
    "personalization_curve",
    "clustering_purity",
    "report_json_text",
    "curve_csv_text",
    "trajectories_csv_text",
    "histogram_csv_text",
]


@dataclass(frozen=True)
class MetricValue:
    value: float
    stderr: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("metric count must be >= 1")
        if self.stderr < 0:
            raise ValueError("metric standard error must be >= 0")


@dataclass
class EvalReport:
    """Named metric values plus the provenance block of the producing run."""

    metrics: dict[str, MetricValue]
    provenance: dict[str, str] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "metrics": {
                name: {"value": m.value, "stderr": m.stderr, "count": m.count}
                for name, m in self.metrics.items()
            },
            "provenance": dict(self.provenance),
        }


@dataclass(frozen=True)
class HistogramSpec:
    """Binning policy for slider histograms; fixed so JSD is reproducible."""

    bins: int = 50
    lo: float = -1.0
    hi: float = 1.0
    clamp: bool = True

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("need at least two bins")
        if not self.lo < self.hi:
            raise ValueError("histogram range is empty")


def histogram_probs(samples, spec: HistogramSpec = HistogramSpec()) -> np.ndarray:
    """Normalized bin probabilities of a 1-D sample set."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("cannot histogram an empty sample set")
    if spec.clamp:
        samples = np.clip(samples, spec.lo, spec.hi)
    counts, _ = np.histogram(samples, bins=spec.bins, range=(spec.lo, spec.hi))
    total = counts.sum()
    if total == 0:
        raise ValueError("no samples fall inside the histogram range")
    return counts / total


def jsd_bits(p, q) -> float:
    """Jensen-Shannon divergence between probability vectors, in bits.

    Zero-count bins follow the ``0 * log 0 = 0`` convention exactly, so
    the value is bounded by 1 bit and symmetric in its arguments.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("probability vectors must share a shape")
    m = 0.5 * (p + q)

    def half_kl(a):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / m[mask])))

    return 0.5 * half_kl(p) + 0.5 * half_kl(q)


def jsd_per_slider(
    samples_a, samples_b, spec: HistogramSpec = HistogramSpec()
) -> tuple[np.ndarray, float]:
    """Per-slider JSD between two sample sets plus the mean across sliders."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both sample sets must be nonempty")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("sample sets must be (n, sliders) with equal slider count")
    values = np.array(
        [
            jsd_bits(histogram_probs(a[:, d], spec), histogram_probs(b[:, d], spec))
            for d in range(a.shape[1])
        ]
    )
    return values, float(values.mean())


def align_proposals(proposals, references) -> tuple[tuple[int, ...], float]:
    """Best one-to-one matching of references to distinct proposals.

    Exhaustive search over injections (references are few by construction),
    iterated in lexicographic order with strict improvement, so ties break
    toward the lexicographically smallest assignment.  Returns the chosen
    proposal index per reference and the mean squared error per slider
    coordinate under that matching.
    """
    proposals = np.asarray(proposals, dtype=np.float64)
    references = np.asarray(references, dtype=np.float64)
    if proposals.ndim != 2 or references.ndim != 2:
        raise ValueError("proposals and references must be 2-D")
    k, e = proposals.shape[0], references.shape[0]
    if k < e:
        raise ValueError(f"need at least as many proposals ({k}) as references ({e})")
    if proposals.shape[1] != references.shape[1]:
        raise ValueError("slider dimensions differ")
    cost = ((references[:, None, :] - proposals[None, :, :]) ** 2).sum(axis=2)  # (e, k)
    best: tuple[int, ...] | None = None
    best_cost = np.inf
    for assignment in permutations(range(k), e):
        total = cost[np.arange(e), assignment].sum()
        if total < best_cost:
            best_cost = total
            best = assignment
    return tuple(best), float(best_cost / (e * references.shape[1]))


def sample_predictions(model, x, k: int, seed) -> np.ndarray:
    """``k`` slider samples from any trained model's predictive distribution."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(model, cgm_vae.CgmVaeModel):
        return cgm_vae.propose_edits(x, k, model, rng)
    if isinstance(model, bl.GaussianMlpModel):
        from . import nets

        p = nets.apply_gaussian_head(model.net, np.asarray(x, dtype=np.float64))
        eps = rng.standard_normal((k, model.config.y_dim))
        return p.mean.value + np.exp(0.5 * p.log_var.value) * eps
    if isinstance(model, bl.MdnModel):
        return np.stack([bl.mdn_sample(x, model, rng) for _ in range(k)])
    raise TypeError(f"no prediction sampler for {type(model).__name__}")


def record_loglik(model, record, s_samples: int, seed) -> float:
    """Per-record log p(y | x): exact where available, estimated otherwise."""
    if isinstance(model, cgm_vae.CgmVaeModel):
        return cgm_vae.predictive_loglik(record.x, record.y, model, s_samples, seed)
    if isinstance(model, bl.GaussianMlpModel):
        return float(bl.gaussian_mlp_loglik(record.x, record.y, model).value)
    if isinstance(model, bl.MdnModel):
        return float(bl.mdn_loglik(record.x, record.y, model).value)
    if isinstance(model, GenConfig):
        return oracle_loglik(record, model)
    raise TypeError(f"no log-likelihood rule for {type(model).__name__}")


def ll_report(model, records, s_samples: int = 1000, seed: int = 0, provenance=None) -> EvalReport:
    """Mean and standard error of per-record predictive log-likelihood."""
    if len(records) == 0:
        raise ValueError("empty test set")
    values = np.array(
        [
            record_loglik(model, r, s_samples, derive_seed(seed, "ll-record", i))
            for i, r in enumerate(records)
        ]
    )
    stderr = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return EvalReport(
        metrics={"predictive_ll": MetricValue(float(values.mean()), stderr, len(values))},
        provenance=dict(provenance or {}),
    )


def jsd_report(
    model,
    records,
    spec: HistogramSpec = HistogramSpec(),
    draws: int = 10,
    seed: int = 0,
    provenance=None,
) -> tuple[EvalReport, np.ndarray, np.ndarray]:
    """Marginal-histogram JSD between held-out truth and pooled model samples.

    Pools ``draws`` predictive samples per test record, then compares the
    per-slider marginals.  Returns the report plus the two sample blocks
    (truth, model pool) for histogram emission.
    """
    if len(records) == 0:
        raise ValueError("empty test set")
    truth = np.stack([r.y for r in records])
    pool = np.concatenate(
        [
            sample_predictions(model, r.x, draws, derive_seed(seed, "jsd-record", i))
            for i, r in enumerate(records)
        ]
    )
    values, mean = jsd_per_slider(truth, pool, spec)
    metrics = {
        "jsd_mean": MetricValue(
            mean,
            float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0,
            len(values),
        )
    }
    for d, v in enumerate(values):
        metrics[f"jsd_slider_{d}"] = MetricValue(float(v), 0.0, 1)
    return EvalReport(metrics=metrics, provenance=dict(provenance or {})), truth, pool


@dataclass
class CurveResult:
    """Personalization curve: points are (n_cond, mean, stderr) over users."""

    grid: list[int]
    means: list[float]
    stderrs: list[float]
    trajectories: dict[str, list[float]]
    skipped: int


def personalization_curve(
    model: cgm_svae.CgmSvaeModel,
    users,
    grid=(0, 1, 2, 5, 10, 20, 30),
    n_eval: int = 20,
    s_samples: int = 256,
    seed: int = 0,
) -> CurveResult:
    """Normalized predictive log-likelihood versus records seen per user.

    For every user the evaluated block is FIXED: the ``n_eval`` records at
    positions ``max(grid)..max(grid)+n_eval``.  Conditioning on ``n`` uses
    the user's first ``n`` records, so points differ only through the
    inferred style posterior.  Values are normalized by subtracting each
    user's zero-conditioning point.  Users with too few records are
    skipped with a warning and counted in the result.
    """
    grid = [int(n) for n in grid]
    if any(n < 0 for n in grid) or len(grid) == 0:
        raise ValueError("grid must be nonempty with nonnegative entries")
    if 0 not in grid:
        raise ValueError("grid must contain 0 (the normalization point)")
    top = max(grid)
    trajectories: dict[str, list[float]] = {}
    skipped = 0
    for user in users:
        if len(user) < top + n_eval:
            warnings.warn(
                f"user {user.user_id!r} has {len(user)} records, "
                f"needs {top + n_eval}; skipping"
            )
            skipped += 1
            continue
        eval_idx = list(range(top, top + n_eval))
        user_seed = derive_seed(seed, f"curve:{user.user_id}")
        levels = []
        for n in grid:
            view = UserRecordSet(
                user.user_id,
                np.vstack([user.x[:n], user.x[eval_idx]]),
                np.vstack([user.y[:n], user.y[eval_idx]]),
                user.group,
            )
            levels.append(
                cgm_svae.personalized_predictive_ll(
                    view, n, n_eval, model, s_samples=s_samples, seed=user_seed
                )
            )
        base = levels[grid.index(0)]
        trajectories[user.user_id] = [v - base for v in levels]
    if not trajectories:
        raise ValueError("no user had enough records for the requested grid")
    block = np.array(list(trajectories.values()))  # (users, len(grid))
    means = block.mean(axis=0)
    if block.shape[0] > 1:
        stderrs = block.std(axis=0, ddof=1) / np.sqrt(block.shape[0])
    else:
        stderrs = np.zeros(len(grid))
    return CurveResult(
        grid=grid,
        means=[float(v) for v in means],
        stderrs=[float(v) for v in stderrs],
        trajectories=trajectories,
        skipped=skipped,
    )


def clustering_purity(assignments, labels) -> float:
    """Fraction of users whose cluster's majority ground-truth group they share."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.shape != labels.shape or assignments.size == 0:
        raise ValueError("assignments and labels must be equal-length and nonempty")
    correct = 0
    for cluster in np.unique(assignments):
        members = labels[assignments == cluster]
        _, counts = np.unique(members, return_counts=True)
        correct += counts.max()
    return float(correct / assignments.size)


def report_json_text(report: EvalReport) -> str:
    return json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"


def curve_csv_text(result: CurveResult) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["n_cond", "mean", "stderr"])
    for n, m, s in zip(result.grid, result.means, result.stderrs):
        writer.writerow([n, repr(float(m)), repr(float(s))])
    return out.getvalue()


def trajectories_csv_text(result: CurveResult) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["user_id", "n_cond", "normalized_ll"])
    for uid, levels in result.trajectories.items():
        for n, v in zip(result.grid, levels):
            writer.writerow([uid, n, repr(float(v))])
    return out.getvalue()


def histogram_csv_text(truth_column, model_column, spec: HistogramSpec = HistogramSpec()) -> str:
    """One slider's binned marginals: ``bin_left, bin_right, p_true, p_model``."""
    p_true = histogram_probs(truth_column, spec)
    p_model = histogram_probs(model_column, spec)
    edges = np.linspace(spec.lo, spec.hi, spec.bins + 1)
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["bin_left", "bin_right", "p_true", "p_model"])
    for i in range(spec.bins):
        writer.writerow(
            [repr(float(edges[i])), repr(float(edges[i + 1])), repr(float(p_true[i])), repr(float(p_model[i]))]
        )
    return out.getvalue()
