"""Command-line entry point, dataset splitting, and checkpoint persistence.

Subcommands: ``synth``, ``train``, ``eval``, ``propose``, ``personalize``,
``curve``.  Every command takes an explicit ``--seed`` (no entropy-sourced
defaults) and all randomness flows through named streams derived from it,
so rerunning a command with the same arguments produces byte-identical
outputs.  File writes go through a temp-file-plus-rename, so an existing
checkpoint is never partially overwritten.

Checkpoints are versioned JSON: model kind, config echo, named parameter
tensors (decimal float64, lossless), the per-epoch training log, the seed,
and a hash of the config.  Dataset splits are 80/10/10 by default; the
hierarchical model splits BY RECORD WITHIN EACH USER (every user appears
in all three splits, as the personalization protocol requires), flat
models split globally by record.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import asdict

import numpy as np

from . import baselines as bl
from . import cgm_svae
from . import cgm_vae
from . import evalkit
from . import synthdata
from ._training import TrainConfig
from .seeding import derive_seed, stream_rng

__all__ = [
    "CHECKPOINT_VERSION",
    "split_dataset",
    "train_config_to_dict",
    "train_config_from_dict",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
    "run",
    "main",
]

CHECKPOINT_VERSION = "1"
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
OUT_DIR_ENV = "EDIT_SUGGEST_OUT"

MODEL_KINDS = ("cgm-vae", "cgm-svae", "mlp", "mdn")
LATENT_GRID = (2, 20)
COMPONENT_GRID = (3, 5, 10)


class CliError(ValueError):
    """User-facing configuration or input problem; message is the diagnostic."""


# ---------------------------------------------------------------- splitting


def split_dataset(records, fractions=DEFAULT_FRACTIONS, seed: int = 0, per_user: bool = False):
    """Deterministic (train, val, test) split with no record in two splits.

    ``per_user=True`` applies the fractions inside every user's record
    list, keeping each user present in all three splits; it fails loudly
    when a user is too small to give every split at least one record.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise CliError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
    rng = stream_rng(seed, "split")

    def partition(items):
        n = len(items)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        if n_train + n_val > n:
            n_val = n - n_train
        order = rng.permutation(n)
        train = [items[i] for i in order[:n_train]]
        val = [items[i] for i in order[n_train : n_train + n_val]]
        test = [items[i] for i in order[n_train + n_val :]]
        return train, val, test

    if not per_user:
        return partition(records)

    by_user: dict[str, list] = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    train, val, test = [], [], []
    for uid, items in by_user.items():
        u_train, u_val, u_test = partition(items)
        if not (u_train and u_val and u_test):
            raise CliError(
                f"user {uid!r} has only {len(items)} records; too few for a "
                f"per-user {fractions} split"
            )
        train.extend(u_train)
        val.extend(u_val)
        test.extend(u_test)
    return train, val, test


# ------------------------------------------------------------- persistence


def _write_text_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(_canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(d["hidden"])
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["hidden"] = tuple(d["hidden"])
    return TrainConfig(**d)


def _model_kind(model) -> str:
    return {
        cgm_vae.CgmVaeModel: "cgm-vae",
        cgm_svae.CgmSvaeModel: "cgm-svae",
        bl.GaussianMlpModel: "mlp",
        bl.MdnModel: "mdn",
    }[type(model)]


def checkpoint_dict(model, train_cfg: TrainConfig | None = None) -> dict:
    kind = _model_kind(model)
    config: dict = {"model": model.config.to_json_dict()}
    if kind == "mdn":
        config["n_mixture"] = model.n_mixture
    if train_cfg is not None:
        config["train"] = train_config_to_dict(train_cfg)
    seed = train_cfg.seed if train_cfg is not None else 0
    body = {
        "format_version": CHECKPOINT_VERSION,
        "model_kind": kind,
        "config": config,
        "seed": seed,
        "config_hash": config_hash({"model_kind": kind, "config": config, "seed": seed}),
        "params": {
            name: {"shape": list(value.shape), "data": [float(v) for v in value.ravel()]}
            for name, value in model.param_dict().items()
        },
        "train_log": model.train_log,
    }
    return body


def save_checkpoint(model, path, train_cfg: TrainConfig | None = None) -> None:
    """Serialize a model to versioned JSON; atomic, byte-stable, lossless."""
    _write_text_atomic(str(path), json.dumps(checkpoint_dict(model, train_cfg), sort_keys=True, indent=1) + "\n")


def _skeleton_from_config(kind: str, config: dict):
    model_cfg = cgm_vae.ModelConfig.from_json_dict(config["model"])
    if kind == "cgm-vae":
        return cgm_vae.init_cgm_vae(model_cfg, seed=0)
    if kind == "cgm-svae":
        return cgm_svae.init_cgm_svae(model_cfg, seed=0)
    if kind == "mlp":
        return bl.init_gaussian_mlp(model_cfg, seed=0)
    if kind == "mdn":
        return bl.init_mdn(model_cfg, config["n_mixture"], seed=0)
    raise CliError(f"unknown model kind {kind!r} in checkpoint")


def load_checkpoint(path):
    """Rebuild a model from a checkpoint, validating version and tensor shapes.

    Returns ``(model, body)`` where ``body`` is the parsed checkpoint dict.
    """
    try:
        with open(path) as fh:
            body = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CliError(f"cannot read checkpoint {path}: {err}") from err
    version = body.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CliError(
            f"checkpoint {path} has format version {version!r}, expected {CHECKPOINT_VERSION!r}"
        )
    kind = body["model_kind"]
    skeleton = _skeleton_from_config(kind, body["config"])
    expected = skeleton.param_dict()
    stored = body["params"]
    missing = sorted(set(expected) - set(stored))
    if missing:
        raise CliError(f"checkpoint {path} is missing tensors: {missing}")
    params = {}
    for name, spec in stored.items():
        if name not in expected:
            raise CliError(f"checkpoint {path} has unexpected tensor {name!r}")
        shape = tuple(spec["shape"])
        if shape != expected[name].shape:
            raise CliError(
                f"checkpoint {path}: tensor {name!r} has shape {list(shape)}, "
                f"config implies {list(expected[name].shape)}"
            )
        data = np.asarray(spec["data"], dtype=np.float64)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise CliError(
                f"checkpoint {path}: tensor {name!r} has {data.size} values "
                f"for shape {list(shape)}"
            )
        params[name] = data.reshape(shape)
    model = skeleton.with_params(params)
    model.train_log = body.get("train_log", [])
    return model, body


# ------------------------------------------------------------ IO utilities


def _load_records(data_path: str):
    path = data_path
    if os.path.isdir(path):
        path = os.path.join(path, "dataset.csv")
    if not os.path.exists(path):
        raise CliError(f"dataset file not found: {path}")
    return synthdata.load_dataset(path), path


def _dataset_id(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def _out_dir(args) -> str:
    out = args.out or os.environ.get(OUT_DIR_ENV) or "."
    os.makedirs(out, exist_ok=True)
    return out


def _provenance(args, body=None, data_path=None) -> dict[str, str]:
    prov = {"seed": str(args.seed)}
    if body is not None:
        prov["checkpoint_hash"] = body["config_hash"]
        prov["model_kind"] = body["model_kind"]
    if data_path is not None:
        prov["dataset_id"] = _dataset_id(data_path)
    return prov


# ------------------------------------------------------------- subcommands


def _cmd_synth(args) -> int:
    out = _out_dir(args)
    if args.gen_config:
        try:
            with open(args.gen_config) as fh:
                cfg = synthdata.GenConfig.from_json_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as err:
            raise CliError(f"bad generator config {args.gen_config}: {err}") from err
        cfg = synthdata.GenConfig.from_json_dict({**cfg.to_json_dict(), "seed": args.seed})
    else:
        cfg = synthdata.preset_config(args.preset, args.seed)
    users = synthdata.generate(cfg)
    if args.pseudo_users:
        users = synthdata.to_pseudo_users(users, chunk=args.pseudo_users)
    records = synthdata.flatten_users(users)
    dataset_path = os.path.join(out, "dataset.csv")
    tmp = dataset_path + ".tmp"
    synthdata.save_dataset(records, tmp)
    os.replace(tmp, dataset_path)
    sidecar = {
        "config": cfg.to_json_dict(),
        "seed": args.seed,
        "config_hash": config_hash(cfg.to_json_dict()),
        "users": len(users),
        "records": len(records),
    }
    _write_text_atomic(os.path.join(out, "genconfig.json"), json.dumps(sidecar, sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(records)} records for {len(users)} users to {dataset_path}")
    return 0


def _train_one(kind: str, cfg: TrainConfig, records, mdn_components: int | None):
    per_user = kind == "cgm-svae"
    train_recs, val_recs, _ = split_dataset(records, DEFAULT_FRACTIONS, cfg.seed, per_user)
    if kind == "cgm-vae":
        return cgm_vae.train(train_recs, val_recs, cfg)
    if kind == "cgm-svae":
        return cgm_svae.train(
            synthdata.group_records(train_recs), synthdata.group_records(val_recs), cfg
        )
    if kind == "mlp":
        return bl.train_gaussian_mlp(train_recs, val_recs, cfg)
    if kind == "mdn":
        return bl.train_mdn(train_recs, val_recs, cfg, n_mixture=mdn_components)
    raise CliError(f"unknown model kind {kind!r}")


def _best_val(model) -> float:
    return max(entry["val"] for entry in model.train_log)


def _cmd_train(args) -> int:
    records, data_path = _load_records(args.data)
    hidden = tuple(int(h) for h in args.hidden.split(",") if h)
    base = dict(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        lr=args.lr,
        latent_dim=args.latent_dim,
        n_components=args.components,
        hidden=hidden,
        activation=args.activation,
        pretrain_epochs=args.pretrain_epochs,
    )
    if args.grid:
        if args.model in ("cgm-vae", "cgm-svae"):
            combos = [
                dict(base, latent_dim=d, n_components=c)
                for d in LATENT_GRID
                for c in COMPONENT_GRID
            ]
        elif args.model == "mdn":
            combos = [dict(base, n_components=c) for c in COMPONENT_GRID]
        else:
            raise CliError("--grid applies to cgm-vae, cgm-svae, and mdn only")
    else:
        combos = [base]

    best_model, best_cfg, best_score = None, None, -np.inf
    sweep = []
    for combo in combos:
        cfg = TrainConfig(**combo)
        model = _train_one(args.model, cfg, records, args.mdn_components)
        score = _best_val(model)
        sweep.append(
            {"latent_dim": combo["latent_dim"], "n_components": combo["n_components"], "val": score}
        )
        if score > best_score:
            best_model, best_cfg, best_score = model, cfg, score
    out = _out_dir(args)
    ckpt_path = os.path.join(out, "checkpoint.json")
    save_checkpoint(best_model, ckpt_path, best_cfg)
    if args.grid:
        _write_text_atomic(
            os.path.join(out, "gridlog.json"), json.dumps(sweep, sort_keys=True, indent=1) + "\n"
        )
    print(
        f"trained {args.model} on {len(records)} records "
        f"(dataset {_dataset_id(data_path)}), best val {best_score:.4f}, "
        f"checkpoint at {ckpt_path}"
    )
    return 0


def _cmd_eval(args) -> int:
    model, body = load_checkpoint(args.checkpoint)
    records, data_path = _load_records(args.data)
    per_user = body["model_kind"] == "cgm-svae"
    _, _, test = split_dataset(records, DEFAULT_FRACTIONS, body["seed"], per_user)
    prov = _provenance(args, body, data_path)
    out = _out_dir(args)
    if args.metric == "ll":
        if body["model_kind"] == "cgm-svae":
            raise CliError("metric ll applies to flat models; use personalize/curve for cgm-svae")
        report = evalkit.ll_report(model, test, s_samples=args.samples, seed=args.seed, provenance=prov)
        _write_text_atomic(os.path.join(out, "report.json"), evalkit.report_json_text(report))
    elif args.metric == "jsd":
        if body["model_kind"] == "cgm-svae":
            raise CliError("metric jsd applies to flat models; use personalize/curve for cgm-svae")
        report, truth, pool = evalkit.jsd_report(
            model, test, draws=args.draws, seed=args.seed, provenance=prov
        )
        _write_text_atomic(os.path.join(out, "report.json"), evalkit.report_json_text(report))
        hist_dir = os.path.join(out, "histograms")
        for d in range(truth.shape[1]):
            _write_text_atomic(
                os.path.join(hist_dir, f"slider_{d:02d}.csv"),
                evalkit.histogram_csv_text(truth[:, d], pool[:, d]),
            )
    else:
        raise CliError(f"unknown metric {args.metric!r}")
    print(f"wrote {args.metric} report for {len(test)} test records to {out}/report.json")
    return 0


def _cmd_propose(args) -> int:
    model, body = load_checkpoint(args.checkpoint)
    if body["model_kind"] == "cgm-svae":
        raise CliError("propose needs a flat model; cgm-svae proposals go through personalize")
    records, data_path = _load_records(args.record)
    out = _out_dir(args)
    lines = ["record,proposal," + ",".join(f"y_{i}" for i in range(model.config.y_dim))]
    for i, r in enumerate(records):
        block = evalkit.sample_predictions(
            model, r.x, args.k, derive_seed(args.seed, f"propose:{i}")
        )
        for j, row in enumerate(block):
            lines.append(f"{i},{j}," + ",".join(repr(float(v)) for v in row))
    _write_text_atomic(os.path.join(out, "proposals.csv"), "\n".join(lines) + "\n")
    sidecar = dict(_provenance(args, body, data_path), k=str(args.k))
    _write_text_atomic(
        os.path.join(out, "proposals.json"), json.dumps(sidecar, sort_keys=True, indent=1) + "\n"
    )
    print(f"wrote {args.k} proposals for {len(records)} records to {out}/proposals.csv")
    return 0


def _require_svae(body, command: str):
    if body["model_kind"] != "cgm-svae":
        raise CliError(f"{command} needs a cgm-svae checkpoint, got {body['model_kind']}")


def _cmd_personalize(args) -> int:
    model, body = load_checkpoint(args.checkpoint)
    _require_svae(body, "personalize")
    records, data_path = _load_records(args.data)
    train_recs, _, test_recs = split_dataset(records, DEFAULT_FRACTIONS, body["seed"], per_user=True)
    train_users = {u.user_id: u for u in synthdata.group_records(train_recs)}
    test_users = {u.user_id: u for u in synthdata.group_records(test_recs)}
    out = _out_dir(args)
    per_user = {}
    for uid, test_u in test_users.items():
        train_u = train_users.get(uid)
        if train_u is None or len(train_u) < args.n_cond or len(test_u) < args.n_eval:
            continue
        view = synthdata.UserRecordSet(
            uid,
            np.vstack([train_u.x[: args.n_cond], test_u.x[: args.n_eval]]),
            np.vstack([train_u.y[: args.n_cond], test_u.y[: args.n_eval]]),
            test_u.group,
        )
        posterior = cgm_svae.user_posterior(view.take(range(args.n_cond)), model)
        pll = cgm_svae.personalized_predictive_ll(
            view, args.n_cond, args.n_eval, model,
            s_samples=args.samples, seed=derive_seed(args.seed, f"personalize:{uid}"),
        )
        per_user[uid] = {
            "map_category": int(np.argmax(posterior.values)),
            "posterior": [float(v) for v in posterior.values],
            "predictive_ll": pll,
        }
    if not per_user:
        raise CliError("no user had enough records for the requested n-cond/n-eval")
    payload = {"users": per_user, "provenance": _provenance(args, body, data_path)}
    _write_text_atomic(
        os.path.join(out, "personalization.json"),
        json.dumps(payload, sort_keys=True, indent=1) + "\n",
    )
    print(f"personalized predictions for {len(per_user)} users written to {out}/personalization.json")
    return 0


def _cmd_curve(args) -> int:
    model, body = load_checkpoint(args.checkpoint)
    _require_svae(body, "curve")
    records, data_path = _load_records(args.data)
    users = synthdata.group_records(records)
    grid = [int(v) for v in args.grid.split(",") if v]
    result = evalkit.personalization_curve(
        model, users, grid=grid, n_eval=args.n_eval, s_samples=args.samples, seed=args.seed
    )
    out = _out_dir(args)
    _write_text_atomic(os.path.join(out, "curve.csv"), evalkit.curve_csv_text(result))
    _write_text_atomic(os.path.join(out, "trajectories.csv"), evalkit.trajectories_csv_text(result))
    payload = {
        "points": [
            {"n_cond": n, "mean": m, "stderr": s}
            for n, m, s in zip(result.grid, result.means, result.stderrs)
        ],
        "skipped_users": result.skipped,
        "provenance": _provenance(args, body, data_path),
    }
    _write_text_atomic(
        os.path.join(out, "curve.json"), json.dumps(payload, sort_keys=True, indent=1) + "\n"
    )
    print(f"personalization curve over {len(result.trajectories)} users written to {out}/curve.csv")
    return 0


# ------------------------------------------------------------------ parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="editsuggest",
        description="Train and evaluate multimodal photo-edit prediction models "
        "on synthetic ground-truth data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", choices=sorted(synthdata.PRESETS))
    source.add_argument("--gen-config", help="path to a generator config JSON")
    p.add_argument("--pseudo-users", type=int, default=0, metavar="CHUNK",
                   help="split each user into pseudo-users of CHUNK records")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--model", choices=MODEL_KINDS, required=True)
    p.add_argument("--data", required=True, help="dataset CSV or directory holding dataset.csv")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--latent-dim", type=int, default=2, help="latent dimension (grid: 2, 20)")
    p.add_argument("--components", type=int, default=3, help="mixture components (grid: 3, 5, 10)")
    p.add_argument("--hidden", default="64,64", help="comma-separated hidden layer widths")
    p.add_argument("--activation", choices=("tanh", "relu"), default="tanh")
    p.add_argument("--mdn-components", type=int, default=None,
                   help="MDN mixture count (defaults to --components)")
    p.add_argument("--pretrain-epochs", type=int, default=0,
                   help="cgm-svae only: record-level warm-up epochs before the per-user objective")
    p.add_argument("--grid", action="store_true",
                   help="sweep the latent/component grids, select by validation objective")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=("ll", "jsd"), required=True)
    p.add_argument("--samples", type=int, default=1000, help="importance samples for ll")
    p.add_argument("--draws", type=int, default=10, help="proposals per record for jsd")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("propose", help="emit slider proposals for records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--record", required=True, help="dataset CSV with the records to edit")
    p.add_argument("--k", type=int, default=20)
    p.set_defaults(func=_cmd_propose)

    p = sub.add_parser("personalize", help="per-user posterior and predictive score")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-cond", type=int, default=10)
    p.add_argument("--n-eval", type=int, default=5)
    p.add_argument("--samples", type=int, default=256)
    p.set_defaults(func=_cmd_personalize)

    p = sub.add_parser("curve", help="personalization curve over a user dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default="0,1,2,5,10,20,30")
    p.add_argument("--n-eval", type=int, default=20)
    p.add_argument("--samples", type=int, default=256)
    p.set_defaults(func=_cmd_curve)

    for sp in sub.choices.values():
        sp.add_argument("--seed", type=int, required=True, help="global seed (required)")
        sp.add_argument("--out", default=None, help=f"output directory (default ${OUT_DIR_ENV} or .)")
    return parser


def run(argv) -> int:
    """Execute one subcommand; returns a process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.seed < 0:
            raise CliError("seed must be nonnegative")
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))
