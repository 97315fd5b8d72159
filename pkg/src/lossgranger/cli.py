"""Command-line entry points.

Every command resolves its configuration from built-in defaults, then an
optional ``--config`` JSON file, then explicit flags, and writes the resolved
values to ``manifest.json`` next to its outputs. Exit codes: 0 success,
1 user error (bad flags, config, paths or files), 2 internal or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import MaskingStrategy, explain_batch, granger_scores
from .benchmark import (
    SyntheticShiftSpec,
    generate_triple,
    sample_spec,
    standardize_triple,
)
from .data import dataset_to_csv, read_csv
from .errors import LossGrangerError, UserError
from .estimator import JointTrainConfig, build_pair, joint_train
from .evaluation import (
    evaluate_explainer,
    random_ranking_baseline,
    severity_sweep,
)
from .model_io import load_model, model_to_bytes

log = logging.getLogger("lossgranger")

MODEL_FILE = "model.lgm"
EXPLAINER_IDS = ("loss_granger", "random")


class CliUsageError(UserError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise CliUsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliUsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliUsageError("config file must hold a JSON object")
    return cfg


def _resolve(defaults: dict, config: dict, flags: dict) -> dict:
    unknown = sorted(set(config) - set(defaults))
    if unknown:
        raise CliUsageError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(defaults)
    out.update(config)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_outputs(out_dir, files: dict, command: str, config: dict, inputs: dict) -> None:
    """Write all outputs plus the manifest; nothing is written before this point."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, content in files.items():
        data = content.encode("utf-8") if isinstance(content, str) else content
        (out / name).write_bytes(data)
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items()},
        "outputs": sorted(files),
        "run_info": {"created_at": _dt.datetime.now(_dt.timezone.utc).isoformat()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v))


def _parse_samples(text: str | None, n: int) -> list[int]:
    if text is None or text == "all":
        return list(range(n))
    ids = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                ids.extend(range(lo, hi + 1))
            else:
                ids.append(int(part))
        except ValueError:
            raise CliUsageError(f"bad sample selector {part!r}") from None
    bad = [i for i in ids if not 0 <= i < n]
    if bad:
        raise CliUsageError(f"sample ids out of range [0, {n}): {bad[:5]}")
    return ids


def _parse_floats(text) -> list[float]:
    if isinstance(text, list):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise CliUsageError(f"bad number list {text!r}") from None


def _load_pair(path):
    model, estimator = load_model(path)
    if estimator is None:
        raise CliUsageError(f"{path} holds no loss estimator")
    return model, estimator


def _check_width(model, dataset, path):
    if dataset.n_features != model.n_features:
        raise CliUsageError(
            f"{path} has {dataset.n_features} features; the model expects {model.n_features}"
        )


# -- train ----------------------------------------------------------------

TRAIN_KEYS = {
    f: getattr(JointTrainConfig(), f)
    for f in JointTrainConfig.__dataclass_fields__  # type: ignore[attr-defined]
}


def cmd_train(args) -> None:
    flags = {
        "seed": args.seed,
        "objective": args.objective,
        "epochs": args.epochs,
        "lambda_aux": args.lambda_aux,
        "T": args.T,
        "batch_size": args.batch_size,
        "lr": args.lr,
    }
    resolved = _resolve(TRAIN_KEYS, _load_config(args.config), flags)
    try:
        config = JointTrainConfig(**resolved)
    except TypeError as exc:
        raise CliUsageError(str(exc)) from None
    dataset = read_csv(args.data)
    holdout = read_csv(args.holdout, dataset.n_classes) if args.holdout else None
    model, estimator = build_pair(dataset.n_features, dataset.n_classes, config)
    result = joint_train(dataset, model, estimator, config, holdout=holdout)

    history = _csv_text(
        ["epoch", "loss", "aux_loss", "spearman"],
        [[r["epoch"], _fmt(r["loss"]), _fmt(r["aux_loss"]), _fmt(r["spearman"])] for r in result.history],
    )
    split = {
        "train_indices": [int(i) for i in result.train_indices],
        "holdout_indices": [int(i) for i in result.holdout_indices],
    }
    files = {
        MODEL_FILE: model_to_bytes(result.model, result.estimator, dataset.feature_names),
        "history.csv": history,
        "split.json": json.dumps(split) + "\n",
    }
    inputs = {"data": args.data}
    if args.holdout:
        inputs["holdout"] = args.holdout
    _write_outputs(args.out, files, "train", config.resolved(), inputs)


# -- explain ----------------------------------------------------------------


def _strategy(text: str, reference_path, fallback_dataset) -> MaskingStrategy:
    if text.startswith("feature_mean"):
        ref = read_csv(reference_path) if reference_path else fallback_dataset
        return MaskingStrategy.parse(text, ref)
    return MaskingStrategy.parse(text)


def cmd_explain(args) -> None:
    defaults = {"strategy": "zero", "samples": "all", "workers": 1, "reference": None}
    flags = {
        "strategy": args.strategy,
        "samples": args.samples,
        "workers": args.workers,
        "reference": args.reference,
    }
    cfg = _resolve(defaults, _load_config(args.config), flags)
    model, estimator = _load_pair(args.model)
    dataset = read_csv(args.data)
    _check_width(model, dataset, args.data)
    strategy = _strategy(cfg["strategy"], cfg["reference"], dataset)
    ids = _parse_samples(cfg["samples"], dataset.n_samples)
    results = explain_batch(
        model, estimator, dataset.features[ids], strategy, sample_ids=ids, workers=int(cfg["workers"])
    )
    doc = {
        "schema_version": 1,
        "strategy": strategy.to_dict(),
        "attributions": [r.to_dict() for r in results],
    }
    rows = []
    for r in results:
        rank_of = np.empty(len(r.ranking), dtype=np.int64)
        rank_of[r.ranking] = np.arange(len(r.ranking))
        for j, name in enumerate(dataset.feature_names):
            rows.append(
                [r.sample_id, j, name, _fmt(r.base_estimate), _fmt(r.masked_estimates[j]),
                 _fmt(r.deltas[j]), int(rank_of[j])]
            )
    table = _csv_text(
        ["sample_id", "feature", "feature_name", "base_estimate", "masked_estimate", "delta", "rank"],
        rows,
    )
    files = {"attributions.json": json.dumps(doc, indent=2) + "\n", "attributions.csv": table}
    cfg["strategy_resolved"] = strategy.label
    inputs = {"model": args.model, "data": args.data}
    if cfg["reference"]:
        inputs["reference"] = cfg["reference"]
    _write_outputs(args.out, files, "explain", cfg, inputs)


# -- evaluate ----------------------------------------------------------------


def cmd_evaluate(args) -> None:
    defaults = {
        "k_percent": 15.0,
        "strategy": "zero",
        "samples": "all",
        "explainers": list(EXPLAINER_IDS),
        "seed": 0,
        "workers": 1,
        "reference": None,
        "plot_data": False,
    }
    flags = {
        "k_percent": args.k_percent,
        "strategy": args.strategy,
        "samples": args.samples,
        "explainers": args.explainers.split(",") if args.explainers else None,
        "seed": args.seed,
        "workers": args.workers,
        "reference": args.reference,
        "plot_data": True if args.plot_data else None,
    }
    cfg = _resolve(defaults, _load_config(args.config), flags)
    unknown = [e for e in cfg["explainers"] if e not in EXPLAINER_IDS]
    if unknown:
        raise CliUsageError(f"unknown explainers {unknown}; choose from {EXPLAINER_IDS}")
    model, estimator = _load_pair(args.model)
    dataset = read_csv(args.data)
    _check_width(model, dataset, args.data)
    strategy = _strategy(cfg["strategy"], cfg["reference"], dataset)
    ids = _parse_samples(cfg["samples"], dataset.n_samples)
    if not ids:
        raise CliUsageError("no samples selected for evaluation")
    X = dataset.features[ids]
    seed = int(cfg["seed"])
    k = float(cfg["k_percent"])

    def loss_granger_explainer(i, x):
        return granger_scores(model, estimator, x, strategy).ranking

    def random_explainer(i, x):
        return random_ranking_baseline(model.n_features, np.random.default_rng([seed, ids[i]]))

    explainers = {"loss_granger": loss_granger_explainer, "random": random_explainer}
    files, summary, per_sample, plot_rows = {}, [], [], []
    for name in cfg["explainers"]:
        report = evaluate_explainer(
            model, explainers[name], X, k, strategy, name, sample_ids=ids, workers=int(cfg["workers"])
        )
        files[f"report_{name}.json"] = report.to_json()
        summary.append(
            [name, _fmt(k), report.strategy, len(report.per_sample), _fmt(report.median),
             _fmt(report.p25), _fmt(report.p75)]
        )
        per_sample += [[name, i, _fmt(s)] for i, s in report.per_sample]
        plot_rows += [[name, _fmt(k), _fmt(s)] for _, s in report.per_sample]
    files["summary.csv"] = _csv_text(
        ["explainer", "k_percent", "strategy", "n", "median", "p25", "p75"], summary
    )
    files["scores.csv"] = _csv_text(["explainer", "sample_id", "delta_log_odds"], per_sample)
    if cfg["plot_data"]:
        files["plot_data.csv"] = _csv_text(["explainer", "k", "score"], plot_rows)
    inputs = {"model": args.model, "data": args.data}
    _write_outputs(args.out, files, "evaluate", cfg, inputs)


# -- synth-gen ----------------------------------------------------------------

SPEC_FIELDS = ("d", "N", "alpha", "beta", "delta_beta", "kappa", "num_classes")


def cmd_synth_gen(args) -> None:
    defaults = {f: None for f in SPEC_FIELDS}
    defaults.update({"seed": 0, "N": 5000, "num_classes": 4, "standardize": True})
    flags = {
        "seed": args.seed,
        "d": args.d,
        "N": args.n,
        "alpha": args.alpha,
        "beta": args.beta,
        "delta_beta": args.delta_beta,
        "kappa": args.kappa,
        "num_classes": args.classes,
        "standardize": False if args.raw else None,
    }
    cfg = _resolve(defaults, _load_config(args.config), flags)
    drawn = sample_spec(int(cfg["seed"]), d=cfg["d"], N=int(cfg["N"]), num_classes=int(cfg["num_classes"]))
    fields = {f: cfg[f] if cfg[f] is not None else getattr(drawn, f) for f in SPEC_FIELDS}
    spec = SyntheticShiftSpec(**fields, seed=int(cfg["seed"]))
    triple = generate_triple(spec)
    if cfg["standardize"]:
        triple = standardize_triple(triple, spec)
    names = ("original.csv", "corr_shifted.csv", "var_shifted.csv")
    files = {n: dataset_to_csv(ds) for n, ds in zip(names, triple)}
    realized = spec.realized()
    realized["standardized"] = bool(cfg["standardize"])
    files["spec.json"] = json.dumps(realized, indent=2, sort_keys=True) + "\n"
    cfg["realized_spec"] = realized
    _write_outputs(args.out, files, "synth-gen", cfg, {})


# -- severity-sweep ----------------------------------------------------------------


def cmd_severity_sweep(args) -> None:
    defaults = {"levels": [0.0, 0.5, 1.0, 2.0, 4.0], "seed": 0, "samples": "all"}
    flags = {"levels": args.levels, "seed": args.seed, "samples": args.samples}
    cfg = _resolve(defaults, _load_config(args.config), flags)
    cfg["levels"] = _parse_floats(cfg["levels"])
    model, estimator = _load_pair(args.model)
    dataset = read_csv(args.data)
    _check_width(model, dataset, args.data)
    ids = _parse_samples(cfg["samples"], dataset.n_samples)
    if not ids:
        raise CliUsageError("no samples selected for the sweep")
    curve = severity_sweep(model, estimator, dataset.features[ids], cfg["levels"], int(cfg["seed"]))
    files = {"sweep.csv": _csv_text(["noise_std", "mean_estimate"], [[_fmt(a), _fmt(b)] for a, b in curve])}
    _write_outputs(args.out, files, "severity-sweep", cfg, {"model": args.model, "data": args.data})


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lossgranger", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True, data=True):
        sp.add_argument("--config", help="JSON file of key/value settings")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        if model:
            sp.add_argument("--model", required=True, help=f"model file (e.g. {MODEL_FILE})")
        if data:
            sp.add_argument("--data", required=True, help="CSV with feature columns and 'label'")

    t = sub.add_parser("train", help="jointly train predictor and loss estimator")
    common(t, model=False)
    t.add_argument("--holdout", help="CSV used only for the held-out Spearman column")
    t.add_argument("--objective", choices=["contrastive", "dropout_calibration"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--lambda-aux", type=float, dest="lambda_aux")
    t.add_argument("--T", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="per-feature attributions for selected samples")
    common(e)
    e.add_argument("--strategy", help="zero | constant:<value> | feature_mean")
    e.add_argument("--reference", help="CSV supplying feature means (default: --data)")
    e.add_argument("--samples", help="row ids, e.g. '0,3,10-19'; 'all' (default) or '' for none")
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_explain)

    v = sub.add_parser("evaluate", help="delta log-odds fidelity report")
    common(v)
    v.add_argument("--k-percent", type=float, dest="k_percent")
    v.add_argument("--strategy")
    v.add_argument("--reference")
    v.add_argument("--samples")
    v.add_argument("--explainers", help=f"comma list from {','.join(EXPLAINER_IDS)}")
    v.add_argument("--plot-data", action="store_true", dest="plot_data",
                   help="also write long-format plot_data.csv (explainer, k, score)")
    v.add_argument("--workers", type=int)
    v.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("synth-gen", help="generate original / correlation- / variance-shifted sets")
    common(g, model=False, data=False)
    g.add_argument("--d", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--classes", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--delta-beta", type=float, dest="delta_beta")
    g.add_argument("--kappa", type=float)
    g.add_argument("--raw", action="store_true", help="skip standardisation by the original moments")
    g.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("severity-sweep", help="mean loss estimate under Gaussian input noise")
    common(s)
    s.add_argument("--levels", help="comma list of noise std devs, ascending from 0")
    s.add_argument("--samples")
    s.set_defaults(func=cmd_severity_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (UserError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"lossgranger {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except LossGrangerError as exc:
        print(f"lossgranger {args.command}: internal error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"lossgranger {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
