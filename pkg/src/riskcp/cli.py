"""Command-line entry point: ``riskcp <subcommand> [flags]``.

Exit codes: 0 success, 2 user or validation error, 1 internal error.
Every run writes ``run_report.json`` next to its outputs; its
``payload_sha256`` hashes the output files only, so it is stable across
re-runs while the timings are not.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from riskcp import __version__
from riskcp.classifier import (
    TrainConfig,
    TrainingError,
    accuracy,
    fit_bagged_logistic,
    fit_knn,
    fit_logistic,
    load_model,
)
from riskcp.conformal import CalibrationTable, FingerprintMismatch, calibrate, predict_batch
from riskcp.core import DataError, Dataset, SplitSpec, load_csv, read_table, save_csv, split, synth_benchmark
from riskcp.explain import NotRejectedError, PerturbConfig, explain_reject
from riskcp.genmodel import (
    DivergenceError,
    GanEnsemble,
    GanTrainConfig,
    assemble_evolved,
    compare_marginals,
    gan_fit,
    gan_sample,
    samples_to_dataset,
    select_fraction,
)
from riskcp.metrics import alpha_sweep, coverage_bound, coverage_trials, ranking, set_confusion
from riskcp.setpredictors import (
    MondrianPredictor,
    NaivePredictor,
    RapsPredictor,
    TopKPredictor,
    comparison_table,
    write_comparison_csv,
)

logger = logging.getLogger("riskcp")

SCHEMA_VERSION = "1"
DEFAULT_ALPHAS = "0.05,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


USER_ERRORS = (UsageError, DataError, NotRejectedError, FingerprintMismatch, FileNotFoundError, KeyError)


# ---------------------------------------------------------------- parsing


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _shared(p: argparse.ArgumentParser, alpha: float = 0.05) -> None:
    p.add_argument("--input", help="input dataset CSV")
    p.add_argument("--output-dir", default=".", help="directory for reports (default: .)")
    p.add_argument("--alpha", type=float, default=alpha, help="significance level in (0, 1)")
    p.add_argument("--alphas", type=_floats, default=DEFAULT_ALPHAS, help="comma list of significance levels")
    p.add_argument("--method", choices=["mondrian", "naive", "topk", "raps"], default="mondrian")
    p.add_argument("--smoothed", action="store_true", help="use (count + 1) / (n + 1) p-values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--label-column", default="label")
    p.add_argument("--config", help="flat key=value file; flags override it")


def _model_flags(p):
    p.add_argument("--model-type", choices=["logistic", "knn"], default="logistic")
    p.add_argument("--k", type=_positive_int, default=5, help="neighbours for --model-type knn")
    p.add_argument("--epochs", type=_positive_int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--ensemble", type=int, default=0, help="bag this many logistic models (0 = single model)")
    p.add_argument("--ratios", type=_floats, default="2,1,1", help="train,calibration,test ratios")
    p.add_argument("--no-stratify", action="store_true")


def _comparison_flags(p):
    p.add_argument("--targets", type=_names, default="TI,T-EV", help="labels counted as detections")
    p.add_argument("--raps-lambda", type=float, default=0.01)
    p.add_argument("--raps-kreg", type=_positive_int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskcp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"riskcp {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a Gaussian-mixture benchmark dataset")
    _shared(p)
    p.add_argument("--per-class", type=_ints, required=True, help="comma list of class counts")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--sep", type=float, default=3.0)
    p.add_argument("--labels", type=_names, help="comma list of label names")

    p = sub.add_parser("gan-train", help="train a conformalized GAN ensemble on one class")
    _shared(p, alpha=0.1)
    p.add_argument("--class", dest="cls", required=True, help="label whose rows are modelled")
    p.add_argument("--m", type=_positive_int, default=5)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--noise-dim", type=_positive_int, default=8)
    p.add_argument("--hidden", type=_positive_int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=_positive_int, default=64)

    p = sub.add_parser("gan-sample", help="draw rows from a trained ensemble")
    _shared(p)
    p.add_argument("--ensemble", required=True, help="ensemble JSON from gan-train")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--keep", type=float, default=1.0, help="fraction of samples kept")
    p.add_argument("--label", help="label written for the samples (default: ensemble class)")
    p.add_argument("--reference", help="dataset CSV for marginal diagnostics")

    p = sub.add_parser("evolve", help="assemble a TF / TI / T-EV dataset")
    _shared(p)
    p.add_argument("--generated-ti", help="sample CSV of generated infected rows")
    p.add_argument("--generated-tf", help="sample CSV of generated trojan-free rows")
    p.add_argument("--tf-label", default="TF")
    p.add_argument("--ti-label", default="TI")
    p.add_argument("--evolved-label", default="T-EV")

    p = sub.add_parser("fit", help="split, fit a classifier and calibrate it")
    _shared(p)
    _model_flags(p)

    p = sub.add_parser("predict", help="Mondrian prediction records for a dataset")
    _shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--calibration", required=True)

    p = sub.add_parser("evaluate", help="alpha sweep, confusion and method comparison")
    _shared(p)
    p.add_argument("--model", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--cal-data", help="calibration CSV; enables the method comparison")
    _comparison_flags(p)

    p = sub.add_parser("rank", help="rank accepted target predictions by confidence")
    _shared(p)
    p.add_argument("--targets", type=_names, default="T-EV")

    p = sub.add_parser("explain", help="calibrated explanation of a rejected instance")
    _shared(p, alpha=0.5)
    p.add_argument("--model", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--id", dest="instance_id", required=True)
    p.add_argument("--n-perturb", type=int, default=200)
    p.add_argument("--sigma-scale", type=float, default=0.1)
    p.add_argument("--kernel-width", type=float)
    p.add_argument("--top-j", type=_positive_int, default=5)

    p = sub.add_parser("coverage-check", help="Monte-Carlo check of the coverage guarantee")
    _shared(p)
    p.add_argument("--trials", type=_positive_int, default=30)
    p.add_argument("--n-cal", type=_positive_int, default=500)
    p.add_argument("--n-test", type=_positive_int, default=1000)
    p.add_argument("--n-train", type=_positive_int, default=500)
    p.add_argument("--class-weights", type=_floats, default="1,1,1")
    p.add_argument("--dim", type=_positive_int, default=4)
    p.add_argument("--sep", type=float, default=1.5)

    p.set_defaults(alphas=None)

    p = sub.add_parser("pipeline", help="split, fit, calibrate, predict and report")
    _shared(p)
    _model_flags(p)
    _comparison_flags(p)
    p.add_argument("--rank-targets", type=_names, default="T-EV")
    return parser


def _read_config(path: str) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        cfg = _read_config(known.config)
        sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        for sp in sub_action.choices.values():
            dests = {a.dest: a for a in sp._actions}
            defaults = {}
            for key, value in cfg.items():
                key = {"class": "cls", "id": "instance_id"}.get(key, key)
                action = dests.get(key)
                if action is None:
                    continue
                if isinstance(action, argparse._StoreTrueAction):
                    defaults[key] = value.lower() in ("1", "true", "yes", "on")
                else:
                    defaults[key] = value
                # a value from the file satisfies a required flag
                action.required = False
            sp.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- run plumbing


class Run:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.output_dir)
        self.timings: dict[str, float] = {}
        self.outputs: list[str] = []
        self.warnings: list[str] = []
        self.stage_name = "setup"

    @contextmanager
    def stage(self, name: str):
        self.stage_name = name
        t0 = time.perf_counter()
        yield
        self.timings[name] = round((time.perf_counter() - t0) * 1000.0, 3)

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        if name not in self.outputs:
            self.outputs.append(name)
        return self.out / name

    def warn(self, msg: str) -> None:
        logger.warning(msg)
        self.warnings.append(msg)

    def write_json(self, name: str, doc) -> None:
        self.path(name).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")

    def config_echo(self) -> dict:
        echo = {}
        for k, v in sorted(vars(self.args).items()):
            if k in ("verbose",):
                continue
            echo[k] = v
        return echo

    def finish(self) -> dict:
        digest = hashlib.sha256()
        for name in sorted(self.outputs):
            digest.update(name.encode() + b"\0")
            digest.update((self.out / name).read_bytes())
        report = {
            "schema_version": SCHEMA_VERSION,
            "tool_version": __version__,
            "command": self.args.command,
            "config": self.config_echo(),
            "timings_ms": self.timings,
            "outputs": sorted(self.outputs),
            "warnings": self.warnings,
            "payload_sha256": digest.hexdigest(),
        }
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "run_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        return report


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise UsageError(msg)


def _alpha_ok(a: float) -> bool:
    return 0 < a < 1


def _need_file(path, flag: str) -> Path:
    _require(path is not None, f"{flag} is required")
    p = Path(path)
    _require(p.is_file(), f"{flag}: no such file {p}")
    return p


def _fmt(v: float) -> str:
    return repr(float(v))


def _load_dataset(args, labels=None) -> Dataset:
    return load_csv(_need_file(args.input, "--input"), args.label_column, labels=labels)


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(args.lr, args.epochs, args.l2, args.batch_size, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _fit_model(args, train: Dataset):
    if args.model_type == "knn":
        _require(args.k <= len(train), f"--k {args.k} exceeds training size {len(train)}")
        return fit_knn(train, args.k)
    cfg = _train_config(args)
    if args.ensemble and args.ensemble > 0:
        return fit_bagged_logistic(train, cfg, args.ensemble)
    return fit_logistic(train, cfg)


def _split_spec(args) -> SplitSpec:
    _require(len(args.ratios) == 3, "--ratios needs three values")
    return SplitSpec(tuple(args.ratios), args.seed, not args.no_stratify)


def write_predictions(records, labels, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *(f"p_{lab}" for lab in labels), "set", "y_pred", "confidence", "credibility", "rejected", "alpha"])
        for r in records:
            w.writerow([
                r.id,
                *(_fmt(p) for p in r.p_values),
                "|".join(labels[k] for k in r.prediction_set),
                labels[r.point_prediction],
                _fmt(r.confidence),
                _fmt(r.credibility),
                "true" if r.rejected else "false",
                _fmt(r.alpha),
            ])


def read_predictions(path):
    """Parse a predictions CSV back into ``(labels, records)``."""
    from riskcp.conformal import PredictionRecord

    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        labels = tuple(c[2:] for c in reader.fieldnames if c.startswith("p_"))
        _require(len(labels) >= 2, f"{path}: not a predictions file")
        records = []
        for row in reader:
            members = tuple(labels.index(s) for s in row["set"].split("|") if s)
            records.append(PredictionRecord(
                row["id"],
                tuple(float(row[f"p_{lab}"]) for lab in labels),
                members,
                labels.index(row["y_pred"]),
                float(row["confidence"]),
                float(row["credibility"]),
                row["rejected"] == "true",
                float(row["alpha"]),
            ))
    return labels, records


def write_sweep(rows, labels, csv_path, json_path) -> None:
    with Path(csv_path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sig", "mean_err", "avg_c", "n_correct", "n",
                    *(f"err_{lab}" for lab in labels), *(f"avg_c_{lab}" for lab in labels)])
        for r in rows:
            w.writerow([_fmt(r.sig), _fmt(r.mean_err), _fmt(r.avg_c), r.n_correct, r.n,
                        *(_fmt(r.class_err[lab]) for lab in labels),
                        *(_fmt(r.class_avg_c[lab]) for lab in labels)])
    doc = {"schema_version": SCHEMA_VERSION, "labels": list(labels), "rows": [r.to_dict() for r in rows]}
    Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_ranking(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "id", "y_pred", "confidence", "credibility"])
        for i, (rid, lab, conf, cred) in enumerate(rows, start=1):
            w.writerow([i, rid, lab, _fmt(conf), _fmt(cred)])


def _method_records(args, model, cal: Dataset | None, table, test: Dataset):
    """Mondrian records, plus per-row sets for the selected method."""
    records = predict_batch(model, table, test, args.alpha, args.smoothed, args.threads)
    if args.method == "mondrian":
        return records, records
    _require(cal is not None, f"--method {args.method} needs calibration data")
    pred = {
        "naive": lambda: NaivePredictor(model),
        "topk": lambda: TopKPredictor(model),
        "raps": lambda: RapsPredictor(model, args.raps_lambda, args.raps_kreg),
    }[args.method]().calibrate(cal, args.alpha)
    mask = pred.predict_mask(test.X)
    method_records = [
        r.__class__(r.id, r.p_values, tuple(np.flatnonzero(m).tolist()), r.point_prediction,
                    r.confidence, r.credibility, not m.any(), r.alpha)
        for r, m in zip(records, mask)
    ]
    return records, method_records


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, run: Run) -> None:
    _require(args.dim >= 1, "--dim must be >= 1")
    _require(len(args.per_class) >= 2 and all(c > 0 for c in args.per_class),
             "--per-class needs at least two positive counts")
    _require(args.sep >= 0, "--sep must be >= 0")
    with run.stage("synth"):
        ds = synth_benchmark(args.per_class, args.dim, args.sep, args.seed, args.labels)
        save_csv(ds, run.path("dataset.csv"), args.label_column)
    print(f"wrote {len(ds)} rows, {ds.n_features} features, labels {list(ds.labels)}")


def cmd_gan_train(args, run: Run) -> None:
    _require(_alpha_ok(args.alpha), "--alpha must be in (0, 1)")
    _require(args.epochs >= 0, "--epochs must be >= 0")
    with run.stage("load"):
        ds = _load_dataset(args)
        _require(args.cls in ds.labels, f"--class {args.cls!r} not among labels {list(ds.labels)}")
        real = ds.where_label(args.cls)
    try:
        cfg = GanTrainConfig(m=args.m, noise_dim=args.noise_dim, hidden=args.hidden, epochs=args.epochs,
                             learning_rate=args.lr, batch_size=args.batch_size, alpha=args.alpha, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _require(len(real) >= 2 * cfg.batch_size,
             f"class {args.cls!r} has {len(real)} rows; need >= {2 * cfg.batch_size} for batch size {cfg.batch_size}")
    if args.epochs == 0:
        run.warn("--epochs 0: ensemble networks are untrained")
    with run.stage("train"):
        ens = gan_fit(real, cfg, threads=args.threads)
        ens.save(run.path("ensemble.json"))
    with run.stage("diagnostics"):
        synth = gan_sample(ens, len(real), args.seed)
        rows = compare_marginals(real, synth)
        _write_marginals(rows, run.path("marginals.csv"))
    lo, hi = ens.interval
    print(f"trained {ens.m} pairs on {len(real)} {args.cls} rows; interval [{lo:.4f}, {hi:.4f}]")


def _write_marginals(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "mean_diff", "std_ratio", "ks"])
        for r in rows:
            w.writerow([r["feature"], _fmt(r["mean_diff"]), _fmt(r["std_ratio"]), _fmt(r["ks"])])


def cmd_gan_sample(args, run: Run) -> None:
    _require(args.n >= 1, "--n must be >= 1")
    _require(0 < args.keep <= 1, "--keep must be in (0, 1]")
    with run.stage("load"):
        ens = GanEnsemble.load(_need_file(args.ensemble, "--ensemble"))
    label = args.label or ens.label or "generated"
    with run.stage("sample"):
        X = gan_sample(ens, args.n, args.seed)
        if args.keep < 1:
            X = select_fraction(X, args.keep, args.seed)
        names = ens.feature_names or tuple(f"f{j}" for j in range(X.shape[1]))
        ds = samples_to_dataset(X, label, (label, f"not-{label}"), names)
        save_csv(ds, run.path("samples.csv"), args.label_column)
    if args.reference:
        with run.stage("diagnostics"):
            ref = load_csv(_need_file(args.reference, "--reference"), args.label_column)
            if label in ref.labels:
                ref = ref.where_label(label)
            _require(ref.n_features == X.shape[1], "--reference has a different feature count")
            _write_marginals(compare_marginals(ref, X), run.path("marginals.csv"))
    print(f"wrote {X.shape[0]} generated rows labelled {label!r}")


def _generated_rows(path, label_column, d):
    if path is None:
        return None
    ids, X, _, _ = read_table(_need_file(path, "generated samples"), label_column)
    _require(X.shape[1] == d, f"{path}: {X.shape[1]} features, expected {d}")
    return Dataset(("gen", "other"), X, np.zeros(len(ids), dtype=int), ids)


def cmd_evolve(args, run: Run) -> None:
    with run.stage("assemble"):
        src = _load_dataset(args)
        extra = [lab for lab in src.labels if lab not in (args.tf_label, args.ti_label)]
        dropped = int(sum(src.class_counts()[src.label_index(lab)] for lab in extra))
        if dropped:
            run.warn(f"dropped {dropped} source rows with labels {extra}")
        gti = _generated_rows(args.generated_ti, args.label_column, src.n_features)
        gtf = _generated_rows(args.generated_tf, args.label_column, src.n_features)
        ds = assemble_evolved(src, gti, gtf, args.tf_label, args.ti_label, args.evolved_label)
        save_csv(ds, run.path("dataset.csv"), args.label_column)
    counts = dict(zip(ds.labels, ds.class_counts().tolist()))
    print(f"evolved dataset: {len(ds)} rows, counts {counts}")


def cmd_fit(args, run: Run) -> None:
    with run.stage("split"):
        ds = _load_dataset(args)
        train, cal, test = split(ds, _split_spec(args))
        for name, part in (("train.csv", train), ("calibration.csv", cal), ("test.csv", test)):
            save_csv(part, run.path(name), args.label_column)
    with run.stage("fit"):
        model = _fit_model(args, train)
        model.save(run.path("model.json"))
    with run.stage("calibrate"):
        table = calibrate(model, cal)
        table.save(run.path("calibration.json"))
    acc = accuracy(model, test) if len(test) else float("nan")
    run.write_json("fit_metrics.json", {
        "schema_version": SCHEMA_VERSION,
        "sizes": {"train": len(train), "calibration": len(cal), "test": len(test)},
        "calibration_counts": dict(zip(table.labels, table.counts)),
        "test_accuracy": acc if math.isfinite(acc) else None,
    })
    print(f"fit {args.model_type} on {len(train)} rows; test accuracy {acc:.4f}")


def _load_model_and_table(args):
    model = load_model(_need_file(args.model, "--model"))
    table = CalibrationTable.load(_need_file(args.calibration, "--calibration"))
    return model, table


def cmd_predict(args, run: Run) -> None:
    _require(_alpha_ok(args.alpha), "--alpha must be in (0, 1)")
    with run.stage("predict"):
        model, table = _load_model_and_table(args)
        ds = _load_dataset(args, model.labels)
        records = predict_batch(model, table, ds, args.alpha, args.smoothed, args.threads)
        write_predictions(records, model.labels, run.path("predictions.csv"))
    print(f"wrote {len(records)} prediction records ({sum(r.rejected for r in records)} rejected)")


def _reports(args, run, model, table, test, cal):
    with run.stage("sweep"):
        rows = alpha_sweep(model, table, test, args.alphas, args.smoothed, args.threads)
        write_sweep(rows, model.labels, run.path("sweep.csv"), run.path("sweep.json"))
    with run.stage("confusion"):
        records, method_records = _method_records(args, model, cal, table, test)
        conf = set_confusion(method_records, test.y)
        run.write_json("confusion.json", {
            "schema_version": SCHEMA_VERSION,
            "alpha": args.alpha,
            "method": args.method,
            "smoothed": args.smoothed,
            **conf.to_dict(),
        })
    if cal is not None:
        with run.stage("comparison"):
            targets = [t for t in args.targets if t in model.labels]
            if len(targets) < len(args.targets):
                run.warn(f"targets {sorted(set(args.targets) - set(targets))} not in label set")
            comp = comparison_table(model, cal, test, args.alphas, targets, args.smoothed,
                                    args.raps_lambda, args.raps_kreg)
            write_comparison_csv(comp, run.path("comparison.csv"))
    return records, rows


def cmd_evaluate(args, run: Run) -> None:
    _require(all(_alpha_ok(a) for a in args.alphas), "--alphas must lie in (0, 1)")
    _require(_alpha_ok(args.alpha), "--alpha must be in (0, 1)")
    model, table = _load_model_and_table(args)
    test = _load_dataset(args, model.labels)
    cal = None
    if args.cal_data:
        cal = load_csv(_need_file(args.cal_data, "--cal-data"), args.label_column, labels=model.labels)
    _, rows = _reports(args, run, model, table, test, cal)
    for r in rows:
        print(f"sig={r.sig:<5g} mean_err={r.mean_err:.3f} avg_c={r.avg_c:.3f} n_correct={r.n_correct}")


def cmd_rank(args, run: Run) -> None:
    with run.stage("rank"):
        labels, records = read_predictions(_need_file(args.input, "--input"))
        rows = ranking(records, labels, args.targets)
        write_ranking(rows, run.path("ranking.csv"))
    print(f"ranked {len(rows)} predictions")


def cmd_explain(args, run: Run) -> None:
    _require(_alpha_ok(args.alpha), "--alpha must be in (0, 1)")
    model, table = _load_model_and_table(args)
    ds = _load_dataset(args, model.labels)
    if args.instance_id not in ds.ids:
        raise UsageError(f"id not found: {args.instance_id!r}")
    x = ds.instance(ds.index_of(args.instance_id))
    try:
        cfg = PerturbConfig(args.n_perturb, args.sigma_scale, args.kernel_width, args.top_j, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with run.stage("explain"):
        exp = explain_reject(model, table, x, args.alpha, cfg, args.smoothed)
        run.write_json("explanation.json", exp.to_dict())
    print(exp.summary())


def cmd_coverage_check(args, run: Run) -> None:
    alphas = args.alphas if args.alphas else [args.alpha]
    _require(all(_alpha_ok(a) for a in alphas), "--alphas must lie in (0, 1)")
    with run.stage("trials"):
        res = coverage_trials(args.trials, args.n_cal, args.n_test, alphas, args.seed,
                              class_weights=args.class_weights, d=args.dim, separation=args.sep,
                              n_train=args.n_train, smoothed=True, threads=args.threads)
    n = args.trials * args.n_test
    rows = []
    for a, cov, cls in zip(res.alphas, res.coverage, res.class_coverage):
        bound = coverage_bound(a, n)
        rows.append({"alpha": a, "coverage": cov, "bound": bound, "pass": bool(cov >= bound),
                     "class_coverage": list(cls)})
        print(f"alpha={a:<5g} coverage={cov:.4f} bound={bound:.4f} {'PASS' if cov >= bound else 'FAIL'}")
    run.write_json("coverage.json", {"schema_version": SCHEMA_VERSION, "n_trials": args.trials,
                                     "n_cal": args.n_cal, "n_test": args.n_test, "rows": rows})


def cmd_pipeline(args, run: Run) -> None:
    _require(_alpha_ok(args.alpha), "--alpha must be in (0, 1)")
    _require(all(_alpha_ok(a) for a in args.alphas), "--alphas must lie in (0, 1)")
    cmd_fit(args, run)
    model = load_model(run.out / "model.json")
    table = CalibrationTable.load(run.out / "calibration.json")
    cal = load_csv(run.out / "calibration.csv", args.label_column, labels=model.labels)
    test = load_csv(run.out / "test.csv", args.label_column, labels=model.labels)
    with run.stage("predict"):
        records = predict_batch(model, table, test, args.alpha, args.smoothed, args.threads)
        write_predictions(records, model.labels, run.path("predictions.csv"))
    _reports(args, run, model, table, test, cal)
    with run.stage("rank"):
        write_ranking(ranking(records, model.labels, args.rank_targets), run.path("ranking.csv"))
    cov = sum(int(t) in r.prediction_set for r, t in zip(records, test.y)) / max(len(test), 1)
    print(f"mondrian coverage at alpha={args.alpha}: {cov:.4f}")


COMMANDS = {
    "synth": cmd_synth,
    "gan-train": cmd_gan_train,
    "gan-sample": cmd_gan_sample,
    "evolve": cmd_evolve,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "rank": cmd_rank,
    "explain": cmd_explain,
    "coverage-check": cmd_coverage_check,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"riskcp: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run = Run(args)
    try:
        COMMANDS[args.command](args, run)
        run.finish()
    except USER_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"riskcp: error in stage {run.stage_name!r}: {msg}", file=sys.stderr)
        return 2
    except (TrainingError, DivergenceError) as exc:
        print(f"riskcp: error in stage {run.stage_name!r}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # exit-code contract: anything unexpected is internal
        logger.debug("internal error", exc_info=True)
        print(f"riskcp: internal error in stage {run.stage_name!r}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
