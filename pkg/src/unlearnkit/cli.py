"""Command-line harness: generate data, train, unlearn, compare.

One JSON experiment config drives everything; unknown keys are rejected
with the offending field named, since a silently ignored key would
invalidate a comparison. Reports are written as delimiter-separated text
plus a JSON-lines sibling; wall-clock timings go to a separate file so the
reports themselves are byte-reproducible (the generation timestamp lives
only in the header line).

Exit codes: 0 success, 2 usage/config error, 3 runtime numeric error,
4 at least one method failed inside a comparison.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Dataset, DatasetSplits, GenConfig, generate, load_dataset,
                   make_splits, save_dataset)
from .engine import (AccessLog, MethodKind, RunHistory, UnlearnConfig, dlfd_run,
                     errormax_run, finetune_run, neggrad_run, one_epoch_iterations,
                     retrain_run, _BatchStream, _ce_grads)
from .errors import ConfigError, DataFormatError, NumericError
from .metrics import (NomusReport, classification_accuracy, loss_histogram,
                      make_nomus_report, sample_losses, train_mia)
from .nn import MlpModel, init_model, load_model, model_to_bytes, save_model, sgd_step
from .ot import SinkhornConfig

_REPORT_SCHEMA = "unlearnkit-compare-v1"

_DEFAULT_CONFIG = {
    "schema_version": 1,
    "data": {
        "num_identities": 40, "samples_per_identity": 50, "task_classes": 4,
        "task_dim": 4, "identity_dim": 4, "input_dim": 16,
        "entanglement": 0.6, "noise_sigma": 0.1, "input_range": [0.0, 1.0],
        "seed": 42,
    },
    "splits": {
        "forget_identity_fraction": 0.1, "unseen_identity_fraction": 0.1,
        "test_fraction": 0.25, "seed": 42,
    },
    "model": {"hidden_dims": [32, 16], "feature_layer_index": None, "seed": 42},
    "original_training": {"epochs": 40, "learning_rate": 0.1, "batch_size": 50, "seed": 42},
    "unlearn": {
        "total_iterations": 0,      # 0 resolves to one epoch over the retain split
        "dlfd_steps": 5, "learning_rate": 0.003, "step_size": 0.02,
        "batch_size": 50, "forgetting_threshold": 0.05,
        "ce_weight_min": 0.0, "ce_weight_max": 1.0,
        "eval_every": 10, "seed": 42,
        "retrain_epochs": 0,        # 0 resolves to original_training.epochs
        "learning_rate_overrides": {},
        "sinkhorn": {"sharpness": 100.0, "max_iters": 1000, "tolerance": 1e-6},
    },
    "methods": ["FineTune", "NegGrad", "ErrorMax", "DLFD"],
    "report": {"histogram_bins": 20, "histogram_range": [0.0, 5.0]},
}


def _verbose() -> bool:
    return os.environ.get("UNLEARNKIT_VERBOSE", "") not in ("", "0")


def _info(msg: str) -> None:
    if _verbose():
        print(msg, file=sys.stderr)


def default_config() -> dict:
    return copy.deepcopy(_DEFAULT_CONFIG)


def _merge_strict(defaults, user, path: str) -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and key != "learning_rate_overrides":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be an object")
            merged[key] = _merge_strict(defaults[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path: str | None) -> dict:
    """Default config overlaid with the file at ``path`` (strict keys)."""
    if path is None:
        cfg = default_config()
    else:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config parse error at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge_strict(_DEFAULT_CONFIG, user, "")
    if cfg["schema_version"] != 1:
        raise ConfigError(f"unsupported schema_version {cfg['schema_version']}")
    for name in cfg["methods"]:
        kind = MethodKind.parse(name)
        if kind is MethodKind.RETRAIN:
            raise ConfigError("methods: Retrain is always included as the reference row")
    for name in cfg["unlearn"]["learning_rate_overrides"]:
        MethodKind.parse(name)
    return cfg


def apply_overrides(cfg: dict, seed: int | None, eval_every: int | None) -> dict:
    """--seed sets every per-component seed; --eval-every the evaluation cadence."""
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        for section in ("data", "splits", "model", "original_training", "unlearn"):
            cfg[section]["seed"] = seed
    if eval_every is not None:
        cfg["unlearn"]["eval_every"] = eval_every
    return cfg


def _gen_config(cfg: dict) -> GenConfig:
    d = cfg["data"]
    return GenConfig(
        num_identities=d["num_identities"], samples_per_identity=d["samples_per_identity"],
        task_classes=d["task_classes"], task_dim=d["task_dim"],
        identity_dim=d["identity_dim"], input_dim=d["input_dim"],
        entanglement=d["entanglement"], noise_sigma=d["noise_sigma"],
        input_range=tuple(d["input_range"]), seed=d["seed"],
    )


def _unlearn_config(cfg: dict, retain_size: int, method: MethodKind | None = None) -> UnlearnConfig:
    u = cfg["unlearn"]
    iters = u["total_iterations"]
    if iters == 0:
        iters = one_epoch_iterations(retain_size, u["batch_size"])
    epochs = u["retrain_epochs"]
    if epochs == 0:
        epochs = cfg["original_training"]["epochs"]
    lr = u["learning_rate"]
    if method is not None:
        for name, value in u["learning_rate_overrides"].items():
            if MethodKind.parse(name) is method:
                lr = value
    s = u["sinkhorn"]
    return UnlearnConfig(
        total_iterations=iters, dlfd_steps=u["dlfd_steps"], learning_rate=lr,
        step_size=u["step_size"], batch_size=u["batch_size"],
        forgetting_threshold=u["forgetting_threshold"],
        ce_weight_min=u["ce_weight_min"], ce_weight_max=u["ce_weight_max"],
        sinkhorn=SinkhornConfig(s["sharpness"], s["max_iters"], s["tolerance"]),
        eval_every=u["eval_every"], seed=u["seed"], retrain_epochs=epochs,
    )


def _train_dataset(splits: DatasetSplits) -> Dataset:
    """retain plus forget: the data the original model was trained on."""
    return Dataset(
        np.concatenate([splits.retain.inputs, splits.forget.inputs]),
        np.concatenate([splits.retain.labels, splits.forget.labels]),
        np.concatenate([splits.retain.identities, splits.forget.identities]),
        splits.input_range, None,
    )


def train_original(splits: DatasetSplits, cfg: dict) -> tuple[MlpModel, list[float], AccessLog]:
    """Train a fresh classifier on retain + forget; returns per-epoch mean losses."""
    data = _train_dataset(splits)
    tr = cfg["original_training"]
    dims = [data.inputs.shape[1], *cfg["model"]["hidden_dims"], int(data.labels.max()) + 1]
    model = init_model(dims, cfg["model"]["feature_layer_index"], seed=cfg["model"]["seed"])
    log = AccessLog()
    stream = _BatchStream(len(data), tr["batch_size"], [tr["seed"], 0])
    batches = one_epoch_iterations(len(data), tr["batch_size"])
    n_retain = len(splits.retain)
    epoch_losses = []
    it = 0
    for _ in range(tr["epochs"]):
        total = 0.0
        for _ in range(batches):
            it += 1
            idx = stream.next()
            log.record(it, "retain", idx[idx < n_retain])
            log.record(it, "forget", idx[idx >= n_retain] - n_retain)
            loss, grads = _ce_grads(model, data.inputs[idx], data.labels[idx])
            model = sgd_step(model, grads, tr["learning_rate"])
            total += loss
        epoch_losses.append(total / batches)
    return model, epoch_losses, log


def evaluate_method(model: MlpModel, splits: DatasetSplits, method: str,
                    mia_seed: int, wall_clock_s: float = 0.0) -> NomusReport:
    acc = classification_accuracy(model, splits.test)
    mia = train_mia(sample_losses(model, splits.forget, "forget"),
                    sample_losses(model, splits.unseen, "unseen"), seed=mia_seed)
    return make_nomus_report(method, acc, mia.accuracy, wall_clock_s)


def run_method(kind: MethodKind, model: MlpModel, splits: DatasetSplits,
               config: UnlearnConfig) -> tuple[MlpModel, RunHistory]:
    if kind is MethodKind.RETRAIN:
        return retrain_run(splits, model, config)
    if kind is MethodKind.FINETUNE:
        return finetune_run(model, splits, config)
    if kind is MethodKind.NEGGRAD:
        return neggrad_run(model, splits, config)
    if kind is MethodKind.ERRORMAX:
        return errormax_run(model, splits, config)
    return dlfd_run(model, splits, config)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def _write_history(path: Path, history: RunHistory) -> None:
    lines = ["iteration,branch,ce_weight,train_loss,forgetting_score"]
    for r in history.records:
        lines.append(",".join([str(r.iteration), r.branch, _fmt(r.ce_weight),
                               _fmt(r.train_loss), _fmt(r.forgetting_score)]))
    path.write_text("\n".join(lines) + "\n")


def _write_histograms(out: Path, tag: str, model: MlpModel, splits: DatasetSplits,
                      report_cfg: dict) -> None:
    lo, hi = report_cfg["histogram_range"]
    for name in ("forget", "unseen"):
        bins = loss_histogram(sample_losses(model, splits.split(name), name),
                              report_cfg["histogram_bins"], (lo, hi))
        lines = ["bin_lo,bin_hi,count"]
        for b in bins:
            hi_txt = "inf" if math.isinf(b.hi) else _fmt(b.hi)
            lines.append(f"{_fmt(b.lo)},{hi_txt},{b.count}")
        (out / f"hist_{tag}_{name}.csv").write_text("\n".join(lines) + "\n")


_REPORT_COLUMNS = ("method", "status", "test_accuracy", "mia_accuracy",
                   "forgetting_score", "nomus", "origin_model_sha256", "train_reads")


def _report_row(report: NomusReport | None, method: str, status: str,
                origin_sha: str, train_reads: str, error: str = "") -> dict:
    row = {"method": method, "status": status}
    if report is not None:
        row.update(test_accuracy=report.test_accuracy, mia_accuracy=report.mia_accuracy,
                   forgetting_score=report.forgetting_score, nomus=report.nomus)
    else:
        row.update(test_accuracy=None, mia_accuracy=None,
                   forgetting_score=None, nomus=None)
    row["origin_model_sha256"] = origin_sha
    row["train_reads"] = train_reads
    if error:
        row["error"] = error
    return row


def _write_reports(out: Path, rows: list[dict], cfg: dict,
                   timings: list[tuple[str, float]]) -> None:
    stamp = datetime.now(timezone.utc).isoformat()
    csv_lines = [f"# {_REPORT_SCHEMA} generated_at={stamp}", ",".join(_REPORT_COLUMNS)]
    for row in rows:
        csv_lines.append(",".join(_fmt(row.get(col)) for col in _REPORT_COLUMNS))
    (out / "report.csv").write_text("\n".join(csv_lines) + "\n")

    header = {"record": "header", "schema": _REPORT_SCHEMA, "generated_at": stamp,
              "tool_version": __version__, "config": cfg}
    jsonl = [json.dumps(header, sort_keys=True)]
    for row in rows:
        jsonl.append(json.dumps({"record": "row", **row}, sort_keys=True))
    (out / "report.jsonl").write_text("\n".join(jsonl) + "\n")

    timing_lines = ["method,wall_clock_s"]
    for method, seconds in timings:
        timing_lines.append(f"{method},{seconds:.3f}")
    (out / "timing.csv").write_text("\n".join(timing_lines) + "\n")


def _reads(log: AccessLog) -> str:
    return "+".join(sorted(log.splits_read()))


_ALLOWED_READS = {
    MethodKind.RETRAIN: {"retain"},
    MethodKind.FINETUNE: {"retain"},
    MethodKind.NEGGRAD: {"retain", "forget"},
    MethodKind.ERRORMAX: {"retain", "forget"},
    MethodKind.DLFD: {"retain", "forget"},
}


def _check_hygiene(kind: MethodKind, log: AccessLog) -> None:
    read = log.splits_read()
    if not read <= _ALLOWED_READS[kind]:
        raise RuntimeError(f"{kind.value} read disallowed splits: {sorted(read)}")


def cmd_generate(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.seed, None)
    gen = _gen_config(cfg)
    samples = generate(gen)
    sp = cfg["splits"]
    splits = make_splits(samples, sp["forget_identity_fraction"],
                         sp["unseen_identity_fraction"], sp["test_fraction"], sp["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(splits, out)
    print(f"wrote {out}")
    for name in ("retain", "forget", "unseen", "test"):
        ds = splits.split(name)
        print(f"  {name}: {len(ds)} samples, {len(np.unique(ds.identities))} identities")
    return 0


def cmd_train(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.seed, None)
    splits = load_dataset(args.dataset)
    model, epoch_losses, _ = train_original(splits, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    log_path = out.with_suffix(out.suffix + ".trainlog.csv")
    lines = ["epoch,mean_loss"]
    lines += [f"{i + 1},{_fmt(loss)}" for i, loss in enumerate(epoch_losses)]
    log_path.write_text("\n".join(lines) + "\n")
    acc = classification_accuracy(model, splits.test)
    print(f"wrote {out} (test accuracy {acc:.4f}, training log {log_path})")
    return 0


def cmd_unlearn(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.seed, args.eval_every)
    kind = MethodKind.parse(args.method)
    splits = load_dataset(args.dataset)
    model = load_model(args.model)
    ucfg = _unlearn_config(cfg, len(splits.retain), kind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    start = time.perf_counter()
    unlearned, history = run_method(kind, model, splits, ucfg)
    elapsed = time.perf_counter() - start
    _check_hygiene(kind, history.access_log)

    save_model(unlearned, out / "unlearned_model.bin")
    _write_history(out / "history.csv", history)
    origin_sha = hashlib.sha256(model_to_bytes(model)).hexdigest()
    report = evaluate_method(unlearned, splits, kind.value, cfg["unlearn"]["seed"], elapsed)
    rows = [_report_row(report, kind.value, "ok", origin_sha, _reads(history.access_log))]
    _write_reports(out, rows, cfg, [(kind.value, elapsed)])
    print(f"{kind.value}: nomus={report.nomus:.4f} forgetting_score="
          f"{report.forgetting_score:.4f} test_accuracy={report.test_accuracy:.4f}")
    return 0


def cmd_compare(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.seed, args.eval_every)
    if not cfg["methods"]:
        raise ConfigError("methods: need at least one method to compare")
    splits = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mia_seed = cfg["unlearn"]["seed"]

    rows = []
    timings = []

    _info("training original model")
    start = time.perf_counter()
    original, epoch_losses, original_log = train_original(splits, cfg)
    original_elapsed = time.perf_counter() - start
    save_model(original, out / "original_model.bin")
    (out / "trainlog_original.csv").write_text(
        "\n".join(["epoch,mean_loss"]
                  + [f"{i + 1},{_fmt(v)}" for i, v in enumerate(epoch_losses)]) + "\n")
    origin_sha = hashlib.sha256(model_to_bytes(original)).hexdigest()
    rows.append(_report_row(evaluate_method(original, splits, "Original", mia_seed),
                            "Original", "ok", origin_sha, _reads(original_log)))
    timings.append(("Original", original_elapsed))
    _write_histograms(out, "original", original, splits, cfg["report"])

    _info("training retrained reference")
    rcfg = _unlearn_config(cfg, len(splits.retain), MethodKind.RETRAIN)
    start = time.perf_counter()
    retrained, rhist = retrain_run(splits, original, rcfg)
    elapsed = time.perf_counter() - start
    _check_hygiene(MethodKind.RETRAIN, rhist.access_log)
    save_model(retrained, out / "retrained_model.bin")
    _write_history(out / "history_retrained.csv", rhist)
    rows.append(_report_row(evaluate_method(retrained, splits, "Retrained", mia_seed),
                            "Retrained", "ok", origin_sha, _reads(rhist.access_log)))
    timings.append(("Retrained", elapsed))
    _write_histograms(out, "retrained", retrained, splits, cfg["report"])

    failures = 0
    for name in cfg["methods"]:
        kind = MethodKind.parse(name)
        tag = kind.value.lower()
        ucfg = _unlearn_config(cfg, len(splits.retain), kind)
        _info(f"running {kind.value}")
        start = time.perf_counter()
        try:
            unlearned, history = run_method(kind, original, splits, ucfg)
            elapsed = time.perf_counter() - start
            _check_hygiene(kind, history.access_log)
            save_model(unlearned, out / f"{tag}_model.bin")
            _write_history(out / f"history_{tag}.csv", history)
            report = evaluate_method(unlearned, splits, kind.value, mia_seed, elapsed)
            rows.append(_report_row(report, kind.value, "ok", origin_sha,
                                    _reads(history.access_log)))
            _write_histograms(out, tag, unlearned, splits, cfg["report"])
        except Exception as exc:  # a failing method becomes a failed row
            elapsed = time.perf_counter() - start
            failures += 1
            rows.append(_report_row(None, kind.value, "failed", origin_sha, "",
                                    error=f"{type(exc).__name__}: {exc}"))
        timings.append((kind.value, elapsed))

    _write_reports(out, rows, cfg, timings)
    for row in rows:
        nomus_txt = _fmt(row["nomus"]) if row["nomus"] is not None else "-"
        print(f"{row['method']:>10}: status={row['status']} nomus={nomus_txt}")
    return 4 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unlearnkit",
        description="Unlearning toolkit: synthetic data, training, unlearning methods, "
                    "and membership-inference-based comparison reports.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset file")
    p.add_argument("--config", help="experiment config (JSON); defaults used if omitted")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, help="override every config seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the original model on retain + forget")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unlearn", help="run one unlearning method")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--method", required=True,
                   help="one of: " + ", ".join(k.value for k in MethodKind))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("compare", help="run all configured methods and write a report")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "eval_every"):
        args.eval_every = None
    if not hasattr(args, "seed"):
        args.seed = None
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
