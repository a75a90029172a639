"""Command-line experiment runner.

Every command reads an optional flat ``key = value`` config file with dotted
keys (``train.gamma = 1e4``), applies ``--seed`` / ``--repeats`` on top, and
writes one directory holding the resolved config, per-run histories and
models, ``report.json``, ``aggregate.csv`` and ``table.txt``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, pgd_linf
from .datagen import (
    Dataset,
    SynthSpec,
    generate_blobs,
    generate_synthetic,
    load_manifest,
    parse_key_values,
    split_dataset,
    write_csv,
)
from .metrics import (
    MetricsReport,
    audit,
    auc_roc,
    binomial_sigma,
    classification_accuracy,
    normalized_entropy,
    prediction_metric,
    sphere_prob_mixup,
    sphere_prob_mixup_exact,
    sphere_prob_monte_carlo,
    sphere_prob_uniform,
    total_activation_accuracy,
    total_activations,
)
from .models import MlpModel, SlicedClassifier, load_model, save_model
from .penalties import PENALTY_KINDS, PenaltySpec
from .trainer import TrainConfig, train

log = logging.getLogger("monotrain")

Z95 = 1.96

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "repeats": 1,
    "data.source": "synthetic",
    "data.manifest": "",
    "data.seed": -1,
    "synth.n": 2000,
    "synth.dim": 100,
    "synth.n_monotone": 20,
    "synth.monotone": "",
    "synth.alpha": 0.8,
    "blobs.classes": 4,
    "blobs.per_class": 500,
    "blobs.dim": 10,
    "blobs.separation": 3.0,
    "blobs.std": 1.0,
    "blobs.fractions": "0.6,0.2,0.2",
    "model.hidden": "100,100",
    "model.activation": "relu",
    "model.split_input": True,
    "model.path": "",
    "group.hidden": "64",
    "group.slice_width": 64,
    "group.head_hidden": "",
    "group.subsample": "",
    "train.penalty": "none",
    "train.gamma": 1e4,
    "train.optimizer": "adam",
    "train.lr": 5e-3,
    "train.batch_size": 256,
    "train.epochs": 200,
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.clip_norm": 100.0,
    "train.checkpoint": "best",
    "train.lr_decay_epochs": "",
    "train.lr_decay_factor": 0.1,
    "penalty.random_samples": 1024,
    "penalty.mixup_pairs": 1024,
    "penalty.mu": 1.0,
    "penalty.group_gradient": "label",
    "audit.n_random": 10000,
    "audit.slack": 0.0,
    "attack.enabled": False,
    "attack.eps_fraction": 0.1,
    "attack.steps": 10,
    "attack.random_start": True,
    "sphere.n": "2,10,50",
    "sphere.r": "0.25,0.5,0.9",
    "sphere.draws": 1000000,
}

# per-command defaults layered over DEFAULTS before the config file
COMMAND_DEFAULTS: dict[str, dict[str, object]] = {
    "train": {"train.epochs": 100},
    "group": {
        "data.source": "blobs",
        "train.gamma": 10.0,
        "train.epochs": 60,
        "train.batch_size": 64,
        "train.checkpoint": "last",
        "penalty.mu": 10.0,
        "attack.enabled": True,
    },
    "attack-eval": {"data.source": "blobs", "attack.enabled": True},
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot read '{raw}' as {type(default).__name__}") from None
    return raw.strip()


def resolve_config(command: str, text: str = "", source: str = "<config>", overrides: dict | None = None) -> dict:
    """Defaults, then command defaults, then file values, then ``overrides``."""
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(command, {}))
    try:
        pairs = parse_key_values(text, source)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for key, raw in pairs.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key '{key}'")
        cfg[key] = _coerce(key, raw, DEFAULTS[key])
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    if cfg["repeats"] < 1:
        raise ConfigError("repeats must be at least 1")
    return cfg


def config_text(cfg: dict) -> str:
    return "".join(f"{key} = {_format_value(cfg[key])}\n" for key in sorted(cfg))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _words(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# -- building blocks ---------------------------------------------------


def load_data(cfg: dict, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    source = cfg["data.source"]
    data_seed = cfg["data.seed"] if cfg["data.seed"] >= 0 else seed
    if source == "synthetic":
        spec = SynthSpec(
            n=cfg["synth.n"],
            dim=cfg["synth.dim"],
            monotone=_ints(cfg["synth.monotone"]),
            n_monotone=cfg["synth.n_monotone"],
            alpha=cfg["synth.alpha"],
            seed=data_seed,
        )
        return generate_synthetic(spec)
    if source == "blobs":
        data = generate_blobs(cfg["blobs.classes"], cfg["blobs.per_class"], cfg["blobs.dim"],
                              cfg["blobs.separation"], seed=data_seed, std=cfg["blobs.std"])
        fractions = _floats(cfg["blobs.fractions"])
        if len(fractions) != 3:
            raise ConfigError("blobs.fractions needs three values")
        return tuple(split_dataset(data, fractions, seed=data_seed))
    if source == "manifest":
        if not cfg["data.manifest"]:
            raise ConfigError("data.source = manifest needs data.manifest")
        return load_manifest(cfg["data.manifest"])
    raise ConfigError(f"unknown data.source '{source}'")


def _output_width(data: Dataset) -> int:
    if data.task == "regression":
        return 1
    k = data.n_classes
    return 1 if k == 2 else k


def build_mlp(cfg: dict, data: Dataset, seed: int) -> MlpModel:
    split = cfg["model.split_input"] and 0 < len(data.monotone) < data.dim
    return MlpModel.build(
        data.dim,
        _output_width(data),
        _ints(cfg["model.hidden"]),
        cfg["model.activation"],
        monotone=data.monotone,
        split_input=split,
        rng=np.random.default_rng(seed),
    )


def build_sliced(cfg: dict, data: Dataset, seed: int) -> SlicedClassifier:
    return SlicedClassifier.build(
        data.dim,
        data.n_classes,
        hidden=_ints(cfg["group.hidden"]),
        slice_width=cfg["group.slice_width"],
        head_hidden=_ints(cfg["group.head_hidden"]),
        activation=cfg["model.activation"],
        rng=np.random.default_rng(seed),
    )


def train_config(cfg: dict, kind: str, seed: int, box=None) -> TrainConfig:
    penalty = PenaltySpec(
        kind,
        random_samples=cfg["penalty.random_samples"],
        mixup_pairs=cfg["penalty.mixup_pairs"],
        mu=cfg["penalty.mu"],
        box=box,
        group_gradient=cfg["penalty.group_gradient"],
    )
    clip = cfg["train.clip_norm"]
    return TrainConfig(
        penalty=penalty,
        gamma=cfg["train.gamma"] if kind != "none" else 0.0,
        optimizer=cfg["train.optimizer"],
        lr=cfg["train.lr"],
        batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"],
        seed=seed,
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        clip_norm=clip if clip > 0 else None,
        checkpoint=cfg["train.checkpoint"],
        lr_decay_epochs=_ints(cfg["train.lr_decay_epochs"]),
        lr_decay_factor=cfg["train.lr_decay_factor"],
    )


def attack_spec(cfg: dict, train_set: Dataset, seed: int) -> AttackSpec:
    lower, upper = train_set.box
    return AttackSpec(
        eps=cfg["attack.eps_fraction"] * (upper - lower),
        steps=cfg["attack.steps"],
        box=train_set.box,
        seed=seed,
        random_start=cfg["attack.random_start"],
    )


def detection_auc(model: SlicedClassifier, clean: np.ndarray, adversarial: np.ndarray) -> float:
    """AUC of the total-activation entropy separating perturbed from clean rows."""
    h_clean = normalized_entropy(total_activations(model, clean))
    h_adv = normalized_entropy(total_activations(model, adversarial))
    return auc_roc(h_clean, h_adv)


def metric_name(data: Dataset) -> str:
    return "rmse" if data.task == "regression" else "accuracy"


# -- aggregation -------------------------------------------------------


def summarize(values: list[float]) -> dict[str, float]:
    """Mean, plus a normal-approximation 95% interval when there are two or more values."""
    arr = np.asarray(values, dtype=np.float64)
    out = {"mean": float(arr.mean()), "n": int(arr.size)}
    if arr.size > 1:
        half = Z95 * float(arr.std(ddof=1)) / math.sqrt(arr.size)
        out["ci_low"] = out["mean"] - half
        out["ci_high"] = out["mean"] + half
    return out


def aggregate(runs: dict[str, list[dict]]) -> dict[str, dict[str, dict]]:
    table: dict[str, dict[str, dict]] = {}
    for variant, reports in runs.items():
        keys = sorted({k for r in reports for k, v in r.items() if isinstance(v, float)})
        table[variant] = {k: summarize([r[k] for r in reports if k in r]) for k in keys}
    return table


def aggregate_csv(summary: dict[str, dict[str, dict]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "metric", "n", "mean", "ci_low", "ci_high"])
    for variant, metrics in summary.items():
        for name, s in metrics.items():
            writer.writerow([variant, name, s["n"], repr(s["mean"]),
                             repr(s["ci_low"]) if "ci_low" in s else "", repr(s["ci_high"]) if "ci_high" in s else ""])
    return buf.getvalue()


def format_table(summary: dict[str, dict[str, dict]], columns: list[str]) -> str:
    present = [c for c in columns if any(c in m for m in summary.values())]
    rows = [["variant", *present]]
    for variant, metrics in summary.items():
        cells = [variant]
        for c in present:
            s = metrics.get(c)
            if s is None:
                cells.append("-")
            elif "ci_low" in s:
                cells.append(f"{s['mean']:.4f} +/- {s['ci_high'] - s['mean']:.4f}")
            else:
                cells.append(f"{s['mean']:.4f}")
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def write_outputs(out: Path, command: str, cfg: dict, runs: dict[str, list[dict]], columns: list[str], extra: dict | None = None) -> dict:
    summary = aggregate(runs)
    report = {
        "command": command,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "seed": cfg["seed"],
        "repeats": cfg["repeats"],
        "runs": runs,
        "summary": summary,
    }
    if extra:
        report.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    (out / "aggregate.csv").write_text(aggregate_csv(summary))
    (out / "table.txt").write_text(format_table(summary, columns))
    return report


def _prepare(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text(cfg))


# -- commands ----------------------------------------------------------


TRAIN_COLUMNS = ["rho_random", "rho_train", "rho_test", "train_metric", "valid_metric", "test_metric"]
GROUP_COLUMNS = ["test_metric", "total_activation_accuracy", "detection_auc"]


def cmd_train(cfg: dict, out: Path) -> dict:
    kinds = _words(cfg["train.penalty"])
    for kind in kinds:
        if kind not in PENALTY_KINDS or kind == "group":
            raise ConfigError(f"train.penalty: '{kind}' is not one of none, train, random, mixup")
    _prepare(out, cfg)
    runs: dict[str, list[dict]] = {kind: [] for kind in kinds}
    for r in range(cfg["repeats"]):
        seed = cfg["seed"] + r
        train_set, valid_set, test_set = load_data(cfg, seed)
        for kind in kinds:
            run_dir = out / f"repeat{r}" / kind
            run_dir.mkdir(parents=True, exist_ok=True)
            model = build_mlp(cfg, train_set, seed)
            if kind != "none" and model.output_width != 1:
                raise ConfigError("monotonicity penalties need a single-output model (regression or binary)")
            result = train(model, train_set, valid_set, train_config(cfg, kind, seed), run_dir / "history.jsonl")
            save_model(model, run_dir / "model.json")
            rhos = {}
            if train_set.monotone and model.output_width == 1:
                rhos = audit(model, train_set, test_set, train_set.box, train_set.monotone,
                             np.random.default_rng(seed), cfg["audit.n_random"], cfg["audit.slack"])
            report = MetricsReport(
                **rhos,
                train_metric=prediction_metric(model, train_set),
                valid_metric=prediction_metric(model, valid_set),
                test_metric=prediction_metric(model, test_set),
                metric_name=metric_name(train_set),
                sample_sizes={"train": len(train_set), "valid": len(valid_set), "test": len(test_set),
                              "random": cfg["audit.n_random"] if rhos else 0},
                seed=seed,
            )
            (run_dir / "report.json").write_text(report.to_json() + "\n")
            log.info("repeat %d %s: %s", r, kind, report.to_dict())
            runs[kind].append({**report.to_dict(), "best_epoch": result.best_epoch})
    return write_outputs(out, "train", cfg, runs, TRAIN_COLUMNS)


def cmd_group(cfg: dict, out: Path) -> dict:
    fractions = _floats(cfg["group.subsample"]) or (1.0,)
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"group.subsample: fraction {f} outside (0, 1]")
    _prepare(out, cfg)
    sweep = len(fractions) > 1 or fractions[0] != 1.0
    runs: dict[str, list[dict]] = {}
    for r in range(cfg["repeats"]):
        seed = cfg["seed"] + r
        train_full, valid_set, test_set = load_data(cfg, seed)
        if train_full.task != "classification":
            raise ConfigError("group needs a classification dataset")
        for frac in fractions:
            n = max(train_full.n_classes, int(round(frac * len(train_full))))
            rows = np.random.default_rng(seed).permutation(len(train_full))[:n]
            train_set = train_full.subset(np.sort(rows)) if n < len(train_full) else train_full
            for kind, name in (("none", "baseline"), ("group", "group")):
                variant = f"{name}@{frac:g}" if sweep else name
                run_dir = out / f"repeat{r}" / variant
                run_dir.mkdir(parents=True, exist_ok=True)
                model = build_sliced(cfg, train_full, seed)
                train(model, train_set, valid_set, train_config(cfg, kind, seed), run_dir / "history.jsonl")
                save_model(model, run_dir / "model.json")
                auc = None
                if cfg["attack.enabled"]:
                    adv = pgd_linf(model, test_set.features, test_set.targets, attack_spec(cfg, train_full, seed))
                    auc = detection_auc(model, test_set.features, adv)
                report = MetricsReport(
                    train_metric=classification_accuracy(model, train_set),
                    valid_metric=classification_accuracy(model, valid_set),
                    test_metric=classification_accuracy(model, test_set),
                    metric_name="accuracy",
                    total_activation_accuracy=total_activation_accuracy(model, test_set),
                    detection_auc=auc,
                    sample_sizes={"train": len(train_set), "valid": len(valid_set), "test": len(test_set)},
                    seed=seed,
                )
                (run_dir / "report.json").write_text(report.to_json() + "\n")
                log.info("repeat %d %s: %s", r, variant, report.to_dict())
                runs.setdefault(variant, []).append(report.to_dict())
    return write_outputs(out, "group", cfg, runs, GROUP_COLUMNS)


def sphere_rows(ns, rs, draws: int, seed: int) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for n in ns:
        for r in rs:
            for mode in ("uniform", "mixup"):
                analytic = sphere_prob_uniform(n, r) if mode == "uniform" else sphere_prob_mixup(n, r)
                exact = sphere_prob_uniform(n, r) if mode == "uniform" else sphere_prob_mixup_exact(n, r)
                mc = sphere_prob_monte_carlo(n, r, draws, mode, rng)
                rows.append({"n": n, "r": r, "mode": mode, "analytic": analytic, "exact": exact,
                             "monte_carlo": mc, "sigma": binomial_sigma(exact, draws), "draws": draws})
    return rows


def cmd_sphere(cfg: dict, out: Path) -> dict:
    ns = _ints(cfg["sphere.n"])
    rs = _floats(cfg["sphere.r"])
    if any(n < 1 for n in ns):
        raise ConfigError("sphere.n values must be >= 1")
    _prepare(out, cfg)
    rows = sphere_rows(ns, rs, cfg["sphere.draws"], cfg["seed"])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    (out / "sphere.csv").write_text(buf.getvalue())
    report = {"command": "sphere", "config": {k: cfg[k] for k in sorted(cfg)}, "seed": cfg["seed"], "rows": rows}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    lines = [f"{'n':>4} {'r':>6} {'mode':>8} {'analytic':>10} {'exact':>10} {'mc':>10}"]
    for row in rows:
        lines.append(f"{row['n']:>4} {row['r']:>6g} {row['mode']:>8} {row['analytic']:>10.6f} {row['exact']:>10.6f} {row['monte_carlo']:>10.6f}")
    (out / "table.txt").write_text("\n".join(lines) + "\n")
    return report


def _load_for_eval(cfg: dict):
    if not cfg["model.path"]:
        raise ConfigError("this command needs model.path")
    model = load_model(cfg["model.path"])
    train_set, valid_set, test_set = load_data(cfg, cfg["seed"])
    if train_set.dim != model.input_width:
        raise ConfigError(f"model expects {model.input_width} features, data has {train_set.dim}")
    return model, train_set, valid_set, test_set


def cmd_audit(cfg: dict, out: Path) -> dict:
    model, train_set, valid_set, test_set = _load_for_eval(cfg)
    if not train_set.monotone:
        raise ConfigError("audit needs a dataset with monotone features")
    _prepare(out, cfg)
    seed = cfg["seed"]
    rhos = audit(model, train_set, test_set, train_set.box, train_set.monotone,
                 np.random.default_rng(seed), cfg["audit.n_random"], cfg["audit.slack"])
    report = MetricsReport(
        **rhos,
        train_metric=prediction_metric(model, train_set),
        valid_metric=prediction_metric(model, valid_set),
        test_metric=prediction_metric(model, test_set),
        metric_name=metric_name(train_set),
        sample_sizes={"train": len(train_set), "valid": len(valid_set), "test": len(test_set), "random": cfg["audit.n_random"]},
        seed=seed,
    )
    return write_outputs(out, "audit", cfg, {"model": [report.to_dict()]}, TRAIN_COLUMNS)


def cmd_attack_eval(cfg: dict, out: Path) -> dict:
    model, train_set, _, test_set = _load_for_eval(cfg)
    if test_set.task != "classification":
        raise ConfigError("attack-eval needs a classification dataset")
    _prepare(out, cfg)
    seed = cfg["seed"]
    adv = pgd_linf(model, test_set.features, test_set.targets, attack_spec(cfg, train_set, seed))
    adv_set = Dataset(adv, np.asarray(test_set.targets), test_set.monotone, test_set.box, "adversarial", "classification")
    row = {
        "clean_accuracy": classification_accuracy(model, test_set),
        "adversarial_accuracy": classification_accuracy(model, adv_set),
        "max_linf": float(np.abs(adv - test_set.features).max()),
    }
    if isinstance(model, SlicedClassifier):
        row["detection_auc"] = detection_auc(model, test_set.features, adv)
        row["total_activation_accuracy"] = total_activation_accuracy(model, test_set)
    return write_outputs(out, "attack-eval", cfg, {"model": [row]}, list(row))


def cmd_synth(cfg: dict, out: Path) -> dict:
    if cfg["data.source"] != "synthetic":
        raise ConfigError("synth writes the synthetic generator's output; set data.source = synthetic")
    _prepare(out, cfg)
    parts = load_data(cfg, cfg["seed"])
    for part in parts:
        write_csv(out / f"{part.split}.csv", part)
    names = parts[0].feature_names or tuple(f"x{i}" for i in range(parts[0].dim))
    manifest = (
        "target = y\n"
        "task = regression\n"
        f"monotone = {', '.join(names[i] for i in parts[0].monotone)}\n"
        "train = train.csv\nvalid = valid.csv\ntest = test.csv\n"
    )
    (out / "manifest.txt").write_text(manifest)
    sizes = {p.split: len(p) for p in parts}
    report = {"command": "synth", "config": {k: cfg[k] for k in sorted(cfg)}, "seed": cfg["seed"], "sizes": sizes}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


COMMANDS = {
    "train": cmd_train,
    "group": cmd_group,
    "sphere": cmd_sphere,
    "audit": cmd_audit,
    "synth": cmd_synth,
    "attack-eval": cmd_attack_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monotrain", description="Train and audit neural networks under monotonicity penalties.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train one model per penalty kind and audit it",
        "group": "compare a baseline with a group-monotonic classifier",
        "sphere": "analytic and Monte-Carlo P(|x| > r) in the unit ball",
        "audit": "measure violation rates of a saved model",
        "synth": "write the synthetic dataset as CSV files",
        "attack-eval": "PGD accuracy and entropy detection for a saved classifier",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="base seed; repeat r uses seed + r")
        p.add_argument("--out", type=Path, default=Path("runs") / name, help="output directory")
        p.add_argument("--repeats", type=int, help="independent runs to aggregate")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        text = args.config.read_text(encoding="utf-8") if args.config else ""
        cfg = resolve_config(args.command, text, str(args.config or "<config>"),
                             {"seed": args.seed, "repeats": args.repeats})
        COMMANDS[args.command](cfg, args.out)
    except (ValueError, OSError, KeyError, ArithmeticError, RuntimeError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"monotrain {args.command}: error: {message}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0
