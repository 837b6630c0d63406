"""Command-line entry point: ``mlda {train,eval,gen-data,check-grad}``.

Config files use ``key = value`` lines under ``[section]`` headers; ``#``
starts a comment. Every key and its default:

``[method]``
    name = none            none | dann | l-dann | l-wass
    lambda = 10            gradient penalty coefficient
    beta = 1               weight of the critic distance in the feature loss
    n_critic = 5           critic iterations per main update
    grl_scale = 1          gradient reversal multiplier
    reduction = 16         head hidden width is ceil(C'/reduction)
    alg1_literal = false   minimise estimate - penalty instead (sign ablation)
``[train]``
    epochs = 100, batch_size = 32, lr_critic = 0.001, lr_main = 0.001,
    momentum = 0.9, weight_decay = 0.0001, seed = 0, selection_window = 30,
    val_fraction = 0.2
``[model]``
    features = dense:32, relu:tap, dense:32, relu:tap
    classifier = dense:<n_classes>
``[data]``
    kind = vector (or image), n = 600, n_classes = 3, dim = 2, seed = 0,
    rotation = 45, bias = 1.0, noise = 0, source = <path>, target = <path>
``[run]``
    runs = 10, out = runs/latest

Exit codes: 0 success, 1 divergence or numeric failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .autodiff import NumericError
from .data import Dataset, ShiftSpec, make_domains
from .nn import LayerSpec, Model, parse_layers
from .tensorio import TensorFileError, load_tensors, save_tensors
from .trainer import METHODS, DivergenceError, TrainConfig, Trainer, evaluate

log = logging.getLogger("mlda")

SCHEMA_VERSION = 1
GRAD_TOLERANCE = 1e-4
HISTORY_FIELDS = ["epoch", "train_loss", "val_acc", "target_acc", "domain_acc"]


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _method(text: str) -> str:
    if text not in METHODS:
        raise ValueError(f"expected one of {', '.join(METHODS)}")
    return text


def _kind(text: str) -> str:
    if text not in ("vector", "image"):
        raise ValueError("expected vector or image")
    return text


def _at_least(lo):
    def check(v):
        if v < lo:
            raise ValueError(f"must be >= {lo}")
        return v
    return check


def _fraction(v):
    if not 0 < v < 1:
        raise ValueError("must lie strictly between 0 and 1")
    return v


_nonneg = _at_least(0)
_positive = _at_least(1)

# (section, key) -> (attribute, parser, validator)
SCHEMA = {
    ("method", "name"): ("method", _method, None),
    ("method", "lambda"): ("lam", float, _nonneg),
    ("method", "beta"): ("beta", float, _nonneg),
    ("method", "n_critic"): ("n_critic", int, _positive),
    ("method", "grl_scale"): ("grl_scale", float, _nonneg),
    ("method", "reduction"): ("reduction", int, _positive),
    ("method", "alg1_literal"): ("alg1_literal", _bool, None),
    ("train", "epochs"): ("epochs", int, _positive),
    ("train", "batch_size"): ("batch_size", int, _positive),
    ("train", "lr_critic"): ("lr_critic", float, _nonneg),
    ("train", "lr_main"): ("lr_main", float, _nonneg),
    ("train", "momentum"): ("momentum", float, _nonneg),
    ("train", "weight_decay"): ("weight_decay", float, _nonneg),
    ("train", "seed"): ("seed", int, _nonneg),
    ("train", "selection_window"): ("selection_window", int, _positive),
    ("train", "val_fraction"): ("val_fraction", float, _fraction),
    ("model", "features"): ("features", parse_layers, None),
    ("model", "classifier"): ("classifier", parse_layers, None),
    ("data", "kind"): ("data_kind", _kind, None),
    ("data", "n"): ("data_n", int, _positive),
    ("data", "n_classes"): ("n_classes", int, _at_least(2)),
    ("data", "dim"): ("dim", int, _at_least(2)),
    ("data", "seed"): ("data_seed", int, _nonneg),
    ("data", "rotation"): ("rotation", float, None),
    ("data", "bias"): ("bias", float, None),
    ("data", "noise"): ("noise", float, _nonneg),
    ("data", "source"): ("source_path", str, None),
    ("data", "target"): ("target_path", str, None),
    ("run", "runs"): ("runs", int, _positive),
    ("run", "out"): ("out", str, None),
}
SECTIONS = {s for s, _ in SCHEMA}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


@dataclass
class ExperimentConfig:
    method: str = "none"
    epochs: int = 100
    batch_size: int = 32
    n_critic: int = 5
    lr_critic: float = 0.001
    lr_main: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 10.0
    beta: float = 1.0
    reduction: int = 16
    grl_scale: float = 1.0
    seed: int = 0
    selection_window: int = 30
    alg1_literal: bool = False
    val_fraction: float = 0.2
    features: list[LayerSpec] = field(
        default_factory=lambda: parse_layers("dense:32, relu:tap, dense:32, relu:tap"))
    classifier: list[LayerSpec] | None = None
    data_kind: str = "vector"
    data_n: int = 600
    n_classes: int = 3
    dim: int = 2
    data_seed: int = 0
    rotation: float = 45.0
    bias: float = 1.0
    noise: float = 0.0
    source_path: str | None = None
    target_path: str | None = None
    runs: int = 10
    out: str = "runs/latest"

    def train_config(self, seed: int | None = None) -> TrainConfig:
        kw = {k: getattr(self, k) for k in _TRAIN_FIELDS}
        if seed is not None:
            kw["seed"] = seed
        return TrainConfig(**kw)

    def classifier_specs(self) -> list[LayerSpec]:
        return self.classifier or [LayerSpec("dense", self.n_classes)]

    def shift(self) -> ShiftSpec:
        return ShiftSpec(rotation=self.rotation, bias=self.bias, noise=self.noise)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = ", ".join(str(s) for s in self.features)
        d["classifier"] = ", ".join(str(s) for s in self.classifier_specs())
        return d


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    section = None
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if section is None:
            raise ConfigError(f"line {lineno}: key {key!r} outside any section")
        entry = SCHEMA.get((section, key))
        if entry is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        attr, parse, check = entry
        try:
            parsed = parse(value)
            if check is not None:
                parsed = check(parsed)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: {key}: {e}") from None
        setattr(cfg, attr, parsed)
        seen[attr] = lineno
    try:
        cfg.train_config()
    except ValueError as e:
        where = max((seen[a] for a in ("epochs", "selection_window") if a in seen), default=0)
        raise ConfigError(f"line {where}: {e}" if where else str(e)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# --- artifacts ----------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history(path, history, n_taps: int) -> None:
    header = HISTORY_FIELDS + [f"w1_estimate_{i}" for i in range(n_taps)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in history:
            w1 = list(rec.w1) + [None] * (n_taps - len(rec.w1))
            w.writerow([_fmt(v) for v in (rec.epoch, rec.train_loss, rec.val_acc, rec.target_acc,
                                          rec.domain_acc, *w1)])


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def model_description(model: Model) -> dict:
    return {"input_shape": list(model.input_shape),
            "features": ", ".join(str(s) for s in model.feature_specs),
            "classifier": ", ".join(str(s) for s in model.classifier_specs)}


def model_from_description(desc: dict) -> Model:
    return Model(tuple(desc["input_shape"]), parse_layers(desc["features"]),
                 parse_layers(desc["classifier"]))


def save_snapshot(directory: Path, model: Model) -> None:
    save_tensors(directory / "snapshot.ladt", model.state_dict())
    write_json(directory / "model.json", model_description(model))


def load_snapshot(snapshot, description=None) -> Model:
    snapshot = Path(snapshot)
    desc_path = Path(description) if description else snapshot.with_name("model.json")
    model = model_from_description(json.loads(desc_path.read_text(encoding="utf-8")))
    model.load_state_dict(load_tensors(snapshot))
    return model


def build_domains(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.source_path or cfg.target_path:
        if not (cfg.source_path and cfg.target_path):
            raise ConfigError("[data] source and target paths must be given together")
        return Dataset.load(cfg.source_path), Dataset.load(cfg.target_path)
    pair = make_domains(cfg.data_kind, cfg.data_n, cfg.n_classes, cfg.dim, cfg.shift(),
                        cfg.data_seed)
    return pair.source, pair.target


def _std(values: list[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def run(cfg: ExperimentConfig) -> int:
    """Execute ``cfg.runs`` seeded runs and write per-run artifacts plus a summary."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    source, target = build_domains(cfg)
    per_run = []
    for k in range(cfg.runs):
        seed = cfg.seed + k
        run_dir = out / f"run_{k:02d}"
        run_dir.mkdir(exist_ok=True)
        model = Model(source.sample_shape, cfg.features, cfg.classifier_specs(), seed=seed)
        trainer = Trainer(cfg.train_config(seed), source, target, model)
        entry = {"run": k, "seed": seed}
        try:
            result = trainer.run()
        except DivergenceError as e:
            log.error("run %d: %s", k, e)
            write_history(run_dir / "history.csv", trainer.history, len(model.tap_layers))
            entry.update(status="N/C", reason=str(e), target_accuracy="N/C")
            write_json(run_dir / "metrics.json", {"schema_version": SCHEMA_VERSION, **entry})
            per_run.append(entry)
            continue
        write_history(run_dir / "history.csv", result.history, len(model.tap_layers))
        save_snapshot(run_dir, result.model)
        metrics = {"source_val": evaluate(result.model, trainer.val_set).as_dict()}
        if target.labels is not None:
            metrics["target"] = evaluate(result.model, target).as_dict()
        entry.update(status="ok", selected_epoch=result.selected_epoch,
                     target_accuracy=metrics.get("target", {}).get("accuracy"))
        write_json(run_dir / "metrics.json",
                   {"schema_version": SCHEMA_VERSION, **entry, "metrics": metrics})
        per_run.append(entry)
        log.info("run %d (seed %d): target accuracy %s", k, seed, entry["target_accuracy"])

    ok = [r["target_accuracy"] for r in per_run
          if r["status"] == "ok" and r["target_accuracy"] is not None]
    diverged = sum(r["status"] == "N/C" for r in per_run)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "method": cfg.method,
        "runs": cfg.runs,
        "status": "N/C" if diverged else "ok",
        "diverged_runs": diverged,
        "target_accuracy": {"mean": float(np.mean(ok)), "std": _std(ok), "n": len(ok)}
        if ok else "N/C",
        "per_run": per_run,
        "config": cfg.to_dict(),
    }
    write_json(out / "summary.json", summary)
    return 1 if diverged else 0


# --- subcommands --------------------------------------------------------------

def _cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.runs is not None:
        cfg.runs = args.runs
    if args.out is not None:
        cfg.out = args.out
    if args.method is not None:
        cfg.method = args.method
    if args.alg1_literal:
        cfg.alg1_literal = True
    cfg.train_config()
    return run(cfg)


def _cmd_eval(args) -> int:
    model = load_snapshot(args.snapshot, args.model)
    data = Dataset.load(args.data)
    metrics = evaluate(model, data, args.positive_class)
    print(json.dumps(metrics.as_dict(), indent=2))
    return 0


def _cmd_gen_data(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.data_seed = args.seed
    cfg.source_path = cfg.target_path = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, target = build_domains(cfg)
    source.save(out / "source.ladt")
    target.save(out / "target.ladt")
    print(f"wrote {out / 'source.ladt'} ({len(source)} samples) and "
          f"{out / 'target.ladt'} ({len(target)} samples)")
    return 0


def _cmd_check_grad(args) -> int:
    errors = gradcheck.op_errors(range(args.seeds))
    for width in (4, 32, 256):
        errors[f"gradient-penalty C'={width}"] = max(
            gradcheck.penalty_error(width, s) for s in range(3))
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:32s} {err:.3e}")
    print(f"{'max':32s} {worst:.3e}")
    return 0 if worst <= GRAD_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlda", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the configured experiment")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--seed", type=int, help="base seed; run k uses seed + k")
    p.add_argument("--runs", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--alg1-literal", action="store_true",
                   help="minimise estimate - penalty instead (sign ablation)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a saved snapshot on a dataset file")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="model.json (default: next to the snapshot)")
    p.add_argument("--positive-class", type=int, default=1)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gen-data", help="write synthetic source/target tensor files")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="data")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("check-grad", help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=_cmd_check_grad)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DivergenceError, NumericError) as e:
        print(f"mlda: error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, TensorFileError, FileNotFoundError, ValueError) as e:
        print(f"mlda: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
