"""Command-line entry point: ``adaftr {synth,train,eval,gradcheck,report}``.

Exit codes: 0 success, 1 runtime or data failure, 2 configuration error.
"""

from __future__ import annotations

import os

# BLAS thread count is part of the determinism contract; set before numpy loads.
_threads = os.environ.get("ADAFTR_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import itertools
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import losses as L
from .checkpoint import CheckpointError, load_checkpoint
from .datasets import (
    ConfigError,
    GenConfig,
    LoadError,
    SchemaError,
    load_csv,
    load_schema,
    synth_generate,
    train_test_split,
    write_csv,
    write_schema,
)
from .metrics import evaluate
from .model import BACKBONES, ModelConfigError
from .numcore import TrainingError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload) + "\n")


# --------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    for flag, value in (("--ctr-rate", args.ctr_rate), ("--cvr-rate", args.cvr_rate)):
        if not 0.0 < value < 1.0:
            raise CLIError(f"{flag} must lie in (0, 1), got {value}", EXIT_CONFIG)
    if not -1.0 <= args.rho <= 1.0:
        raise CLIError(f"--rho must lie in [-1, 1], got {args.rho}", EXIT_CONFIG)
    if not 0.0 <= args.test_fraction < 1.0:
        raise CLIError("--test-fraction must lie in [0, 1)", EXIT_CONFIG)
    gen = GenConfig(n_records=args.records, n_fields=args.fields, cardinality=args.cardinality,
                    n_users=args.users, latent_dim=args.latent_dim, rho=args.rho,
                    ctr_rate=args.ctr_rate, cvr_rate=args.cvr_rate, funnel=args.funnel,
                    signal=args.signal)
    try:
        ds = synth_generate(gen, args.seed)
    except ConfigError as exc:
        raise CLIError(str(exc), EXIT_CONFIG)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_schema(ds.schema, out / "schema.txt")
        write_csv(ds, out / "data.csv")
        files = {"data": str(out / "data.csv"), "schema": str(out / "schema.txt")}
        if args.test_fraction > 0:
            tr, te = train_test_split(ds, args.test_fraction, args.seed)
            write_csv(tr, out / "train.csv")
            write_csv(te, out / "test.csv")
            files.update(train=str(out / "train.csv"), test=str(out / "test.csv"))
    except OSError as exc:
        raise CLIError(f"cannot write to {out}: {exc}", EXIT_RUNTIME)
    n = len(ds)
    _emit({
        "records": n,
        "fields": ds.schema.num_fields,
        "ctr_rate": float(ds.y_ctr.mean()) if n else 0.0,
        "cvr_rate": float(ds.y_cvr.mean()) if n else 0.0,
        "clicks": int(ds.y_ctr.sum()),
        "conversions": int(ds.y_cvr.sum()),
        "files": files,
    })
    return EXIT_OK


# --------------------------------------------------------------------------
# train

# flag dest -> config key; only flags the user actually passed are applied
TRAIN_FLAG_KEYS = {
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "seed": "seed",
    "patience": "patience", "eval_every": "eval_every", "checkpoint_every": "checkpoint_every",
    "alpha": "alpha", "beta": "beta", "lam": "lam", "tau_upper": "tau_upper",
    "tau_lower": "tau_lower", "temperature_mode": "temperature_mode", "fixed_tau": "fixed_tau",
    "alignment_mode": "alignment_mode", "reg_kind": "reg_kind",
    "contrast_layer": "contrast_layer", "backbone": "backbone", "embed_dim": "embed_dim",
    "experts": "expert_count", "expert_dim": "expert_dim", "tower_sizes": "tower_hidden_sizes",
    "relatedness_sizes": "relatedness_hidden_sizes", "activation": "activation",
    "model_seed": "model_seed",
}


def _resolve_train_config(args, manifest: dict | None):
    from .trainer import config_from_items, parse_config_text

    items: dict[str, str] = {}
    if manifest is not None:
        items.update(manifest["config"])
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise CLIError(f"cannot read config file {args.config}: {exc}", EXIT_RUNTIME)
        items.update(parse_config_text(text, args.config))
    for dest, key in TRAIN_FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            items[key] = str(value)
    if args.seed is not None and args.model_seed is None and manifest is None:
        items.setdefault("model_seed", str(args.seed))
    items.pop("fields", None)
    cfg = config_from_items(items)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    from .trainer import train, warm_start
    from .model import init_params

    manifest = None
    if args.manifest:
        try:
            manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise CLIError(f"cannot read manifest {args.manifest}: {exc}", EXIT_RUNTIME)
    inputs = dict(manifest["inputs"]) if manifest else {}
    for key in ("data", "schema", "eval_data", "warm_start"):
        if getattr(args, key) is not None:
            inputs[key] = getattr(args, key)
    if not inputs.get("data") or not inputs.get("schema"):
        raise CLIError("train needs --data and --schema (or --manifest)", EXIT_CONFIG)
    out_dir = args.out or (manifest["outputs"]["dir"] if manifest else None)
    if not out_dir:
        raise CLIError("train needs --out", EXIT_CONFIG)

    try:
        cfg = _resolve_train_config(args, manifest)
    except (ConfigError, L.LossConfigError, ModelConfigError, ValueError) as exc:
        raise CLIError(f"configuration error: {exc}", EXIT_CONFIG)

    schema = load_schema(inputs["schema"])
    data = load_csv(inputs["data"], schema)
    eval_data = load_csv(inputs["eval_data"], schema) if inputs.get("eval_data") else None
    cfg = replace(cfg, model=cfg.model.with_schema(schema))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"dir": str(out), "checkpoint": str(out / "checkpoint.adft"),
               "log": str(out / "history.jsonl"), "manifest": str(out / "manifest.json")}
    items = cfg.to_items()
    items.pop("fields", None)
    record = {
        "engine_version": __version__,
        "seed": cfg.seed,
        "config": items,
        "inputs": {k: v for k, v in inputs.items() if v},
        "outputs": outputs,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "finished": None,
    }
    Path(outputs["manifest"]).write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")

    params = init_params(cfg.model)
    if inputs.get("warm_start"):
        params = warm_start(params, inputs["warm_start"])
    params, history = train(data, cfg, eval_dataset=eval_data,
                            checkpoint_path=outputs["checkpoint"], log_path=outputs["log"],
                            log_timestamps=args.log_timestamps, params=params)
    record["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    Path(outputs["manifest"]).write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    if args.plot:
        from .report import plot_history

        plot_history(outputs["log"], out / "history.png")
    last = history.steps[-1][1] if history.steps else None
    _emit({"steps": len(history.steps), "outputs": outputs,
           "final_loss": last.as_dict() if last else None})
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .trainer import loss_config_from_items

    if not Path(args.checkpoint).is_file():
        raise CLIError(f"checkpoint not found: {args.checkpoint}", EXIT_RUNTIME)
    params, model_cfg, items = load_checkpoint(args.checkpoint)
    schema = load_schema(args.schema)
    if tuple(schema.fields) != tuple(model_cfg.fields):
        raise CLIError(
            f"checkpoint {args.checkpoint} was trained on a different schema than {args.schema}",
            EXIT_RUNTIME,
        )
    data = load_csv(args.data, schema)
    if len(data) == 0:
        raise CLIError(f"{args.data} has no records", EXIT_RUNTIME)
    loss_cfg = loss_config_from_items(items)
    report = evaluate(params, data, model_cfg, loss_cfg, args.batch_size,
                      cvr_on_clicks_only=args.cvr_on_clicks_only)
    _emit(report.to_dict(percent=args.percent))
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from .trainer import grad_check, micro_config

    runs = []
    worst = 0.0
    combos = itertools.product(args.backbone or ["shared_bottom", "mmoe", "single_dnn"],
                               args.alignment or list(L.ALIGNMENT_MODES),
                               args.temperature or ["fixed", "adaptive", "learnable_scalar"])
    for backbone, alignment, temperature in combos:
        cfg = micro_config(backbone, alignment, temperature, args.seed)
        if args.activation:
            cfg = replace(cfg, model=replace(cfg.model, activation=args.activation))
        groups = grad_check(cfg, batch_size=args.batch_size, break_backprop=args.break_backprop)
        err = max(groups.values())
        worst = max(worst, err)
        runs.append({"backbone": backbone, "alignment": alignment, "temperature": temperature,
                     "max_error": err, "passed": err < args.threshold, "groups": groups})
    passed = worst < args.threshold
    _emit({"threshold": args.threshold, "eps": 1e-5, "passed": passed, "max_error": worst,
           "runs": runs})
    return EXIT_OK if passed else EXIT_RUNTIME


# --------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    from .report import (
        VARIANTS, default_experiment, plot_rows, run_experiment, summarize, write_rows,
    )

    exp = default_experiment()
    gen = exp.gen
    if args.records is not None:
        gen = replace(gen, n_records=args.records)
    exp = replace(exp, gen=gen)
    if args.seeds is not None:
        exp = replace(exp, seeds=tuple(range(args.seeds)))
    if args.epochs is not None:
        exp = replace(exp, train=replace(exp.train, epochs=args.epochs))
    if args.variants:
        unknown = [v for v in args.variants if v not in VARIANTS]
        if unknown:
            raise CLIError(f"--variants: unknown {unknown}; choose from {sorted(VARIANTS)}",
                           EXIT_CONFIG)
        exp = replace(exp, variants=tuple(args.variants))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_experiment(exp, progress=lambda r: print(json.dumps(r), file=sys.stderr))
    delim = "\t" if args.delimiter == "tab" else ","
    write_rows(rows, out / ("results.tsv" if delim == "\t" else "results.csv"), delim)
    summary = summarize(rows)
    figures = [str(p) for p in plot_rows(rows, out)]
    summary["figures"] = figures
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _emit(summary)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _sizes(text: str) -> str:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one size")
    return ",".join(str(v) for v in vals)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaftr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic two-task dataset")
    s.add_argument("--records", type=int, default=10_000)
    s.add_argument("--fields", type=int, default=8)
    s.add_argument("--cardinality", type=int, default=50)
    s.add_argument("--users", type=int, default=500)
    s.add_argument("--latent-dim", type=int, default=4)
    s.add_argument("--rho", type=float, default=0.6)
    s.add_argument("--ctr-rate", type=float, default=0.1)
    s.add_argument("--cvr-rate", type=float, default=0.0025)
    s.add_argument("--signal", type=float, default=1.5)
    s.add_argument("--funnel", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--test-fraction", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data")
    t.add_argument("--schema")
    t.add_argument("--eval-data")
    t.add_argument("--warm-start", help="checkpoint whose base parameters seed this run")
    t.add_argument("--config", help="key=value file; flags override its keys")
    t.add_argument("--manifest", help="replay a previous run's manifest")
    t.add_argument("--out", help="output directory")
    t.add_argument("--log-timestamps", action="store_true")
    t.add_argument("--plot", action="store_true", help="also render history.png")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--model-seed", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--lam", "--lambda", dest="lam", type=float)
    t.add_argument("--tau-upper", type=float)
    t.add_argument("--tau-lower", type=float)
    t.add_argument("--temperature-mode", choices=L.TEMPERATURE_MODES)
    t.add_argument("--fixed-tau", type=float)
    t.add_argument("--alignment-mode", choices=L.ALIGNMENT_MODES)
    t.add_argument("--reg-kind", choices=L.REG_KINDS)
    t.add_argument("--contrast-layer", type=int)
    t.add_argument("--backbone", choices=BACKBONES)
    t.add_argument("--embed-dim", type=int)
    t.add_argument("--experts", type=int)
    t.add_argument("--expert-dim", type=int)
    t.add_argument("--tower-sizes", type=_sizes)
    t.add_argument("--relatedness-sizes", type=_sizes)
    t.add_argument("--activation", choices=("relu", "sigmoid", "identity"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--batch-size", type=int, default=1024)
    e.add_argument("--percent", action="store_true")
    e.add_argument("--cvr-on-clicks-only", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    g.add_argument("--backbone", action="append", choices=BACKBONES)
    g.add_argument("--alignment", action="append", choices=L.ALIGNMENT_MODES)
    g.add_argument("--temperature", action="append", choices=L.TEMPERATURE_MODES)
    g.add_argument("--activation", choices=("relu", "sigmoid", "identity"))
    g.add_argument("--batch-size", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threshold", type=float, default=1e-4)
    g.add_argument("--break-backprop", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="paired synthetic comparison: CSV + figures")
    r.add_argument("--out", required=True)
    r.add_argument("--records", type=int)
    r.add_argument("--seeds", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--variants", nargs="+")
    r.add_argument("--delimiter", choices=("comma", "tab"), default="comma")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"adaftr {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, L.LossConfigError, ModelConfigError) as exc:
        print(f"adaftr {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LoadError, SchemaError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        print(f"adaftr {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
