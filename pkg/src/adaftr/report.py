"""Paired variant comparisons on synthetic data, written as CSV plus figures."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .datasets import GenConfig, synth_generate, train_test_split
from .metrics import evaluate
from .model import ModelConfig
from .trainer import TrainConfig, train

# name -> loss overrides applied to the experiment's base loss config
VARIANTS = {
    "mmoe": dict(alignment_mode="none"),
    "adaftr": dict(alignment_mode="infonce", temperature_mode="adaptive"),
    "adaftr_fixed_tau": dict(alignment_mode="infonce", temperature_mode="fixed", fixed_tau=0.05),
    "adaftr_scalar_tau": dict(alignment_mode="infonce", temperature_mode="learnable_scalar"),
    "adaftr_scl": dict(alignment_mode="scl"),
    "adaftr_reg": dict(alignment_mode="reg"),
}

COLUMNS = ["seed", "variant", "auc_ctr", "auc_cvr", "gauc_ctr", "gauc_cvr", "seconds"]


@dataclass
class Experiment:
    """Desk-scale synthetic setup; see README for how the values were chosen."""

    gen: GenConfig
    train: TrainConfig
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    variants: tuple[str, ...] = ("mmoe", "adaftr", "adaftr_fixed_tau")
    test_fraction: float = 0.2
    val_fraction: float = 0.1  # of the training part; drives early stopping


def default_experiment() -> Experiment:
    gen = GenConfig(n_records=200_000, n_fields=20, cardinality=50, n_users=5000,
                    rho=0.6, ctr_rate=0.2, cvr_rate=0.005, funnel=True)
    model = ModelConfig(backbone="mmoe", embed_dim=8, expert_count=3, expert_dim=64,
                        tower_hidden_sizes=(64, 32, 16), relatedness_hidden_sizes=(64,))
    loss = L.LossConfig(alpha=1.0, beta=0.01, lam=1e-5)
    return Experiment(gen, TrainConfig(model=model, loss=loss, lr=0.002, batch_size=1024,
                                       epochs=6, patience=1))


def run_experiment(exp: Experiment, progress=None) -> list[dict]:
    rows = []
    for seed in exp.seeds:
        ds = synth_generate(exp.gen, seed)
        tr, te = train_test_split(ds, exp.test_fraction, seed)
        val = None
        if exp.val_fraction > 0 and exp.train.patience:
            tr, val = train_test_split(tr, exp.val_fraction, seed + 1)
        model = replace(exp.train.model, seed=seed).with_schema(ds.schema)
        for name in exp.variants:
            cfg = replace(exp.train, seed=seed, model=model,
                          loss=replace(exp.train.loss, **VARIANTS[name]))
            t0 = time.perf_counter()
            params, _ = train(tr, cfg, eval_dataset=val)
            rep = evaluate(params, te, cfg.model, cfg.loss, cfg.batch_size)
            row = {"seed": seed, "variant": name, "auc_ctr": rep.auc_ctr,
                   "auc_cvr": rep.auc_cvr, "gauc_ctr": rep.gauc_ctr, "gauc_cvr": rep.gauc_cvr,
                   "seconds": time.perf_counter() - t0}
            rows.append(row)
            if progress:
                progress(row)
    return rows


def summarize(rows: list[dict], baseline: str = "mmoe", target: str = "adaftr",
              fixed: str = "adaftr_fixed_tau") -> dict:
    by = {}
    for r in rows:
        by.setdefault(r["variant"], {})[r["seed"]] = r
    means = {
        v: {k: float(np.mean([r[k] for r in d.values()])) for k in ("auc_ctr", "auc_cvr")}
        for v, d in by.items()
    }
    out = {"means": means}
    if baseline in by and target in by:
        seeds = sorted(set(by[baseline]) & set(by[target]))
        d_cvr = [by[target][s]["auc_cvr"] - by[baseline][s]["auc_cvr"] for s in seeds]
        d_ctr = [by[target][s]["auc_ctr"] - by[baseline][s]["auc_ctr"] for s in seeds]
        out["cvr_auc_gain"] = float(np.mean(d_cvr))
        out["ctr_auc_degradation"] = float(-np.mean(d_ctr))
        out["cvr_gain_pass"] = out["cvr_auc_gain"] > 0
        out["ctr_degradation_pass"] = out["ctr_auc_degradation"] < 0.005
    if target in by and fixed in by:
        out["adaptive_minus_fixed_cvr"] = means[target]["auc_cvr"] - means[fixed]["auc_cvr"]
        out["ablation_order_pass"] = out["adaptive_minus_fixed_cvr"] >= 0
    return out


def write_rows(rows: list[dict], path, delimiter: str = ",") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, delimiter=delimiter, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in COLUMNS})


def plot_rows(rows: list[dict], out_dir) -> list[Path]:
    """Per-variant AUC bars with per-seed points, one figure per task."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    paths = []
    for task in ("cvr", "ctr"):
        key = f"auc_{task}"
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, v in enumerate(variants):
            vals = [r[key] * 100 for r in rows if r["variant"] == v and r[key] is not None]
            ax.bar(i, np.mean(vals), color="0.8", edgecolor="0.3")
            ax.scatter(np.full(len(vals), i), vals, s=12, color="k", zorder=3)
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=20, ha="right")
        ax.set_ylabel(f"{task.upper()} AUC (%)")
        lo = min(r[key] for r in rows if r[key] is not None) * 100
        hi = max(r[key] for r in rows if r[key] is not None) * 100
        ax.set_ylim(lo - 0.5, hi + 0.5)
        fig.tight_layout()
        path = out_dir / f"{key}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_history(history_path, out_path) -> Path:
    """Loss components over steps from a JSON-lines training log."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, series = [], {}
    with open(history_path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("event") != "step":
                continue
            steps.append(rec["step"])
            for k, v in rec.items():
                if k.startswith("loss_") and k != "loss_total":
                    series.setdefault(k[5:], []).append(v)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, vals in series.items():
        if min(vals) <= 0:  # e.g. alignment switched off; nothing to show on a log axis
            continue
        ax.plot(steps, vals, label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
