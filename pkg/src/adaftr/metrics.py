"""AUC, group AUC and evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import losses as L
from .datasets import Dataset, batch_iter
from .model import ModelConfig, model_forward


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"auc: {scores.shape[0]} scores but {labels.shape[0]} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gauc(scores, labels, user_ids) -> tuple[float, int]:
    """Unweighted mean of per-user AUC over users with both label classes.

    Returns ``(gauc, skipped_user_count)``.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    user_ids = np.asarray(user_ids).reshape(-1)
    if scores.size == 0:
        raise UndefinedMetricError("gauc of an empty input")
    order = np.argsort(user_ids, kind="stable")
    users, starts = np.unique(user_ids[order], return_index=True)
    bounds = list(starts) + [len(order)]
    total, evaluated, skipped = 0.0, 0, 0
    for i in range(len(users)):
        idx = order[bounds[i] : bounds[i + 1]]
        y = labels[idx]
        if y.min() == y.max():
            skipped += 1
            continue
        total += auc(scores[idx], y)
        evaluated += 1
    if evaluated == 0:
        raise UndefinedMetricError("gauc: every user has single-class labels")
    return total / evaluated, skipped


@dataclass
class MetricsReport:
    auc_ctr: float | None
    auc_cvr: float | None
    gauc_ctr: float | None
    gauc_cvr: float | None
    users_ctr: int
    users_cvr: int
    skipped_users_ctr: int
    skipped_users_cvr: int
    total_users_ctr: int
    total_users_cvr: int
    losses: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def to_dict(self, percent: bool = False) -> dict:
        scale = 100.0 if percent else 1.0
        out = {}
        for key in ("auc_ctr", "gauc_ctr", "auc_cvr", "gauc_cvr"):
            v = getattr(self, key)
            out[key] = None if v is None else v * scale
        for key in ("skipped_users_ctr", "skipped_users_cvr", "users_ctr", "users_cvr",
                    "total_users_ctr", "total_users_cvr"):
            out[key] = getattr(self, key)
        for k, v in self.losses.items():
            out[f"loss_{k}"] = v
        if self.errors:
            out["errors"] = dict(self.errors)
        return out

    def to_json(self, percent: bool = False) -> str:
        return json.dumps(self.to_dict(percent), sort_keys=False)


def _task_metrics(scores, labels, users, task: str, errors: dict):
    try:
        a = auc(scores, labels)
    except UndefinedMetricError as exc:
        a = None
        errors[f"auc_{task}"] = str(exc)
    n_users = len(np.unique(users)) if len(users) else 0
    try:
        g, skipped = gauc(scores, labels, users)
    except UndefinedMetricError as exc:
        g, skipped = None, n_users
        errors[f"gauc_{task}"] = str(exc)
    return a, g, n_users - skipped, skipped, n_users


def predict(params, dataset: Dataset, model_cfg: ModelConfig, loss_cfg: L.LossConfig,
            batch_size: int = 1024):
    """Batched inference; returns (p_ctr, p_cvr, p_rel, mean alignment loss)."""
    ps = {"ctr": [], "cvr": [], "rel": []}
    align_sum = 0.0
    for batch in batch_iter(dataset, batch_size, shuffle=False):
        tr = model_forward(params, batch, model_cfg, loss_cfg)
        ps["ctr"].append(tr.p_ctr)
        ps["cvr"].append(tr.p_cvr)
        ps["rel"].append(tr.p_rel)
        align_sum += L.alignment_loss(tr, loss_cfg) * len(batch)
    cat = {k: np.concatenate(v) if v else np.zeros(0) for k, v in ps.items()}
    return cat["ctr"], cat["cvr"], cat["rel"], align_sum / max(len(dataset), 1)


def evaluate(params, dataset: Dataset, model_cfg: ModelConfig, loss_cfg: L.LossConfig,
             batch_size: int = 1024, cvr_on_clicks_only: bool = False) -> MetricsReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    p_ctr, p_cvr, p_rel, align = predict(params, dataset, model_cfg, loss_cfg, batch_size)
    errors: dict = {}
    a_ctr, g_ctr, u_ctr, s_ctr, n_ctr = _task_metrics(
        p_ctr, dataset.y_ctr, dataset.user_ids, "ctr", errors
    )
    mask = dataset.y_ctr == 1 if cvr_on_clicks_only else np.ones(len(dataset), dtype=bool)
    a_cvr, g_cvr, u_cvr, s_cvr, n_cvr = _task_metrics(
        p_cvr[mask], dataset.y_cvr[mask], dataset.user_ids[mask], "cvr", errors
    )
    arrays = params.arrays if hasattr(params, "arrays") else params
    l2_names = [n for n in arrays if not n.startswith("rel.") and n != "tau"]
    losses = {
        "ctr": L.bce(p_ctr, dataset.y_ctr),
        "cvr": L.bce(p_cvr, dataset.y_cvr),
        "rel": L.bce(p_rel, L.relatedness_label(dataset.y_ctr, dataset.y_cvr)),
        "align": align,
        "l2": L.l2_penalty(arrays, l2_names),
    }
    return MetricsReport(a_ctr, a_cvr, g_ctr, g_cvr, u_ctr, u_cvr, s_ctr, s_cvr, n_ctr, n_cvr,
                         losses, errors)
