"""Alternating base / relatedness optimisation and the gradient-check harness."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import losses as L
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import Batch, ConfigError, Dataset, batch_iter
from .metrics import MetricsReport, evaluate
from .model import (
    ModelConfig,
    ModelParams,
    OMEGA_PREFIX,
    init_params,
    model_forward,
    omega_gradients,
    omega_objective,
    theta_gradients,
    theta_objective,
)
from .numcore import AdamState, TrainingError, adam_step, finite_diff_grad, relative_error

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    lr: float = 0.0005
    batch_size: int = 1024
    epochs: int = 1
    seed: int = 0
    shuffle: bool = True
    eval_every: int = 0  # steps between evaluations; 0 means end of each epoch
    patience: int = 0  # early stopping on eval AUC plateau; 0 disables
    checkpoint_every: int = 0  # steps between checkpoints; 0 means end of each epoch
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.patience < 0 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("patience, eval_every and checkpoint_every must be >= 0")
        self.loss.validate(len(self.model.tower_hidden_sizes))

    # flat key=value form shared by config files, manifests and checkpoints
    def to_items(self) -> dict[str, str]:
        items = {}
        for f in fields(self):
            if f.name in ("model", "loss"):
                continue
            items[f.name] = _fmt(getattr(self, f.name))
        for f in fields(L.LossConfig):
            items[f.name] = _fmt(getattr(self.loss, f.name))
        for k, v in self.model.to_items().items():
            if k != "seed":
                items[k] = v
        items["model_seed"] = str(self.model.seed)
        return items


def _fmt(value) -> str:
    # repr keeps floats exact across a text round trip
    return repr(value) if isinstance(value, float) else str(value)


_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig) if f.name not in ("model", "loss")}
_LOSS_TYPES = {f.name: f.type for f in fields(L.LossConfig)}


def _coerce(value: str, type_name: str):
    t = str(type_name)
    if "bool" in t:
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if "int" in t:
        return int(value)
    if "float" in t:
        return float(value)
    return str(value).strip().strip("'\"")


def config_from_items(items: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Apply flat key=value settings on top of ``base`` (built-in defaults if None)."""
    base = base or TrainConfig()
    train_kw, loss_kw, model_items = {}, {}, base.model.to_items()
    for key, raw in items.items():
        key = key.strip().replace("-", "_")
        try:
            if key in _TRAIN_TYPES:
                train_kw[key] = _coerce(raw, _TRAIN_TYPES[key])
            elif key in _LOSS_TYPES:
                loss_kw[key] = _coerce(raw, _LOSS_TYPES[key])
            elif key == "model_seed":
                model_items["seed"] = str(int(raw))
            elif key in model_items or key == "fields":
                model_items[key] = str(raw).strip().strip("'\"")
            else:
                raise ConfigError(f"unknown configuration key '{key}'")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value {raw!r} for '{key}'") from None
    return replace(
        base,
        model=ModelConfig.from_items(model_items),
        loss=replace(base.loss, **loss_kw),
        **train_kw,
    )


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    items = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return items


# --------------------------------------------------------------------------
# one step


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)  # (step, LossBreakdown, wall time)
    evals: list = field(default_factory=list)  # (step, MetricsReport, wall time)


def init_adam(params: ModelParams) -> dict[str, AdamState]:
    return {n: AdamState.zeros_like(a) for n, a in params.arrays.items()}


def compute_gradients(params: ModelParams, batch: Batch, cfg: TrainConfig, step_seed: int):
    """Forward once and return (trace, base grads, relatedness grads, breakdown)."""
    try:
        trace = model_forward(params, batch, cfg.model, cfg.loss, step_seed)
    except L.DomainError as exc:
        raise TrainingError(f"non-finite temperature at step seed {step_seed}: {exc}") from None
    for name in ("ctr", "cvr", "rel"):
        if not np.isfinite(getattr(trace, f"p_{name}")).all():
            raise TrainingError(f"non-finite {name} loss at step seed {step_seed}")
    g_theta = theta_gradients(params, trace, batch, cfg.model, cfg.loss)
    breakdown = L.total_loss(trace, batch, cfg.loss, params)
    for name in ("ctr", "cvr", "rel", "align", "l2"):
        if not np.isfinite(getattr(breakdown, name)):
            raise TrainingError(f"non-finite {name} loss at step seed {step_seed}")
    g_omega = omega_gradients(params, trace, batch, cfg.model, cfg.loss.alpha)
    return trace, g_theta, g_omega, breakdown


def train_step(params: ModelParams, states: dict[str, AdamState], batch: Batch,
               cfg: TrainConfig, step_seed: int):
    """One iteration of the alternating update.

    Both gradient sets come from the same pre-step parameters. The
    relatedness network sees only ``alpha * L_rel``; the base parameters see
    task, alignment and L2 terms with the temperatures held constant.
    Returns ``(new_params, new_states, breakdown)``.
    """
    if len(batch) == 0:
        raise TrainingError("empty batch")
    _, g_theta, g_omega, breakdown = compute_gradients(params, batch, cfg, step_seed)
    grads = {**g_theta, **g_omega}
    new_arrays, new_states = {}, {}
    for name, arr in params.arrays.items():
        new_arrays[name], new_states[name] = adam_step(
            arr, grads[name], states[name], cfg.lr,
            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, name=name,
        )
    return ModelParams(new_arrays), new_states, breakdown


def step_seed_for(seed: int, step: int) -> int:
    return int(np.random.default_rng([seed, step, 3]).integers(0, 2**31 - 1))


# --------------------------------------------------------------------------
# training loop


def _checkpoint_extra(cfg: TrainConfig) -> dict[str, str]:
    return {f"loss.{f.name}": _fmt(getattr(cfg.loss, f.name)) for f in fields(L.LossConfig)}


def loss_config_from_items(items: dict[str, str]) -> L.LossConfig:
    kw = {}
    for key, raw in items.items():
        if key.startswith("loss."):
            name = key[5:]
            if name in _LOSS_TYPES:
                kw[name] = _coerce(raw, _LOSS_TYPES[name])
    return L.LossConfig(**kw)


def write_checkpoint(params: ModelParams, cfg: TrainConfig, path) -> None:
    save_checkpoint(params, cfg.model, path, _checkpoint_extra(cfg))


def _score(report: MetricsReport) -> float:
    vals = [v for v in (report.auc_ctr, report.auc_cvr) if v is not None]
    return float(np.mean(vals)) if vals else float("-inf")


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    eval_dataset: Dataset | None = None,
    checkpoint_path=None,
    log_path=None,
    log_timestamps: bool = False,
    params: ModelParams | None = None,
):
    """Run ``cfg.epochs`` passes over ``dataset``.

    Returns ``(params, history)``. With ``cfg.patience`` and an eval set,
    training stops once the mean eval AUC has not improved for that many
    epochs and the best-scoring parameters are returned. The JSON-lines log
    carries wall-clock timestamps only when ``log_timestamps`` is set, keeping
    it reproducible.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if not cfg.model.fields:
        cfg = replace(cfg, model=cfg.model.with_schema(dataset.schema))
    elif tuple(cfg.model.fields) != tuple(dataset.schema.fields):
        raise ConfigError("model fields do not match the dataset schema")
    params = params if params is not None else init_params(cfg.model)
    states = init_adam(params)
    history = TrainHistory()
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(record: dict) -> None:
        if log_fh is None:
            return
        if log_timestamps:
            record = {**record, "timestamp": time.time()}
        log_fh.write(json.dumps(record) + "\n")

    def run_eval(step: int, epoch: int) -> MetricsReport:
        report = evaluate(params, eval_dataset, cfg.model, cfg.loss, cfg.batch_size)
        history.evals.append((step, report, time.time()))
        emit({"event": "eval", "step": step, "epoch": epoch, **report.to_dict()})
        return report

    step = 0
    best, stale, best_params = float("-inf"), 0, None
    try:
        for epoch in range(cfg.epochs):
            for batch in batch_iter(dataset, cfg.batch_size, cfg.seed, cfg.shuffle, epoch):
                params, states, bd = train_step(
                    params, states, batch, cfg, step_seed_for(cfg.seed, step)
                )
                step += 1
                history.steps.append((step, bd, time.time()))
                emit({"event": "step", "step": step, "epoch": epoch, "batch": len(batch),
                      **bd.as_dict("loss_")})
                if cfg.checkpoint_every and checkpoint_path and step % cfg.checkpoint_every == 0:
                    write_checkpoint(params, cfg, checkpoint_path)
                if eval_dataset is not None and cfg.eval_every and step % cfg.eval_every == 0:
                    run_eval(step, epoch)
            if checkpoint_path and not cfg.checkpoint_every:
                write_checkpoint(params, cfg, checkpoint_path)
            if eval_dataset is not None and not cfg.eval_every:
                report = run_eval(step, epoch)
                if cfg.patience:
                    score = _score(report)
                    if score > best:
                        best, stale, best_params = score, 0, params
                    else:
                        stale += 1
                        if stale >= cfg.patience:
                            log.info("early stop after epoch %d", epoch)
                            break
        if best_params is not None:
            params = best_params
        if checkpoint_path:
            write_checkpoint(params, cfg, checkpoint_path)
    finally:
        if log_fh is not None:
            log_fh.close()
    return params, history


def warm_start(params: ModelParams, checkpoint_path) -> ModelParams:
    """Copy base-group arrays with matching names and shapes from a checkpoint.

    The relatedness network keeps its fresh initialisation.
    """
    source, _, _ = load_checkpoint(checkpoint_path)
    arrays = {k: v.copy() for k, v in params.arrays.items()}
    for name, arr in source.arrays.items():
        if name.startswith(OMEGA_PREFIX) or name not in arrays:
            continue
        if arrays[name].shape == arr.shape:
            arrays[name] = arr.copy()
    return ModelParams(arrays)


# --------------------------------------------------------------------------
# gradient check


def param_group(name: str) -> str:
    if name.startswith(OMEGA_PREFIX):
        return "omega"
    if name.startswith("emb"):
        return name.split(".", 1)[0].replace("emb", "embedding")
    head = name.split(".", 1)[0]
    if head.startswith("expert"):
        return "experts"
    return head


def micro_config(backbone: str = "mmoe", alignment: str = "infonce",
                 temperature: str = "adaptive", seed: int = 0) -> TrainConfig:
    """Small model for finite-difference checks (E=4, F=3, k=2, towers [8, 4])."""
    fields_ = tuple((f"f{i}", 5) for i in range(3))
    model = ModelConfig(backbone=backbone, embed_dim=4, expert_count=2, expert_dim=8,
                        tower_hidden_sizes=(8, 4), relatedness_hidden_sizes=(8,),
                        fields=fields_, seed=seed)
    loss = L.LossConfig(alpha=1.0, beta=1.0, lam=0.01, alignment_mode=alignment,
                        temperature_mode=temperature, fixed_tau=0.2)
    return TrainConfig(model=model, loss=loss, batch_size=4, seed=seed)


def _micro_batch(cfg: TrainConfig, batch_size: int, seed: int) -> Batch:
    rng = np.random.default_rng([seed, 11])
    cards = [c for _, c in cfg.model.fields]
    feats = np.stack([rng.integers(0, c, size=batch_size) for c in cards], axis=1)
    y_ctr = rng.integers(0, 2, size=batch_size)
    y_cvr = y_ctr * rng.integers(0, 2, size=batch_size)
    return Batch(np.arange(batch_size), feats, y_ctr, y_cvr)


def grad_check(cfg: TrainConfig, batch_size: int = 4, eps: float = 1e-5,
               jitter: float = 0.1, break_backprop: bool = False) -> dict[str, float]:
    """Worst relative error per parameter group between analytic and central-difference gradients.

    Parameters are moved to a random point near the seeded init so biases
    are not all zero. Temperatures are frozen at their forward values for the
    base group; the relatedness group is checked against ``alpha * L_rel``
    with the task inputs held fixed.
    """
    params = init_params(cfg.model)
    rng = np.random.default_rng([cfg.seed, 13])
    for name in params.arrays:
        if name != "tau":
            params.arrays[name] = params.arrays[name] + jitter * rng.standard_normal(
                params.arrays[name].shape
            )
    batch = _micro_batch(cfg, batch_size, cfg.seed)
    seed = step_seed_for(cfg.seed, 0)
    trace = model_forward(params, batch, cfg.model, cfg.loss, seed)
    g_theta = theta_gradients(params, trace, batch, cfg.model, cfg.loss)
    g_omega = omega_gradients(params, trace, batch, cfg.model, cfg.loss.alpha)
    if break_backprop:
        g_theta["tower_cvr.head.W"] = g_theta["tower_cvr.head.W"] * 1.5
    frozen_tau = None if cfg.loss.temperature_mode == "learnable_scalar" else trace.tau.copy()
    l2_names = params.l2_names

    def theta_obj(arrays):
        tr = model_forward(arrays, batch, cfg.model, cfg.loss, seed, tau_override=frozen_tau)
        return theta_objective(arrays, tr, batch, cfg.loss, l2_names)

    fd_theta = finite_diff_grad(theta_obj, params.arrays, eps, params.theta_names)
    fd_omega = finite_diff_grad(
        lambda a: omega_objective(a, trace, batch, cfg.model, cfg.loss.alpha),
        params.arrays, eps, params.omega_names,
    )
    report: dict[str, float] = {}
    for name in params.arrays:
        analytic = g_omega[name] if name.startswith(OMEGA_PREFIX) else g_theta[name]
        numeric = fd_omega[name] if name.startswith(OMEGA_PREFIX) else fd_theta[name]
        group = param_group(name)
        report[group] = max(report.get(group, 0.0), relative_error(analytic, numeric))
    return report
