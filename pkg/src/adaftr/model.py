"""Backbones, task towers and the relatedness network, with manual backprop.

Parameters live in a flat ``name -> ndarray`` mapping. Names under ``rel.``
form the relatedness group (trained by the relatedness loss only); every
other name belongs to the base group.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import losses as L
from .numcore import (
    ACTIVATIONS,
    DimensionError,
    activation,
    activation_backward,
    embedding_backward,
    embedding_forward,
    linear_backward,
    linear_forward,
    prob_backward,
    prob_from_logit,
    softmax,
    softmax_backward,
)

BACKBONES = ("single_dnn", "shared_bottom", "mmoe")
TASKS = ("ctr", "cvr")
OMEGA_PREFIX = "rel."
TAU_NAME = "tau"


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "mmoe"
    embed_dim: int = 8
    expert_count: int = 3
    expert_dim: int = 128
    tower_hidden_sizes: tuple[int, ...] = (128, 64, 32)
    relatedness_hidden_sizes: tuple[int, ...] = (64,)
    activation: str = "relu"
    init_scheme: str = "xavier_uniform"
    embed_init: float = 0.05
    tau_init: float = 0.525
    seed: int = 0
    fields: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        self.tower_hidden_sizes = tuple(int(h) for h in self.tower_hidden_sizes)
        self.relatedness_hidden_sizes = tuple(int(h) for h in self.relatedness_hidden_sizes)
        self.fields = tuple((str(n), int(c)) for n, c in self.fields)

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ModelConfigError(f"unknown backbone '{self.backbone}'")
        if self.activation not in ACTIVATIONS:
            raise ModelConfigError(f"unknown activation '{self.activation}'")
        if self.init_scheme not in ("xavier_uniform", "zeros"):
            raise ModelConfigError(f"unknown init scheme '{self.init_scheme}'")
        if len(self.tower_hidden_sizes) < 1:
            raise ModelConfigError("towers need at least one hidden layer")
        sizes = self.tower_hidden_sizes + self.relatedness_hidden_sizes
        if any(h < 1 for h in sizes) or self.embed_dim < 1 or self.expert_dim < 1:
            raise ModelConfigError("all layer widths must be >= 1")
        if self.backbone == "mmoe" and self.expert_count < 1:
            raise ModelConfigError("mmoe needs at least one expert")
        if not self.fields:
            raise ModelConfigError("model config has no feature fields")

    @property
    def input_width(self) -> int:
        return len(self.fields) * self.embed_dim

    @property
    def field_names(self) -> list[str]:
        return [n for n, _ in self.fields]

    def with_schema(self, schema) -> "ModelConfig":
        return replace(self, fields=tuple(schema.fields))

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "fields":
                out["fields"] = ",".join(f"{n}:{c}" for n, c in v)
            elif isinstance(v, tuple):
                out[f.name] = ",".join(str(x) for x in v)
            else:
                out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in items.items():
            if key not in types:
                continue
            if key == "fields":
                kw[key] = tuple(
                    (p.rsplit(":", 1)[0], int(p.rsplit(":", 1)[1])) for p in raw.split(",") if p
                )
            elif key in ("tower_hidden_sizes", "relatedness_hidden_sizes"):
                kw[key] = tuple(int(x) for x in raw.split(",") if x)
            elif key in ("embed_dim", "expert_count", "expert_dim", "seed"):
                kw[key] = int(raw)
            elif key in ("embed_init", "tau_init"):
                kw[key] = float(raw)
            else:
                kw[key] = raw
        return cls(**kw)


@dataclass
class ModelParams:
    arrays: dict[str, np.ndarray]

    @property
    def theta_names(self) -> list[str]:
        return [n for n in self.arrays if not n.startswith(OMEGA_PREFIX)]

    @property
    def omega_names(self) -> list[str]:
        return [n for n in self.arrays if n.startswith(OMEGA_PREFIX)]

    @property
    def l2_names(self) -> list[str]:
        return [n for n in self.theta_names if n != TAU_NAME]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


# --------------------------------------------------------------------------
# parameter layout and init


def _mlp_shapes(prefix: str, n_in: int, hidden: Sequence[int]) -> list[tuple[str, tuple]]:
    shapes = []
    for i, h in enumerate(hidden):
        shapes += [(f"{prefix}{i}.W", (n_in, h)), (f"{prefix}{i}.b", (h,))]
        n_in = h
    shapes += [(f"{prefix}head.W", (n_in, 1)), (f"{prefix}head.b", (1,))]
    return shapes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list for every parameter of ``cfg``."""
    E, D, n_in = cfg.embed_dim, cfg.expert_dim, cfg.input_width
    shapes: list[tuple[str, tuple]] = []
    emb_prefixes = ["emb_ctr.", "emb_cvr."] if cfg.backbone == "single_dnn" else ["emb."]
    for p in emb_prefixes:
        shapes += [(f"{p}{name}", (card, E)) for name, card in cfg.fields]
    if cfg.backbone == "mmoe":
        for i in range(cfg.expert_count):
            shapes += [(f"expert{i}.W", (n_in, D)), (f"expert{i}.b", (D,))]
        for t in TASKS:
            shapes += [(f"gate_{t}.W", (n_in, cfg.expert_count)), (f"gate_{t}.b", (cfg.expert_count,))]
    elif cfg.backbone == "shared_bottom":
        shapes += [("bottom.W", (n_in, D)), ("bottom.b", (D,))]
    else:
        for t in TASKS:
            shapes += [(f"bottom_{t}.W", (n_in, D)), (f"bottom_{t}.b", (D,))]
    for t in TASKS:
        shapes += _mlp_shapes(f"tower_{t}.", D, cfg.tower_hidden_sizes)
    shapes += _mlp_shapes(OMEGA_PREFIX, D, cfg.relatedness_hidden_sizes)
    shapes.append((TAU_NAME, (1,)))
    return shapes


def _init_array(rng: np.random.Generator, name: str, shape: tuple, cfg: ModelConfig) -> np.ndarray:
    if name == TAU_NAME:
        return np.full(shape, cfg.tau_init)
    if cfg.init_scheme == "zeros":
        return np.zeros(shape)
    if name.startswith("emb"):
        return rng.uniform(-cfg.embed_init, cfg.embed_init, size=shape)
    if name.endswith(".b"):
        return np.zeros(shape)
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, omega_seed: int | None = None) -> ModelParams:
    """Draw parameters from ``cfg.seed``.

    Base and relatedness parameters use separate streams, so reseeding the
    relatedness network with ``omega_seed`` leaves the base draw unchanged.
    """
    cfg.validate()
    theta_rng = np.random.default_rng([cfg.seed, 0])
    omega_rng = np.random.default_rng([cfg.seed if omega_seed is None else omega_seed, 1])
    arrays = {}
    for name, shape in param_shapes(cfg):
        rng = omega_rng if name.startswith(OMEGA_PREFIX) else theta_rng
        arrays[name] = _init_array(rng, name, shape, cfg)
    return ModelParams(arrays)


def check_shapes(params: ModelParams, cfg: ModelConfig) -> None:
    expected = dict(param_shapes(cfg))
    got = {k: v.shape for k, v in params.arrays.items()}
    if set(expected) != set(got):
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise DimensionError(f"parameter names do not match config (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if got[name] != tuple(shape):
            raise DimensionError(f"parameter '{name}' has shape {got[name]}, config implies {shape}")


# --------------------------------------------------------------------------
# MLP helper


class MLPTrace(NamedTuple):
    inputs: list  # input to each layer including the head
    pre: list
    hidden: list
    logit: np.ndarray
    p_raw: np.ndarray
    p: np.ndarray


def mlp_forward(params, prefix: str, x: np.ndarray, n_hidden: int, act: str) -> MLPTrace:
    inputs, pre, hidden = [], [], []
    h = x
    for i in range(n_hidden):
        inputs.append(h)
        z = linear_forward(h, params[f"{prefix}{i}.W"], params[f"{prefix}{i}.b"])
        h = activation(z, act)
        pre.append(z)
        hidden.append(h)
    inputs.append(h)
    logit = linear_forward(h, params[f"{prefix}head.W"], params[f"{prefix}head.b"])[:, 0]
    raw, p = prob_from_logit(logit)
    return MLPTrace(inputs, pre, hidden, logit, raw, p)


def mlp_backward(params, prefix: str, tr: MLPTrace, d_p: np.ndarray, act: str, grads: dict,
                 hidden_grads: dict | None = None) -> np.ndarray:
    """Accumulate MLP parameter grads into ``grads``; return dL/dx.

    ``hidden_grads`` maps a 0-based layer index to an extra gradient on that
    layer's post-activation output (used for alignment losses).
    """
    d_logit = prob_backward(tr.p_raw, d_p)[:, None]
    dx, dW, db = linear_backward(tr.inputs[-1], params[f"{prefix}head.W"], d_logit)
    grads[f"{prefix}head.W"] = dW
    grads[f"{prefix}head.b"] = db
    for i in reversed(range(len(tr.pre))):
        if hidden_grads and i in hidden_grads:
            dx = dx + hidden_grads[i]
        dz = activation_backward(tr.pre[i], tr.hidden[i], dx, act)
        dx, dW, db = linear_backward(tr.inputs[i], params[f"{prefix}{i}.W"], dz)
        grads[f"{prefix}{i}.W"] = dW
        grads[f"{prefix}{i}.b"] = db
    return dx


# --------------------------------------------------------------------------
# shared layers


@dataclass
class SharedTrace:
    backbone: str
    e: dict  # task -> embedding matrix (same object for shared embeddings)
    pre: dict = field(default_factory=dict)  # layer name -> pre-activation
    out: dict = field(default_factory=dict)  # layer name -> post-activation
    gates: dict = field(default_factory=dict)  # task -> (B, k) gate distribution
    v: dict = field(default_factory=dict)  # task -> task input representation


def _embed(params, cfg: ModelConfig, features: np.ndarray) -> dict:
    names = cfg.field_names
    if cfg.backbone == "single_dnn":
        return {
            t: embedding_forward([params[f"emb_{t}.{n}"] for n in names], features, names)
            for t in TASKS
        }
    e = embedding_forward([params[f"emb.{n}"] for n in names], features, names)
    return {t: e for t in TASKS}


def shared_forward(params, e, cfg: ModelConfig) -> SharedTrace:
    """Map embeddings to the per-task tower inputs ``v['ctr']``, ``v['cvr']``.

    ``e`` is either one embedding matrix or a task -> matrix dict.
    """
    if not isinstance(e, dict):
        e = {t: e for t in TASKS}
    for t in TASKS:
        if e[t].shape[1] != cfg.input_width:
            raise DimensionError(
                f"shared layers expect width {cfg.input_width}, got {e[t].shape[1]}"
            )
    tr = SharedTrace(cfg.backbone, e)
    act = cfg.activation
    if cfg.backbone == "mmoe":
        x = e["ctr"]
        for i in range(cfg.expert_count):
            z = linear_forward(x, params[f"expert{i}.W"], params[f"expert{i}.b"])
            tr.pre[f"expert{i}"] = z
            tr.out[f"expert{i}"] = activation(z, act)
        for t in TASKS:
            g = softmax(linear_forward(x, params[f"gate_{t}.W"], params[f"gate_{t}.b"]))
            tr.gates[t] = g
            v = np.zeros_like(tr.out["expert0"])
            for i in range(cfg.expert_count):
                v = v + g[:, i : i + 1] * tr.out[f"expert{i}"]
            tr.v[t] = v
    elif cfg.backbone == "shared_bottom":
        z = linear_forward(e["ctr"], params["bottom.W"], params["bottom.b"])
        tr.pre["bottom"] = z
        tr.out["bottom"] = activation(z, act)
        tr.v = {t: tr.out["bottom"] for t in TASKS}
    else:
        for t in TASKS:
            z = linear_forward(e[t], params[f"bottom_{t}.W"], params[f"bottom_{t}.b"])
            tr.pre[f"bottom_{t}"] = z
            tr.out[f"bottom_{t}"] = activation(z, act)
            tr.v[t] = tr.out[f"bottom_{t}"]
    return tr


def shared_backward(params, tr: SharedTrace, cfg: ModelConfig, dv: dict, grads: dict) -> dict:
    """Accumulate backbone grads; return task -> dL/de."""
    act = cfg.activation
    if cfg.backbone == "mmoe":
        x = tr.e["ctr"]
        d_out = {i: np.zeros_like(tr.out["expert0"]) for i in range(cfg.expert_count)}
        de = np.zeros_like(x)
        for t in TASKS:
            g = tr.gates[t]
            d_g = np.empty_like(g)
            for i in range(cfg.expert_count):
                d_out[i] += g[:, i : i + 1] * dv[t]
                d_g[:, i] = np.einsum("ij,ij->i", dv[t], tr.out[f"expert{i}"])
            d_logits = softmax_backward(g, d_g)
            dx, dW, db = linear_backward(x, params[f"gate_{t}.W"], d_logits)
            grads[f"gate_{t}.W"] = dW
            grads[f"gate_{t}.b"] = db
            de += dx
        for i in range(cfg.expert_count):
            dz = activation_backward(tr.pre[f"expert{i}"], tr.out[f"expert{i}"], d_out[i], act)
            dx, dW, db = linear_backward(x, params[f"expert{i}.W"], dz)
            grads[f"expert{i}.W"] = dW
            grads[f"expert{i}.b"] = db
            de += dx
        return {"shared": de}
    if cfg.backbone == "shared_bottom":
        d_out = dv["ctr"] + dv["cvr"]
        dz = activation_backward(tr.pre["bottom"], tr.out["bottom"], d_out, act)
        dx, dW, db = linear_backward(tr.e["ctr"], params["bottom.W"], dz)
        grads["bottom.W"] = dW
        grads["bottom.b"] = db
        return {"shared": dx}
    out = {}
    for t in TASKS:
        name = f"bottom_{t}"
        dz = activation_backward(tr.pre[name], tr.out[name], dv[t], act)
        dx, dW, db = linear_backward(tr.e[t], params[f"{name}.W"], dz)
        grads[f"{name}.W"] = dW
        grads[f"{name}.b"] = db
        out[t] = dx
    return out


def tower_forward(params, v: np.ndarray, task: str, cfg: ModelConfig) -> MLPTrace:
    W0 = params[f"tower_{task}.0.W"]
    if v.shape[1] != W0.shape[0]:
        raise DimensionError(f"tower_{task} expects width {W0.shape[0]}, got {v.shape[1]}")
    return mlp_forward(params, f"tower_{task}.", v, len(cfg.tower_hidden_sizes), cfg.activation)


class RelTrace(NamedTuple):
    v_rel: np.ndarray
    mlp: MLPTrace


def relatedness_forward(params, v_ctr: np.ndarray, v_cvr: np.ndarray, cfg: ModelConfig) -> RelTrace:
    """Relatedness probability from the element-wise product of the task inputs."""
    if v_ctr.shape != v_cvr.shape:
        raise DimensionError(f"relatedness inputs differ: {v_ctr.shape} vs {v_cvr.shape}")
    v_rel = v_ctr * v_cvr
    return RelTrace(
        v_rel,
        mlp_forward(params, OMEGA_PREFIX, v_rel, len(cfg.relatedness_hidden_sizes), cfg.activation),
    )


# --------------------------------------------------------------------------
# full model


@dataclass
class ForwardTrace:
    features: np.ndarray
    shared: SharedTrace
    tower_ctr: MLPTrace
    tower_cvr: MLPTrace
    rel: RelTrace
    tau: np.ndarray
    neg_idx: np.ndarray
    align_value: float | None = None  # filled in by theta_gradients

    @property
    def p_ctr(self) -> np.ndarray:
        return self.tower_ctr.p

    @property
    def p_cvr(self) -> np.ndarray:
        return self.tower_cvr.p

    @property
    def p_rel(self) -> np.ndarray:
        return self.rel.mlp.p

    @property
    def v_ctr(self) -> np.ndarray:
        return self.shared.v["ctr"]

    @property
    def v_cvr(self) -> np.ndarray:
        return self.shared.v["cvr"]


def model_forward(
    params,
    batch,
    cfg: ModelConfig,
    loss_cfg: L.LossConfig,
    step_seed: int = 0,
    tau_override: np.ndarray | None = None,
) -> ForwardTrace:
    """Embedding, shared layers, both towers, relatedness net and temperatures.

    ``step_seed`` fixes the single-negative draw. ``tau_override`` replaces
    the computed temperatures (used to hold them fixed in gradient checks).
    """
    if isinstance(params, ModelParams):
        params = params.arrays
    features = np.asarray(batch.features)
    e = _embed(params, cfg, features)
    sh = shared_forward(params, e, cfg)
    t_ctr = tower_forward(params, sh.v["ctr"], "ctr", cfg)
    t_cvr = tower_forward(params, sh.v["cvr"], "cvr", cfg)
    rel = relatedness_forward(params, sh.v["ctr"], sh.v["cvr"], cfg)
    if tau_override is not None:
        tau = np.asarray(tau_override, dtype=np.float64)
    else:
        tau = L.temperature(
            rel.mlp.p,
            loss_cfg.tau_upper,
            loss_cfg.tau_lower,
            loss_cfg.temperature_mode,
            loss_cfg.fixed_tau,
            float(params[TAU_NAME][0]),
        )
    neg_idx = L.scl_negatives(len(features), np.random.default_rng([step_seed, 7]))
    return ForwardTrace(features, sh, t_ctr, t_cvr, rel, tau, neg_idx)


def theta_objective(params, trace: ForwardTrace, batch, loss_cfg: L.LossConfig, l2_names) -> float:
    """Base-group objective: task losses, weighted alignment and weighted L2."""
    return (
        L.bce(trace.p_ctr, batch.y_ctr)
        + L.bce(trace.p_cvr, batch.y_cvr)
        + loss_cfg.beta * L.alignment_loss(trace, loss_cfg)
        + loss_cfg.lam * L.l2_penalty(params, l2_names)
    )


def theta_gradients(
    params, trace: ForwardTrace, batch, cfg: ModelConfig, loss_cfg: L.LossConfig
) -> dict[str, np.ndarray]:
    """Gradient of the base objective for every base parameter.

    The temperatures are constants here: nothing flows into the relatedness
    network or back through its prediction.
    """
    if isinstance(params, ModelParams):
        params = params.arrays
    grads: dict[str, np.ndarray] = {}
    hidden_grads = {"ctr": {}, "cvr": {}}
    layer = loss_cfg.contrast_layer - 1
    h_ctr = trace.tower_ctr.hidden[layer]
    h_cvr = trace.tower_cvr.hidden[layer]
    tau_grad = 0.0
    mode = loss_cfg.alignment_mode
    if mode != "none" and loss_cfg.beta != 0.0:
        if mode == "reg":
            g_ctr, g_cvr = L.reg_align_grad(h_ctr, h_cvr, loss_cfg.reg_kind)
        elif mode == "scl":
            g_ctr, g_cvr = L.scl_grad(h_ctr, h_cvr, trace.neg_idx)
        else:
            value, g_ctr, g_cvr, g_tau = L.infonce_value_and_grad(h_ctr, h_cvr, trace.tau)
            trace.align_value = value
            if loss_cfg.temperature_mode == "learnable_scalar":
                s = float(params[TAU_NAME][0])
                if loss_cfg.tau_lower <= s <= loss_cfg.tau_upper:
                    tau_grad = loss_cfg.beta * float(g_tau.sum())
        hidden_grads["ctr"][layer] = loss_cfg.beta * g_ctr
        hidden_grads["cvr"][layer] = loss_cfg.beta * g_cvr

    dv = {}
    for t, tr, y in (("ctr", trace.tower_ctr, batch.y_ctr), ("cvr", trace.tower_cvr, batch.y_cvr)):
        d_p = L.bce_grad(tr.p, y)
        dv[t] = mlp_backward(params, f"tower_{t}.", tr, d_p, cfg.activation, grads, hidden_grads[t])

    de = shared_backward(params, trace.shared, cfg, dv, grads)
    names = cfg.field_names
    if cfg.backbone == "single_dnn":
        for t in TASKS:
            tables = [params[f"emb_{t}.{n}"] for n in names]
            for n, g in zip(names, embedding_backward(tables, trace.features, de[t])):
                grads[f"emb_{t}.{n}"] = g
    else:
        tables = [params[f"emb.{n}"] for n in names]
        for n, g in zip(names, embedding_backward(tables, trace.features, de["shared"])):
            grads[f"emb.{n}"] = g

    grads[TAU_NAME] = np.array([tau_grad])
    if loss_cfg.lam != 0.0:
        for n in grads:
            if n != TAU_NAME:
                grads[n] = grads[n] + loss_cfg.lam * params[n]
    return grads


def omega_objective(params, trace: ForwardTrace, batch, cfg: ModelConfig, alpha: float) -> float:
    """alpha * relatedness BCE, recomputed from the cached task inputs."""
    rel = relatedness_forward(params, trace.v_ctr, trace.v_cvr, cfg)
    return alpha * L.bce(rel.mlp.p, L.relatedness_label(batch.y_ctr, batch.y_cvr))


def omega_gradients(
    params, trace: ForwardTrace, batch, cfg: ModelConfig, alpha: float
) -> dict[str, np.ndarray]:
    """Gradient of alpha * relatedness BCE w.r.t. the relatedness network only."""
    if isinstance(params, ModelParams):
        params = params.arrays
    grads: dict[str, np.ndarray] = {}
    y_rel = L.relatedness_label(batch.y_ctr, batch.y_cvr)
    d_p = alpha * L.bce_grad(trace.p_rel, y_rel)
    # the returned input gradient is dropped: task inputs are constants here
    mlp_backward(params, OMEGA_PREFIX, trace.rel.mlp, d_p, cfg.activation, grads)
    return grads
