"""Training objectives and their gradients.

Each loss has a value function and, where the trainer needs it, a
``*_grad`` companion returning the gradient with respect to its array
inputs. All batch losses are means over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .numcore import DimensionError, logsumexp

TEMPERATURE_MODES = ("adaptive", "learnable_scalar", "fixed")
ALIGNMENT_MODES = ("infonce", "scl", "reg", "none")
REG_KINDS = ("mse", "mae")


class LossConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.01
    lam: float = 1.0
    tau_upper: float = 1.0
    tau_lower: float = 0.05
    temperature_mode: str = "adaptive"
    fixed_tau: float = 0.05
    alignment_mode: str = "infonce"
    reg_kind: str = "mse"
    contrast_layer: int = 1

    def validate(self, n_tower_layers: int | None = None) -> None:
        for name in ("alpha", "beta", "lam"):
            if getattr(self, name) < 0:
                raise LossConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.tau_lower <= 0 or self.tau_upper <= 0:
            raise LossConfigError("temperature bounds must be positive")
        if not self.tau_lower < self.tau_upper:
            raise LossConfigError(
                f"tau_lower ({self.tau_lower}) must be below tau_upper ({self.tau_upper})"
            )
        if self.temperature_mode not in TEMPERATURE_MODES:
            raise LossConfigError(f"unknown temperature_mode '{self.temperature_mode}'")
        if self.temperature_mode == "fixed" and not (
            self.tau_lower <= self.fixed_tau <= self.tau_upper
        ):
            raise LossConfigError(
                f"fixed_tau {self.fixed_tau} outside [{self.tau_lower}, {self.tau_upper}]"
            )
        if self.alignment_mode not in ALIGNMENT_MODES:
            raise LossConfigError(f"unknown alignment_mode '{self.alignment_mode}'")
        if self.reg_kind not in REG_KINDS:
            raise LossConfigError(f"unknown reg_kind '{self.reg_kind}'")
        if self.contrast_layer < 1 or (
            n_tower_layers is not None and self.contrast_layer > n_tower_layers
        ):
            raise LossConfigError(
                f"contrast_layer {self.contrast_layer} outside [1, {n_tower_layers}]"
            )


@dataclass
class LossBreakdown:
    ctr: float
    cvr: float
    rel: float
    align: float
    l2: float
    total: float

    def as_dict(self, prefix: str = "") -> dict[str, float]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}


# --------------------------------------------------------------------------
# binary cross-entropy


def bce(p: np.ndarray, y: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise DimensionError(f"bce: predictions {p.shape} vs labels {y.shape}")
    if p.size == 0:
        return 0.0
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def bce_grad(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d bce / d p for clamped probabilities."""
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    return (p - y) / (p * (1.0 - p)) / p.size


# --------------------------------------------------------------------------
# regularization alignment


def _check_pair(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def reg_align(h_ctr: np.ndarray, h_cvr: np.ndarray, kind: str = "mse") -> float:
    _check_pair(h_ctr, h_cvr, "reg_align")
    if h_ctr.size == 0:
        return 0.0
    d = h_ctr - h_cvr
    if kind == "mse":
        return float(np.mean(d * d))
    if kind == "mae":
        return float(np.mean(np.abs(d)))
    raise LossConfigError(f"unknown reg kind '{kind}'")


def reg_align_grad(h_ctr, h_cvr, kind: str = "mse"):
    d = h_ctr - h_cvr
    if kind == "mse":
        g = 2.0 * d / d.size
    else:
        g = np.sign(d) / d.size
    return g, -g


# --------------------------------------------------------------------------
# single-negative contrast


def scl_negatives(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """For each row r, a uniformly drawn index in the batch other than r."""
    if batch_size < 2:
        return np.zeros(batch_size, dtype=np.int64)
    offsets = rng.integers(1, batch_size, size=batch_size)
    return (np.arange(batch_size) + offsets) % batch_size


def scl(h_ctr: np.ndarray, h_cvr: np.ndarray, neg_idx: np.ndarray) -> float:
    """Mean of -log sigmoid(<h_ctr_r, h_cvr_r> - <h_ctr_r, h_cvr_neg>).

    A batch of one has no negative and contributes zero.
    """
    _check_pair(h_ctr, h_cvr, "scl")
    if h_ctr.shape[0] < 2:
        return 0.0
    diff = np.einsum("ij,ij->i", h_ctr, h_cvr - h_cvr[neg_idx])
    # -log sigmoid(x) = log(1 + exp(-x))
    return float(np.mean(np.logaddexp(0.0, -diff)))


def scl_grad(h_ctr, h_cvr, neg_idx):
    B = h_ctr.shape[0]
    if B < 2:
        return np.zeros_like(h_ctr), np.zeros_like(h_cvr)
    neg = h_cvr[neg_idx]
    diff = np.einsum("ij,ij->i", h_ctr, h_cvr - neg)
    # d/dx log(1+exp(-x)) = -sigmoid(-x)
    coef = -np.exp(-np.logaddexp(0.0, diff)) / B
    g_ctr = coef[:, None] * (h_cvr - neg)
    g_cvr = coef[:, None] * h_ctr
    np.add.at(g_cvr, neg_idx, -coef[:, None] * h_ctr)
    return g_ctr, g_cvr


# --------------------------------------------------------------------------
# in-batch InfoNCE with per-row temperature


def _check_tau(tau: np.ndarray, B: int) -> np.ndarray:
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (B,))
    if np.any(~(tau > 0)):
        raise DomainError("infonce: every temperature must be positive")
    return tau


def infonce_terms(h_ctr: np.ndarray, h_cvr: np.ndarray, tau) -> np.ndarray:
    """Per-row loss log-sum-exp_j(s_rj / tau_r) - s_rr / tau_r, with s = h_ctr h_cvr^T."""
    _check_pair(h_ctr, h_cvr, "infonce")
    B = h_ctr.shape[0]
    tau = _check_tau(tau, B)
    logits = (h_ctr @ h_cvr.T) / tau[:, None]
    return logsumexp(logits, axis=1) - np.diag(logits)


def infonce(h_ctr: np.ndarray, h_cvr: np.ndarray, tau) -> float:
    if h_ctr.shape[0] == 0:
        return 0.0
    return float(np.mean(infonce_terms(h_ctr, h_cvr, tau)))


def infonce_value_and_grad(h_ctr, h_cvr, tau):
    """Mean loss plus gradients w.r.t. h_ctr, h_cvr and the per-row temperatures."""
    B = h_ctr.shape[0]
    tau = _check_tau(tau, B)
    s = h_ctr @ h_cvr.T
    logits = s / tau[:, None]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    value = float(np.mean(m[:, 0] + np.log(z[:, 0]) - np.diag(logits)))
    p = e / z
    G = p
    G[np.diag_indices(B)] -= 1.0
    G /= tau[:, None] * B
    g_ctr = G @ h_cvr
    g_cvr = G.T @ h_ctr
    # sum_j p_rj s_rj = sum_j (G_rj * tau_r * B + delta_rj) s_rj
    ps = (G * s).sum(axis=1) * tau * B + np.diag(s)
    g_tau = (np.diag(s) - ps) / (tau * tau) / B
    return value, g_ctr, g_cvr, g_tau


def infonce_grad(h_ctr, h_cvr, tau):
    return infonce_value_and_grad(h_ctr, h_cvr, tau)[1:]


# --------------------------------------------------------------------------
# relatedness and temperature


def relatedness_label(y_ctr, y_cvr) -> np.ndarray:
    return (np.asarray(y_ctr) == np.asarray(y_cvr)).astype(np.float64)


def temperature(
    y_rel: np.ndarray,
    tau_upper: float,
    tau_lower: float,
    mode: str = "adaptive",
    fixed_tau: float = 0.05,
    scalar: float | None = None,
) -> np.ndarray:
    """Per-row temperatures.

    adaptive: linear map from predicted relatedness, high relatedness gives
    ``tau_lower``. learnable_scalar: the clipped scalar for every row.
    """
    if not 0 < tau_lower < tau_upper:
        raise LossConfigError(f"need 0 < tau_lower < tau_upper, got {tau_lower}, {tau_upper}")
    y_rel = np.asarray(y_rel, dtype=np.float64)
    if mode == "adaptive":
        return (tau_upper - tau_lower) * (1.0 - y_rel) + tau_lower
    if mode == "fixed":
        if not tau_lower <= fixed_tau <= tau_upper:
            raise LossConfigError(f"fixed_tau {fixed_tau} outside [{tau_lower}, {tau_upper}]")
        return np.full_like(y_rel, fixed_tau)
    if mode == "learnable_scalar":
        if scalar is None:
            raise LossConfigError("learnable_scalar mode needs the scalar temperature value")
        return np.full_like(y_rel, float(np.clip(scalar, tau_lower, tau_upper)))
    raise LossConfigError(f"unknown temperature mode '{mode}'")


def l2_penalty(params: dict[str, np.ndarray], names) -> float:
    return 0.5 * float(sum(np.sum(params[n] * params[n]) for n in names))


# --------------------------------------------------------------------------
# assembly


def alignment_loss(trace, cfg: LossConfig) -> float:
    if getattr(trace, "align_value", None) is not None:
        return trace.align_value
    h_ctr = trace.tower_ctr.hidden[cfg.contrast_layer - 1]
    h_cvr = trace.tower_cvr.hidden[cfg.contrast_layer - 1]
    mode = cfg.alignment_mode
    if mode == "none":
        return 0.0
    if mode == "reg":
        return reg_align(h_ctr, h_cvr, cfg.reg_kind)
    if mode == "scl":
        return scl(h_ctr, h_cvr, trace.neg_idx)
    return infonce(h_ctr, h_cvr, trace.tau)


def total_loss(trace, batch, cfg: LossConfig, params) -> LossBreakdown:
    """Combine task, relatedness, alignment and L2 terms for one batch."""
    l_ctr = bce(trace.p_ctr, batch.y_ctr)
    l_cvr = bce(trace.p_cvr, batch.y_cvr)
    l_rel = bce(trace.p_rel, relatedness_label(batch.y_ctr, batch.y_cvr))
    l_align = alignment_loss(trace, cfg)
    l_l2 = l2_penalty(params.arrays, params.l2_names)
    total = l_ctr + l_cvr + cfg.alpha * l_rel + cfg.beta * l_align + cfg.lam * l_l2
    return LossBreakdown(l_ctr, l_cvr, l_rel, l_align, l_l2, total)
