import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaftr import losses as L
from adaftr.model import init_params, model_forward


def bce_loop(p, y):
    tot = 0.0
    for pi, yi in zip(p, y):
        tot += -(yi * math.log(pi) + (1 - yi) * math.log(1 - pi))
    return tot / len(p)


def infonce_loop(hc, hv, tau):
    B = len(hc)
    total = 0.0
    for r in range(B):
        logits = [sum(hc[r][t] * hv[j][t] for t in range(len(hc[r]))) / tau[r] for j in range(B)]
        m = max(logits)
        lse = m + math.log(sum(math.exp(z - m) for z in logits))
        total += lse - logits[r]
    return total / B


def scl_loop(hc, hv, neg):
    total = 0.0
    for r in range(len(hc)):
        x = float(np.dot(hc[r], hv[r]) - np.dot(hc[r], hv[neg[r]]))
        total += -math.log(1.0 / (1.0 + math.exp(-x)))
    return total / len(hc)


def test_bce_examples(rng):
    assert L.bce(np.array([0.5]), np.array([1])) == pytest.approx(math.log(2), abs=1e-12)
    assert L.bce(np.array([1 - 1e-7]), np.array([1])) == pytest.approx(1e-7, rel=1e-6)
    p, y = rng.uniform(0.01, 0.99, 50), rng.integers(0, 2, 50)
    assert abs(L.bce(p, y) - bce_loop(p, y)) < 1e-12


def test_bce_non_negative(rng):
    p, y = rng.uniform(1e-7, 1 - 1e-7, 200), rng.integers(0, 2, 200)
    assert L.bce(p, y) >= 0


def test_reg_align_examples(rng):
    h = rng.normal(size=(3, 4))
    assert L.reg_align(h, h.copy()) == 0.0
    assert L.reg_align(np.array([[1.0]]), np.array([[3.0]]), "mse") == 4.0
    assert L.reg_align(np.array([[1.0]]), np.array([[3.0]]), "mae") == 2.0
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    loop = sum((a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(4)) / 12
    assert abs(L.reg_align(a, b) - loop) < 1e-12
    with pytest.raises(Exception):
        L.reg_align(a, b[:, :2])


def test_scl_examples(rng):
    hc = np.array([[1.0, 0.0], [1.0, 0.0]])
    hv = np.array([[2.0, 0.0], [2.0, 0.0]])
    assert L.scl(hc, hv, np.array([1, 0])) == pytest.approx(math.log(2), abs=1e-12)
    hc = np.eye(2)
    hv = 20.0 * np.eye(2)
    assert L.scl(hc, hv, np.array([1, 0])) < 1e-8
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    neg = L.scl_negatives(5, np.random.default_rng(0))
    assert abs(L.scl(a, b, neg) - scl_loop(a, b, neg)) < 1e-12
    assert L.scl(a[:1], b[:1], np.zeros(1, dtype=int)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10_000))
def test_scl_negative_never_self(B, seed):
    neg = L.scl_negatives(B, np.random.default_rng(seed))
    assert (neg != np.arange(B)).all() and neg.min() >= 0 and neg.max() < B


def test_infonce_examples(rng):
    h = rng.normal(size=(1, 3))
    assert L.infonce(h, rng.normal(size=(1, 3)), np.array([0.3])) == 0.0
    row = rng.normal(size=3)
    for B in (2, 5):
        H = np.tile(row, (B, 1))
        assert abs(L.infonce(H, H, np.full(B, 0.7)) - math.log(B)) < 1e-12
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    tau = np.array([0.05, 0.3, 1.0, 0.6])
    assert abs(L.infonce(a, b, tau) - infonce_loop(a, b, tau)) < 1e-10


def test_infonce_rejects_non_positive_tau(rng):
    a = rng.normal(size=(2, 2))
    with pytest.raises(L.DomainError):
        L.infonce(a, a, np.array([0.1, 0.0]))


def test_infonce_value_and_grad_consistent(rng):
    from adaftr.numcore import finite_diff_grad, relative_error

    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    tau = rng.uniform(0.1, 1.0, 5)
    val, ga, gb, gt = L.infonce_value_and_grad(a, b, tau)
    assert val == pytest.approx(L.infonce(a, b, tau), abs=1e-12)
    fd = finite_diff_grad(lambda p: L.infonce(p["a"], p["b"], p["t"]), {"a": a, "b": b, "t": tau})
    assert relative_error(ga, fd["a"]) < 1e-6
    assert relative_error(gb, fd["b"]) < 1e-6
    assert relative_error(gt, fd["t"]) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_infonce_permutation_equivariant_and_terms_non_negative(B, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(B, 3)) * 2, r.normal(size=(B, 3)) * 2
    tau = np.full(B, r.uniform(0.05, 1))
    perm = r.permutation(B)
    assert abs(L.infonce(a, b, tau) - L.infonce(a[perm], b[perm], tau[perm])) < 1e-12
    assert (L.infonce_terms(a, b, tau) >= 0).all()


@pytest.mark.parametrize("yc, yv, expected", [(1, 1, 1.0), (1, 0, 0.0), (0, 0, 1.0), (0, 1, 0.0)])
def test_relatedness_label(yc, yv, expected):
    assert L.relatedness_label([yc], [yv])[0] == expected
    assert L.relatedness_label([yv], [yc])[0] == expected


@pytest.mark.parametrize("y, tau", [(1.0, 0.05), (0.0, 1.0), (0.5, 0.525)])
def test_temperature_adaptive_points(y, tau):
    assert L.temperature(np.array([y]), 1.0, 0.05)[0] == pytest.approx(tau, abs=1e-15)


def test_temperature_other_modes():
    y = np.array([0.1, 0.9])
    np.testing.assert_array_equal(L.temperature(y, 1, 0.05, "fixed", fixed_tau=0.2), [0.2, 0.2])
    np.testing.assert_array_equal(
        L.temperature(y, 1, 0.05, "learnable_scalar", scalar=3.0), [1.0, 1.0]
    )
    np.testing.assert_array_equal(
        L.temperature(y, 1, 0.05, "learnable_scalar", scalar=0.3), [0.3, 0.3]
    )
    with pytest.raises(L.LossConfigError):
        L.temperature(y, 0.05, 1.0)
    with pytest.raises(L.LossConfigError):
        L.temperature(y, 1, 0.05, "fixed", fixed_tau=2.0)


@pytest.mark.parametrize(
    "kw",
    [dict(tau_lower=1.0, tau_upper=0.5), dict(temperature_mode="fixed", fixed_tau=0.01),
     dict(alpha=-1), dict(alignment_mode="cosine"), dict(contrast_layer=4)],
)
def test_loss_config_validation(kw):
    with pytest.raises(L.LossConfigError):
        L.LossConfig(**kw).validate(3)


def _trace(micro_model, micro_batch, cfg):
    params = init_params(micro_model)
    return params, model_forward(params, micro_batch, micro_model, cfg, step_seed=4)


def test_total_loss_only_task_terms_when_weights_zero(micro_model, micro_batch):
    cfg = L.LossConfig(alpha=0, beta=0, lam=0)
    params, tr = _trace(micro_model, micro_batch, cfg)
    bd = L.total_loss(tr, micro_batch, cfg, params)
    assert bd.total == bd.ctr + bd.cvr


def test_total_loss_none_alignment_is_zero(micro_model, micro_batch):
    cfg = L.LossConfig(alignment_mode="none")
    params, tr = _trace(micro_model, micro_batch, cfg)
    assert L.total_loss(tr, micro_batch, cfg, params).align == 0.0


@pytest.mark.parametrize("mode", ["infonce", "scl", "reg"])
def test_total_loss_component_sum(micro_model, micro_batch, mode):
    cfg = L.LossConfig(alpha=0.7, beta=0.3, lam=0.01, alignment_mode=mode)
    params, tr = _trace(micro_model, micro_batch, cfg)
    bd = L.total_loss(tr, micro_batch, cfg, params)
    hc, hv = tr.tower_ctr.hidden[0], tr.tower_cvr.hidden[0]
    ctr = bce_loop(tr.p_ctr, micro_batch.y_ctr)
    cvr = bce_loop(tr.p_cvr, micro_batch.y_cvr)
    y_rel = (micro_batch.y_ctr == micro_batch.y_cvr).astype(float)
    rel = bce_loop(tr.p_rel, y_rel)
    if mode == "infonce":
        align = infonce_loop(hc, hv, tr.tau)
    elif mode == "scl":
        align = scl_loop(hc, hv, tr.neg_idx)
    else:
        align = float(np.mean((hc - hv) ** 2))
    l2 = 0.5 * sum(float(np.sum(params[n] ** 2)) for n in params.arrays
                   if not n.startswith("rel.") and n != "tau")
    expected = ctr + cvr + 0.7 * rel + 0.3 * align + 0.01 * l2
    assert abs(bd.total - expected) < 1e-10
    assert abs(bd.l2 - l2) < 1e-12
    assert min(bd.ctr, bd.cvr, bd.rel, bd.align, bd.l2) >= 0


def test_total_loss_doubling_beta_doubles_alignment(micro_model, micro_batch):
    cfg = L.LossConfig(beta=0.25)
    params, tr = _trace(micro_model, micro_batch, cfg)
    a = L.total_loss(tr, micro_batch, cfg, params)
    b = L.total_loss(tr, micro_batch, L.LossConfig(beta=0.5), params)
    assert (b.total - a.total) == pytest.approx(0.25 * a.align, abs=1e-12)
