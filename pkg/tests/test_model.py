import math

import numpy as np
import pytest

from adaftr import losses as L
from adaftr.datasets import Batch
from adaftr.model import (
    ModelConfig,
    ModelConfigError,
    ModelParams,
    check_shapes,
    init_params,
    model_forward,
    param_shapes,
    relatedness_forward,
    shared_forward,
    tower_forward,
)
from adaftr.numcore import DimensionError, activation, linear_forward, sigmoid

from conftest import loop_matmul


def test_init_deterministic_and_partitioned(micro_model):
    a, b = init_params(micro_model), init_params(micro_model)
    assert a.arrays.keys() == b.arrays.keys()
    assert all(a[n].tobytes() == b[n].tobytes() for n in a.arrays)
    theta, omega = set(a.theta_names), set(a.omega_names)
    assert not theta & omega and theta | omega == set(a.arrays)
    assert omega and all(n.startswith("rel.") for n in omega)


@pytest.mark.parametrize("backbone", ["single_dnn", "shared_bottom", "mmoe"])
def test_init_biases_zero_and_bounds(micro_fields, backbone):
    checked = 0
    for seed in range(12):
        cfg = ModelConfig(backbone=backbone, embed_dim=4, expert_count=3, expert_dim=8,
                          tower_hidden_sizes=(8, 4), fields=micro_fields, seed=seed)
        p = init_params(cfg)
        check_shapes(p, cfg)
        for name, arr in p.arrays.items():
            if name.endswith(".b"):
                assert not arr.any(), name
            elif name.startswith("emb"):
                assert np.abs(arr).max() <= 0.05
            elif name.endswith(".W"):
                bound = math.sqrt(6.0 / (arr.shape[0] + arr.shape[1]))
                assert np.abs(arr).max() <= bound
                checked += 1
    assert checked >= 100


def test_single_dnn_duplicates_embeddings(micro_fields):
    cfg = ModelConfig(backbone="single_dnn", fields=micro_fields, embed_dim=4, expert_dim=8,
                      tower_hidden_sizes=(8,))
    names = dict(param_shapes(cfg))
    assert "emb_ctr.f0" in names and "emb_cvr.f0" in names and "emb.f0" not in names


def test_omega_seed_leaves_theta_untouched(micro_model):
    a, b = init_params(micro_model), init_params(micro_model, omega_seed=77)
    for n in a.theta_names:
        assert a[n].tobytes() == b[n].tobytes()
    assert any(a[n].tobytes() != b[n].tobytes() for n in a.omega_names)


@pytest.mark.parametrize(
    "kw", [dict(tower_hidden_sizes=()), dict(expert_count=0), dict(backbone="ple"),
           dict(tower_hidden_sizes=(4, 0)), dict(activation="tanh")],
)
def test_config_validation(kw):
    with pytest.raises(ModelConfigError):
        ModelConfig(**kw).validate()


def test_config_items_round_trip(micro_model):
    assert ModelConfig.from_items(micro_model.to_items()) == micro_model


def test_mmoe_single_expert_ignores_gates(micro_fields, rng):
    cfg = ModelConfig(expert_count=1, embed_dim=4, expert_dim=8, fields=micro_fields)
    p = init_params(cfg).arrays
    p["gate_ctr.W"] = rng.normal(size=p["gate_ctr.W"].shape) * 5
    e = rng.normal(size=(3, cfg.input_width))
    tr = shared_forward(p, e, cfg)
    g1 = activation(linear_forward(e, p["expert0.W"], p["expert0.b"]), "relu")
    np.testing.assert_array_equal(tr.v["ctr"], g1)
    np.testing.assert_array_equal(tr.v["cvr"], g1)


def test_mmoe_identical_experts_collapse(micro_fields, rng):
    cfg = ModelConfig(expert_count=3, embed_dim=4, expert_dim=8, fields=micro_fields)
    p = init_params(cfg).arrays
    for i in (1, 2):
        p[f"expert{i}.W"] = p["expert0.W"].copy()
        p[f"expert{i}.b"] = p["expert0.b"].copy()
    e = rng.normal(size=(4, cfg.input_width))
    tr = shared_forward(p, e, cfg)
    common = tr.out["expert0"]
    np.testing.assert_allclose(tr.v["ctr"], common, atol=1e-14)
    np.testing.assert_allclose(tr.v["cvr"], common, atol=1e-14)


def test_mmoe_matches_direct_sum(micro_fields, rng):
    cfg = ModelConfig(expert_count=3, embed_dim=4, expert_dim=5, fields=micro_fields, seed=9)
    p = init_params(cfg).arrays
    for n in p:
        if n.endswith(".b"):
            p[n] = rng.normal(size=p[n].shape)
    e = rng.normal(size=(2, cfg.input_width))
    tr = shared_forward(p, e, cfg)
    for t in ("ctr", "cvr"):
        for r in range(2):
            logits = loop_matmul(e[r : r + 1], p[f"gate_{t}.W"], p[f"gate_{t}.b"])[0]
            w = [math.exp(z) for z in logits]
            w = [x / sum(w) for x in w]
            v = np.zeros(5)
            for i in range(3):
                h = loop_matmul(e[r : r + 1], p[f"expert{i}.W"], p[f"expert{i}.b"])[0]
                v += w[i] * np.maximum(h, 0)
            np.testing.assert_allclose(tr.v[t][r], v, atol=1e-12, rtol=0)
        np.testing.assert_allclose(tr.gates[t].sum(axis=1), 1.0, atol=1e-12)


def test_shared_bottom_tasks_share_v(micro_fields, rng):
    cfg = ModelConfig(backbone="shared_bottom", embed_dim=4, expert_dim=8, fields=micro_fields)
    tr = shared_forward(init_params(cfg).arrays, rng.normal(size=(3, 12)), cfg)
    assert tr.v["ctr"] is tr.v["cvr"] or np.array_equal(tr.v["ctr"], tr.v["cvr"])


def test_shared_width_mismatch(micro_model, rng):
    with pytest.raises(DimensionError):
        shared_forward(init_params(micro_model).arrays, rng.normal(size=(2, 5)), micro_model)


def test_tower_zero_weights_give_half(micro_fields, rng):
    cfg = ModelConfig(embed_dim=4, expert_dim=8, tower_hidden_sizes=(8, 4), fields=micro_fields,
                      init_scheme="zeros")
    tr = tower_forward(init_params(cfg).arrays, rng.normal(size=(5, 8)), "ctr", cfg)
    np.testing.assert_array_equal(tr.p, np.full(5, 0.5))
    assert [h.shape for h in tr.hidden] == [(5, 8), (5, 4)]


def test_tower_scalar_chain():
    cfg = ModelConfig(expert_dim=1, tower_hidden_sizes=(1,), fields=(("a", 2),))
    p = {"tower_ctr.0.W": np.array([[1.0]]), "tower_ctr.0.b": np.zeros(1),
         "tower_ctr.head.W": np.array([[1.0]]), "tower_ctr.head.b": np.zeros(1)}
    tr = tower_forward(p, np.array([[2.0]]), "ctr", cfg)
    assert tr.p[0] == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-15)


def test_tower_matches_stepwise_composition(micro_model, rng):
    p = init_params(micro_model).arrays
    v = rng.normal(size=(3, 8))
    tr = tower_forward(p, v, "cvr", micro_model)
    h = v
    for i in range(2):
        h = np.maximum(linear_forward(h, p[f"tower_cvr.{i}.W"], p[f"tower_cvr.{i}.b"]), 0)
        np.testing.assert_array_equal(tr.hidden[i], h)
    z = linear_forward(h, p["tower_cvr.head.W"], p["tower_cvr.head.b"])[:, 0]
    np.testing.assert_allclose(tr.p, np.clip(sigmoid(z), 1e-7, 1 - 1e-7), atol=1e-15)
    with pytest.raises(DimensionError):
        tower_forward(p, v[:, :3], "cvr", micro_model)


def test_relatedness_examples(micro_model, rng):
    p = init_params(micro_model).arrays
    p["rel.0.b"] = rng.normal(size=p["rel.0.b"].shape)
    p["rel.head.b"] = np.array([0.3])
    zero = np.zeros((2, 8))
    tr = relatedness_forward(p, zero, rng.normal(size=(2, 8)), micro_model)
    assert not tr.v_rel.any()
    expect = sigmoid(linear_forward(np.maximum(p["rel.0.b"], 0)[None], p["rel.head.W"],
                                    p["rel.head.b"]))[0, 0]
    np.testing.assert_allclose(tr.mlp.p, [expect, expect], atol=1e-15)

    zp = {k: np.zeros_like(v) for k, v in p.items()}
    tr = relatedness_forward(zp, rng.normal(size=(3, 8)), rng.normal(size=(3, 8)), micro_model)
    np.testing.assert_array_equal(tr.mlp.p, np.full(3, 0.5))

    a, b = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    tr = relatedness_forward(p, a, b, micro_model)
    h = np.maximum(loop_matmul(a * b, p["rel.0.W"], p["rel.0.b"]), 0)
    z = loop_matmul(h, p["rel.head.W"], p["rel.head.b"])[:, 0]
    np.testing.assert_allclose(tr.mlp.p, 1 / (1 + np.exp(-z)), atol=1e-12, rtol=0)
    with pytest.raises(DimensionError):
        relatedness_forward(p, a, b[:, :4], micro_model)


def test_forward_batch_of_one(micro_model, micro_batch):
    b = Batch(*(np.asarray(x)[:1] for x in micro_batch))
    tr = model_forward(init_params(micro_model), b, micro_model, L.LossConfig())
    for arr in (tr.p_ctr, tr.p_cvr, tr.p_rel, tr.tau):
        assert arr.shape == (1,)
    assert ((tr.p_ctr > 0) & (tr.p_ctr < 1)).all()


def test_forward_identical_rows(micro_model, micro_batch):
    b = Batch(*(np.repeat(np.asarray(x)[:1], 2, axis=0) for x in micro_batch))
    tr = model_forward(init_params(micro_model), b, micro_model, L.LossConfig())
    for arr in (tr.p_ctr, tr.p_cvr, tr.p_rel, tr.tau, tr.v_ctr, *tr.tower_cvr.hidden):
        assert np.array_equal(arr[0], arr[1])


def test_forward_matches_manual_chain(micro_model, micro_batch):
    from adaftr.numcore import embedding_forward

    params = init_params(micro_model)
    p = params.arrays
    cfg = L.LossConfig()
    tr = model_forward(params, micro_batch, micro_model, cfg)
    e = embedding_forward([p[f"emb.{n}"] for n in micro_model.field_names], micro_batch.features)
    sh = shared_forward(p, e, micro_model)
    t_ctr = tower_forward(p, sh.v["ctr"], "ctr", micro_model)
    t_cvr = tower_forward(p, sh.v["cvr"], "cvr", micro_model)
    rel = relatedness_forward(p, sh.v["ctr"], sh.v["cvr"], micro_model)
    np.testing.assert_array_equal(tr.p_ctr, t_ctr.p)
    np.testing.assert_array_equal(tr.p_cvr, t_cvr.p)
    np.testing.assert_array_equal(tr.p_rel, rel.mlp.p)
    np.testing.assert_array_equal(tr.tau, L.temperature(rel.mlp.p, 1.0, 0.05))
    for t in ("ctr", "cvr"):
        np.testing.assert_allclose(tr.shared.gates[t].sum(axis=1), 1.0, atol=1e-12)
    assert [h.shape for h in tr.tower_ctr.hidden] == [h.shape for h in tr.tower_cvr.hidden]


def test_forward_is_pure(micro_model, micro_batch):
    params = init_params(micro_model)
    before = {k: v.copy() for k, v in params.arrays.items()}
    a = model_forward(params, micro_batch, micro_model, L.LossConfig(), step_seed=3)
    b = model_forward(params, micro_batch, micro_model, L.LossConfig(), step_seed=3)
    assert a.p_cvr.tobytes() == b.p_cvr.tobytes() and a.tau.tobytes() == b.tau.tobytes()
    assert all(np.array_equal(before[k], params[k]) for k in before)


def test_model_params_copy_is_deep(micro_model):
    p = init_params(micro_model)
    q = p.copy()
    q.arrays["tau"][0] = 9.0
    assert p["tau"][0] != 9.0
    assert isinstance(q, ModelParams) and q.count() == p.count()
