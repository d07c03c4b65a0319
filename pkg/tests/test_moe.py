import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import grad_cases as G
from jamlab.metrics import flops_of_model
from jamlab.moe import layers as L
from jamlab.moe.model import (
    EXPERT_NAMES,
    ModelConfig,
    ModelError,
    MoEModel,
    gate_stats,
    load_balance_loss,
    load_balance_value,
    total_loss,
)
from jamlab.moe.train import fit, predict, split_indices
from jamlab.tensor_nn import TrainConfig, grad_check
from jamlab.tensor_nn.tensor import GraphError, Tensor


@pytest.fixture(scope="module")
def model():
    return MoEModel(ModelConfig(seed=3))


def random_batch(rng, b=6):
    return rng.standard_normal((b, 64, 64)), rng.standard_normal((b, 128))


def randomize_router(model, rng, scale=0.1):
    for p in model.router_head.parameters():
        p.data = (scale * rng.standard_normal(p.data.shape)).astype(p.data.dtype)


# routing


def test_zero_router_is_uniform(model):
    g = model.route(np.random.default_rng(0).standard_normal((5, 128)))
    np.testing.assert_allclose(g.probs, 1 / 3, rtol=1e-6)
    np.testing.assert_array_equal(g.argmax, 0)


def test_gate_rows_normalised():
    m = MoEModel(ModelConfig(seed=1))
    randomize_router(m, np.random.default_rng(1), 0.5)
    g = m.route(3 * np.random.default_rng(2).standard_normal((10**4, 128)))
    np.testing.assert_allclose(g.probs.sum(axis=1), 1, atol=1e-6)
    assert abs(g.fraction.sum() - 1) < 1e-12


def test_argmax_tie_goes_low():
    g = gate_stats(np.array([[0.4, 0.4, 0.2], [0.2, 0.4, 0.4]]))
    np.testing.assert_array_equal(g.argmax, [0, 1])


# soft and hard forward


def test_one_hot_gate_equals_expert(model):
    tf, psd = random_batch(np.random.default_rng(0))
    x, p = model.prepare(tf, psd)
    for e in range(3):
        onehot = np.zeros((6, 3))
        onehot[:, e] = 1
        mix, _ = model.forward_soft(x, p, gate_override=onehot)
        np.testing.assert_array_equal(mix.data, model.expert_probs(e, x, p).data)


def test_identical_experts_give_same_distribution(model):
    tf, psd = random_batch(np.random.default_rng(1), 3)
    x, p = model.prepare(tf, psd)
    # zero heads: every expert emits the uniform distribution
    mix, _ = model.forward_soft(x, p, gate_override=np.random.default_rng(0).dirichlet([1, 1, 1], 3))
    np.testing.assert_allclose(mix.data, 1 / 21, rtol=1e-6)


def test_soft_output_is_distribution():
    m = MoEModel(ModelConfig(seed=4))
    rng = np.random.default_rng(4)
    randomize_router(m, rng, 0.3)
    for e in m.experts:
        e.head.weight.data = rng.standard_normal(e.head.weight.data.shape).astype(np.float32)
    for s in range(0, 1000, 250):
        x, p = m.prepare(*random_batch(rng, 250))
        mix, gate = m.forward_soft(x, p)
        assert mix.data.min() >= 0
        np.testing.assert_allclose(mix.data.sum(axis=1), 1, atol=1e-6)
        np.testing.assert_allclose(gate.data.sum(axis=1), 1, atol=1e-6)


def test_hard_matches_chosen_expert_and_charges_ledger():
    m = MoEModel(ModelConfig(seed=5))
    rng = np.random.default_rng(5)
    randomize_router(m, rng, 0.5)
    for e in m.experts:
        e.head.weight.data = rng.standard_normal(e.head.weight.data.shape).astype(np.float32)
    x, p = m.prepare(*random_batch(rng, 40))
    probs, chosen, flops = m.forward_hard(x, p)
    assert len(set(chosen.tolist())) > 1
    ledger = flops_of_model(m)
    for e in range(3):
        idx = np.flatnonzero(chosen == e)
        if idx.size == 0:
            continue
        solo = m.experts[e](Tensor(x.data[idx]), m.encode(Tensor(p.data[idx]))[1]).data
        np.testing.assert_array_equal(probs[idx], solo)
        onehot = np.zeros((idx.size, 3))
        onehot[:, e] = 1
        soft, _ = m.forward_soft(Tensor(x.data[idx]), Tensor(p.data[idx]), gate_override=onehot)
        np.testing.assert_array_equal(probs[idx], soft.data)
        assert np.all(flops[idx] == ledger.hard_route_cost(EXPERT_NAMES[e]))
    assert flops.mean() < ledger.hard_route_cost("heavy")


def test_shape_mismatch(model):
    with pytest.raises(ModelError):
        model.prepare(np.zeros((2, 32, 32)), np.zeros((2, 128)))
    with pytest.raises(ModelError):
        MoEModel(ModelConfig(psd_bins=130))


def test_parameter_ordering(model):
    n = [e.num_params() for e in model.experts]
    assert n[0] > n[1] > n[2]
    assert 8 <= n[0] / n[2] <= 15 and 2 <= n[1] / n[2] <= 4


# load balancing and loss


def test_load_balance_examples():
    assert load_balance_value(np.eye(3)) == pytest.approx(1.0, abs=1e-9)
    assert load_balance_value(np.tile([1.0, 0, 0], (4, 1))) == pytest.approx(3.0, abs=1e-9)
    mixed = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
    assert load_balance_value(mixed) == pytest.approx(1.2, abs=1e-9)
    assert float(load_balance_loss(mixed).data) == pytest.approx(1.2, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=40))
def test_load_balance_hard_gates_bounded(choice):
    g = np.eye(3)[choice]
    assert 1 - 1e-6 <= load_balance_value(g) <= 3 + 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31), st.floats(0.1, 10))
def test_load_balance_soft_gates_brute_force(b, seed, temp):
    g = np.random.default_rng(seed).dirichlet(np.full(3, temp), size=b)
    top = np.argmax(g, axis=1)
    # 3 / B^2 * sum over sample pairs of g_j at the argmax expert of sample i
    ref = 3 * sum(g[j, top[i]] for i in range(b) for j in range(b)) / b**2
    v = load_balance_value(g)
    assert v == pytest.approx(ref, rel=1e-12)
    assert 0 < v <= 3 + 1e-9


def test_load_balance_soft_gates_can_dip_below_one():
    g = np.array([[0.34, 0.33, 0.33], [0.34, 0.33, 0.33], [0.0, 0.5, 0.5]])
    assert load_balance_value(g) == pytest.approx(3 * (2 / 3 * 0.68 / 3 + 1 / 3 * 1.16 / 3))
    assert load_balance_value(g) < 1


def test_total_loss_examples():
    perfect = np.eye(21)[[0, 4]]
    assert total_loss(Tensor(perfect), [0, 4], 1.0, 0.0).ce <= 1e-8
    uni = np.full((3, 21), 1 / 21)
    lb = total_loss(Tensor(uni), [0, 1, 2], 1.3, 0.0)
    assert lb.ce == pytest.approx(math.log(21), rel=1e-6)
    assert lb.total == lb.ce
    lb = total_loss(Tensor(uni), [0, 1, 2], 1.3, 0.25)
    assert abs(lb.total - (lb.ce + 0.25 * 1.3)) < 1e-6


# mechanism layers


def test_coord_att_zero_gates():
    rng = np.random.default_rng(0)
    m = L.CoordAttGLU(4, 3, 2, rng)
    for conv in (m.f_h, m.f_w):
        conv.weight.data[:] = 0
        conv.bias.data[:] = 0
    z = Tensor(rng.standard_normal((2, 4, 5, 6)))
    y_att, _ = m.attend(z)
    np.testing.assert_array_equal(y_att.data, 0.25 * z.data[:, :2])


def test_coord_att_constant_input_gives_constant_gates():
    rng = np.random.default_rng(1)
    m = L.CoordAttGLU(4, 3, 2, rng)
    z1 = np.broadcast_to(rng.standard_normal((1, 2, 1, 1)), (1, 2, 5, 7))
    gh, gw = m.gates(Tensor(np.ascontiguousarray(z1)))
    np.testing.assert_allclose(gh.data, np.broadcast_to(gh.data[..., :1], gh.shape), rtol=1e-6)
    np.testing.assert_allclose(gw.data, np.broadcast_to(gw.data[..., :1], gw.shape), rtol=1e-6)


def test_coord_att_odd_channels():
    with pytest.raises(GraphError):
        L.CoordAttGLU(3, 2, 2, np.random.default_rng(0))


def test_sk_identical_selectors_split_evenly():
    rng = np.random.default_rng(2)
    m = L.SKSelect([L.GhostModule(4, 4, 3, rng), L.GhostModule(4, 4, 5, rng)], 4, rng)
    m.select[1].weight.data = m.select[0].weight.data.copy()
    m.select[1].bias.data = m.select[0].bias.data.copy()
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))
    v = m(x)
    np.testing.assert_allclose(m.last_attention, 0.5, rtol=1e-6)
    u1, u2 = m.branches[0](x).data, m.branches[1](x).data
    np.testing.assert_allclose(v.data, 0.5 * (u1 + u2), rtol=1e-5, atol=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_sk_attention_normalised(seed):
    rng = np.random.default_rng(seed)
    m = L.SKSelect([L.GhostModule(4, 4, 3, rng), L.GhostModule(4, 4, 5, rng)], 4, rng)
    m(Tensor(3 * rng.standard_normal((2, 4, 5, 5))))
    np.testing.assert_allclose(m.last_attention.sum(axis=1), 1, atol=1e-6)


def test_sk_branch_mismatch():
    rng = np.random.default_rng(0)
    m = L.SKSelect([L.GhostModule(4, 4, 3, rng), L.GhostModule(4, 4, 3, rng, stride=2)], 4, rng)
    with pytest.raises(GraphError):
        m(Tensor(np.zeros((1, 4, 6, 6))))


def test_ghost_halves():
    rng = np.random.default_rng(3)
    m = L.GhostModule(3, 8, 3, rng)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    y = m(x).data
    np.testing.assert_array_equal(y[:, :4], m.primary(x).data)
    m.set_cheap_identity()
    y = m(x).data
    np.testing.assert_array_equal(y[:, :4], y[:, 4:])


def test_ghost_cheaper_than_dense_conv():
    rng = np.random.default_rng(0)
    ghost = L.GhostModule(16, 16, 3, rng)
    from jamlab.tensor_nn import Conv2d

    assert ghost.num_params() < Conv2d(16, 16, 3, rng).num_params()


def test_mqa_single_token():
    v = np.array([[[0.3, -1.2, 2.0]]])
    q = Tensor(np.random.default_rng(0).standard_normal((1, 2, 1, 3)))
    out, a = L.mqa_attention(q, Tensor(np.ones((1, 1, 3))), Tensor(v), 3)
    np.testing.assert_array_equal(a.data, 1.0)
    np.testing.assert_allclose(out.data[0, :, 0], np.repeat(v[0], 2, axis=0))


def test_mqa_rows_normalised():
    rng = np.random.default_rng(1)
    m = L.MobileMQA(4, 2, 3, rng)
    m(Tensor(rng.standard_normal((2, 4, 6, 6))))
    np.testing.assert_allclose(m.last_attention.sum(axis=-1), 1, atol=1e-6)


def test_aggregated_attention_single_pixel():
    rng = np.random.default_rng(2)
    m = L.AggregatedAttention(4, 3, rng).build(1, 1)
    x = rng.standard_normal((1, 4, 1, 1))
    out = m(Tensor(x)).data
    v = x[0, :, 0, 0] @ m.wv.weight.data
    ref = v @ m.wo.weight.data + m.wo.bias.data
    np.testing.assert_allclose(out[0, :, 0, 0], ref, rtol=1e-5)


def test_aggregated_attention_zero_alpha_is_uniform():
    rng = np.random.default_rng(3)
    m = L.AggregatedAttention(4, 3, rng).build(4, 4)
    m.alpha.data[:] = 0
    m(Tensor(rng.standard_normal((1, 4, 4, 4))))
    a = m.last_attention[0]
    interior = 1 * 4 + 1  # pixel (1, 1): full 3x3 neighbourhood inside the map
    np.testing.assert_allclose(a[interior], 1 / 13, rtol=1e-6)
    np.testing.assert_allclose(a.sum(axis=-1), 1, atol=1e-6)


def test_aggregated_attention_window_too_big():
    m = L.AggregatedAttention(4, 3, np.random.default_rng(0), window=5)
    with pytest.raises(GraphError):
        m(Tensor(np.zeros((1, 4, 1, 1))))


def test_se_fusion_limits():
    rng = np.random.default_rng(4)
    m = L.SEFusion(5, 6, rng)
    feats = Tensor(rng.standard_normal((2, 6)))
    emb = Tensor(rng.standard_normal((2, 5)))
    m.gate.weight.data[:] = 0
    m.gate.bias.data[:] = 0
    np.testing.assert_array_equal(m(emb, feats).data, 0.5 * feats.data)
    m.gate.bias.data[:] = 40.0
    np.testing.assert_allclose(m(emb, feats).data, feats.data, atol=1e-6)


@pytest.mark.parametrize("name", sorted(G.LAYERS))
def test_layer_gradients(name):
    for seed in range(2):
        loss, params = G.LAYERS[name](np.random.default_rng(seed))
        rep = grad_check(loss, params)
        assert rep.max_rel_error < 1e-4, rep


def test_full_mixture_gradient():
    loss, model = G.desk_moe_case(np.random.default_rng(7))
    rep = grad_check(loss, model, max_per_param=1)
    assert rep.max_rel_error < 1e-4, rep


# training


def test_split_is_80_20_and_disjoint():
    tr, va = split_indices(100, 0)
    assert len(tr) == 80 and len(va) == 20 and not set(tr) & set(va)


def test_single_expert_training_reduces_loss(tiny_set):
    tf, psd, labels = tiny_set
    m = MoEModel(ModelConfig(seed=0))
    cfg = TrainConfig(lr=1e-3, warmup_epochs=1, max_epochs=5, batch_size=16, aux_weight=0.0)
    hist = fit(m, (tf, psd, labels), cfg, force_expert=2)
    ce = [h["ce"] for h in hist]
    assert all(b < a for a, b in zip(ce, ce[1:]))


def test_training_is_deterministic(tiny_set):
    tf, psd, labels = tiny_set
    cfg = TrainConfig(lr=1e-3, warmup_epochs=1, max_epochs=2, batch_size=16)
    traces = []
    for _ in range(2):
        trace = []
        fit(MoEModel(ModelConfig(seed=0)), (tf, psd, labels), cfg, trace=trace)
        traces.append(trace)
    assert traces[0] == traces[1]


def test_predict_shapes(tiny_set):
    tf, psd, _ = tiny_set
    pred, chosen, flops, probs, gates = predict(MoEModel(), tf[:10], psd[:10], batch_size=4)
    assert pred.shape == chosen.shape == flops.shape == (10,)
    assert probs.shape == (10, 21) and gates.shape == (10, 3)
