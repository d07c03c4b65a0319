"""Gradient-check cases shared by the unit tests and the acceptance suite.

Each case builder takes a numpy Generator and returns ``(loss_fn, params)``
ready for :func:`jamlab.tensor_nn.grad_check`. Inputs are float64 and every
output is reduced against a fixed random weighting so that no gradient entry
is trivially constant.
"""
import numpy as np

from jamlab.moe import layers as L
from jamlab.moe.model import ModelConfig, MoEModel, load_balance_loss, total_loss
from jamlab.tensor_nn import Conv1d, Conv2d, Linear, Parameter
from jamlab.tensor_nn import tensor as T


def _dims(rng, n, lo=1, hi=8):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


def _arr(rng, *shape, away=0.0):
    a = rng.standard_normal(shape)
    if away:
        a = np.where(np.abs(a) < away, np.sign(a + 1e-12) * away, a)
    return a


def _reduce(y, rng):
    w = rng.standard_normal(y.shape)
    return (y * w).sum()


def _case(fn, rng, *arrays):
    params = [Parameter(np.asarray(a, dtype=np.float64)) for a in arrays]
    wrng_seed = int(rng.integers(2**31))

    def loss():
        return _reduce(fn(*params), np.random.default_rng(wrng_seed))

    return loss, params


# primitives


def p_matmul(rng):
    m, k, n = _dims(rng, 3)
    return _case(T.matmul, rng, _arr(rng, m, k), _arr(rng, k, n))


def p_batched_matmul(rng):
    b, m, k, n = _dims(rng, 4, hi=5)
    return _case(T.matmul, rng, _arr(rng, b, m, k), _arr(rng, k, n))


def p_add_broadcast(rng):
    m, n = _dims(rng, 2)
    return _case(T.add, rng, _arr(rng, m, n), _arr(rng, 1, n))


def p_mul(rng):
    m, n = _dims(rng, 2)
    return _case(T.mul, rng, _arr(rng, m, n), _arr(rng, m, 1))


def p_div(rng):
    m, n = _dims(rng, 2)
    return _case(T.div, rng, _arr(rng, m, n), 2.0 + np.abs(_arr(rng, m, n)))


def p_exp(rng):
    return _case(T.exp, rng, _arr(rng, *_dims(rng, 2)))


def p_log(rng):
    return _case(T.log, rng, 0.5 + np.abs(_arr(rng, *_dims(rng, 2))))


def p_power(rng):
    return _case(lambda x: T.power(x, 1.5), rng, 0.5 + np.abs(_arr(rng, *_dims(rng, 2))))


def p_relu(rng):
    return _case(T.relu, rng, _arr(rng, *_dims(rng, 3), away=1e-2))


def p_sigmoid(rng):
    return _case(T.sigmoid, rng, 3 * _arr(rng, *_dims(rng, 3)))


def p_tanh(rng):
    return _case(T.tanh, rng, _arr(rng, *_dims(rng, 2)))


def p_gelu(rng):
    return _case(T.gelu, rng, _arr(rng, *_dims(rng, 3)))


def p_softmax(rng):
    shape = _dims(rng, 3)
    axis = int(rng.integers(3))
    return _case(lambda x: T.softmax(x, axis=axis), rng, _arr(rng, *shape))


def p_sum_mean(rng):
    shape = _dims(rng, 3)
    return _case(lambda x: T.tsum(x, axis=1) * 0.5 + T.mean(x, axis=(0, 2)).sum(), rng, _arr(rng, *shape))


def p_max(rng):
    shape = _dims(rng, 3)
    return _case(lambda x: T.tmax(x, axis=-1), rng, _arr(rng, *shape))


def p_concat_slice(rng):
    m, n, k = _dims(rng, 3)

    def fn(a, b):
        c = T.concat([a, b], axis=1)
        return c[:, 1:] * 2.0

    return _case(fn, rng, _arr(rng, m, n), _arr(rng, m, k))


def p_stack_split(rng):
    m, n = _dims(rng, 2)

    def fn(a, b):
        s = T.stack([a, b], axis=0)
        x, y = T.split(s, 2, axis=0)
        return x * y

    return _case(fn, rng, _arr(rng, m, n), _arr(rng, m, n))


def p_reshape_transpose(rng):
    a, b, c = _dims(rng, 3)
    return _case(lambda x: x.transpose(2, 0, 1).reshape(c, a * b), rng, _arr(rng, a, b, c))


def p_conv2d(rng):
    B, C, O = _dims(rng, 3, hi=3)
    k = int(rng.choice([1, 3]))
    H, W = _dims(rng, 2, lo=k + 1, hi=8)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    return _case(
        lambda x, w, b: T.conv2d(x, w, b, stride, pad), rng,
        _arr(rng, B, C, H, W), _arr(rng, O, C, k, k), _arr(rng, O),
    )


def p_conv2d_depthwise(rng):
    B, C = _dims(rng, 2, hi=3)
    H, W = _dims(rng, 2, lo=3, hi=8)
    stride = int(rng.integers(1, 3))
    return _case(
        lambda x, w, b: T.conv2d(x, w, b, stride, 1, groups=C), rng,
        _arr(rng, B, C, H, W), _arr(rng, C, 1, 3, 3), _arr(rng, C),
    )


def p_conv1d(rng):
    B, C, O = _dims(rng, 3, hi=4)
    L_ = int(rng.integers(4, 9))
    stride = int(rng.integers(1, 3))
    return _case(
        lambda x, w, b: T.conv1d(x, w, b, stride, 1), rng,
        _arr(rng, B, C, L_), _arr(rng, O, C, 3), _arr(rng, O),
    )


def p_pools(rng):
    B, C = _dims(rng, 2, hi=3)
    H, W = 2 * np.array(_dims(rng, 2, hi=4))

    def fn(x):
        return T.avg_pool2d(x, 2).sum() + T.max_pool2d(x, 2).sum() + T.max_pool1d(x.reshape(B, C * H, W), 2).sum()

    return _case(fn, rng, _arr(rng, B, C, int(H), int(W)))


def p_pad_unfold(rng):
    B, C = _dims(rng, 2, hi=3)
    H, W = _dims(rng, 2, lo=2, hi=6)
    return _case(lambda x: T.unfold2d(T.pad2d(x, 1), 3, 0), rng, _arr(rng, B, C, H, W))


def p_cross_entropy(rng):
    B, C = _dims(rng, 2, lo=2)
    labels = rng.integers(0, C, size=B)
    return _case(lambda z: T.cross_entropy_from_probs(T.softmax(z, axis=-1), labels), rng, _arr(rng, B, C))


PRIMITIVES = {
    f.__name__[2:]: f
    for f in (
        p_matmul, p_batched_matmul, p_add_broadcast, p_mul, p_div, p_exp, p_log, p_power,
        p_relu, p_sigmoid, p_tanh, p_gelu, p_softmax, p_sum_mean, p_max, p_concat_slice,
        p_stack_split, p_reshape_transpose, p_conv2d, p_conv2d_depthwise, p_conv1d, p_pools,
        p_pad_unfold, p_cross_entropy,
    )
}


# mechanism layers


def _layer_case(module, rng, *inputs, call=None):
    module.astype(np.float64)
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    wseed = int(rng.integers(2**31))
    call = call or (lambda m, *a: m(*a))

    def loss():
        return _reduce(call(module, *[T.Tensor(x) for x in xs]), np.random.default_rng(wseed))

    return loss, module


def _randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.data = scale * rng.standard_normal(p.data.shape)
    return module


def l_linear(rng):
    n_in, n_out, B = _dims(rng, 3)
    return _layer_case(_randomize(Linear(n_in, n_out, rng), rng), rng, _arr(rng, B, n_in))


def l_conv2d(rng):
    m = _randomize(Conv2d(2, 3, 3, rng, stride=2), rng)
    return _layer_case(m, rng, _arr(rng, 2, 2, 6, 6))


def l_conv1d(rng):
    m = _randomize(Conv1d(2, 3, 3, rng), rng)
    return _layer_case(m, rng, _arr(rng, 2, 2, 8))


def l_coord_att_glu(rng):
    C = 2 * int(rng.integers(1, 4))
    H, W = _dims(rng, 2, lo=2, hi=6)
    m = _randomize(L.CoordAttGLU(C, 3, 2, rng), rng)
    return _layer_case(m, rng, _arr(rng, 2, C, H, W))


def l_ghost(rng):
    m = _randomize(L.GhostModule(2, 4, 3, rng), rng)
    H, W = _dims(rng, 2, lo=3, hi=6)
    return _layer_case(m, rng, _arr(rng, 2, 2, H, W))


def l_sk_select(rng):
    C = 4
    m = L.SKSelect([L.GhostModule(C, C, 3, rng), L.GhostModule(C, C, 5, rng)], C, rng)
    _randomize(m, rng)
    H, W = _dims(rng, 2, lo=3, hi=6)
    return _layer_case(m, rng, _arr(rng, 2, C, H, W))


def l_mobile_mqa(rng):
    C = 4
    m = _randomize(L.MobileMQA(C, 2, 3, rng), rng)
    H, W = _dims(rng, 2, lo=2, hi=6)
    return _layer_case(m, rng, _arr(rng, 2, C, H, W))


def l_aggregated_attention(rng):
    C = 4
    H, W = 2 * np.array(_dims(rng, 2, lo=1, hi=3))
    m = _randomize(L.AggregatedAttention(C, 3, rng).build(int(H), int(W)), rng)
    return _layer_case(m, rng, _arr(rng, 2, C, int(H), int(W)))


def l_se_fusion(rng):
    E, C = _dims(rng, 2)
    m = _randomize(L.SEFusion(E, C, rng), rng)
    return _layer_case(m, rng, _arr(rng, 2, E), _arr(rng, 2, C, 3, 3))


LAYERS = {
    f.__name__[2:]: f
    for f in (
        l_linear, l_conv2d, l_conv1d, l_coord_att_glu, l_ghost, l_sk_select, l_mobile_mqa,
        l_aggregated_attention, l_se_fusion,
    )
}


def desk_moe_case(rng, batch=2, weight=0.01):
    """Full desk-scale soft mixture + CE + weighted L_aux.

    Router and heads are randomised (their zero initialisation would put the
    gate exactly on an argmax tie, where L_aux is discontinuous).
    """
    model = MoEModel(ModelConfig(seed=int(rng.integers(2**31))))
    for p in list(model.router_head.parameters()) + [e.head.weight for e in model.experts]:
        p.data = (0.05 * rng.standard_normal(p.data.shape)).astype(p.data.dtype)
    model.astype(np.float64)
    tf = rng.standard_normal((batch, 64, 64))
    psd = rng.standard_normal((batch, 128))
    labels = rng.integers(0, 21, size=batch)

    def loss():
        x, p = model.prepare(tf, psd, dtype=np.float64)
        mix, gate = model.forward_soft(x, p)
        return total_loss(mix, labels, load_balance_loss(gate), weight).tensor

    return loss, model
