import numpy as np
import pytest

from gradcheck import numeric_grads, rel_error
from stemsplit import nn
from stemsplit.dsp import StftConfig, istft_array
from stemsplit.nn.checkpoint import CheckpointError, load_arrays, save_arrays
from stemsplit.nn.layers import BatchNorm, BiLSTMStacks, Linear
from stemsplit.nn.tensor import ShapeError, Tensor


def grad_error(build, arrays, seed=0):
    """Max relative error between backprop and central differences of ``sum(build(...) * W)``."""
    probe = build(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def f():
        return float(np.sum(build(*[Tensor(a) for a in arrays]).data * weights))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    nn.sum(build(*leaves) * weights).backward()
    numeric = numeric_grads(f, arrays)
    return max(rel_error(t.grad, g) for t, g in zip(leaves, numeric))


def _r(*shape, seed=0, scale=1.0):
    return np.random.default_rng(seed + sum(shape)).standard_normal(shape) * scale


def _pos(*shape, seed=0):
    return np.random.default_rng(seed).uniform(0.5, 2.0, shape)


DENSE_CASES = {
    "add": (lambda a, b: a + b, [_r(3, 4), _r(4)]),
    "sub": (lambda a, b: a - b, [_r(3, 1), _r(3, 4)]),
    "mul": (lambda a, b: a * b, [_r(2, 3), _r(2, 3, seed=1)]),
    "div": (lambda a, b: a / b, [_r(2, 3), _pos(2, 3)]),
    "relu": (nn.relu, [_r(4, 5) + 0.05]),
    "tanh": (nn.tanh, [_r(4, 5)]),
    "sigmoid": (nn.sigmoid, [_r(4, 5)]),
    "exp": (nn.exp, [_r(3, 3, scale=0.5)]),
    "log": (nn.log, [_pos(3, 3)]),
    "square": (nn.square, [_r(6)]),
    "sum_axis": (lambda a: nn.sum(a, axis=1), [_r(3, 4, 2)]),
    "mean": (lambda a: nn.mean(a, axis=(0, 2), keepdims=True), [_r(3, 4, 2)]),
    "reshape": (lambda a: nn.reshape(a, (6, 2)), [_r(3, 4)]),
    "transpose": (lambda a: nn.transpose(a, (2, 0, 1)), [_r(2, 3, 4)]),
    "getitem": (lambda a: a[1:, ::2], [_r(3, 5)]),
    "getitem_advanced": (lambda a: nn.getitem(a, (np.array([0, 2, 0]),)), [_r(3, 4)]),
    "concat": (lambda a, b: nn.concat([a, b], axis=-1), [_r(2, 3), _r(2, 5)]),
    "stack": (lambda a, b: nn.stack([a, b], axis=1), [_r(2, 3), _r(2, 3, seed=2)]),
    "mean_over": (lambda a, b, c: nn.mean_over([a, b, c]), [_r(2, 3), _r(2, 3, seed=1), _r(2, 3, seed=2)]),
    "matmul": (lambda a, b: a @ b, [_r(2, 3, 4), _r(4, 5)]),
    "linear": (nn.linear, [_r(2, 3, 4), _r(5, 4), _r(5)]),
    "batchnorm_train": (
        lambda x, g, b: nn.batchnorm(x, g, b, np.zeros(4), np.ones(4), True),
        [_r(3, 5, 4), _r(4, seed=1), _r(4, seed=2)],
    ),
    "batchnorm_eval": (
        lambda x, g, b: nn.batchnorm(x, g, b, np.full(4, 0.3), np.full(4, 2.0), False),
        [_r(3, 5, 4), _r(4, seed=1), _r(4, seed=2)],
    ),
}


@pytest.mark.parametrize("name", sorted(DENSE_CASES))
def test_dense_op_gradients(name):
    build, arrays = DENSE_CASES[name]
    assert grad_error(build, [a.copy() for a in arrays]) < 1e-4


def test_fc_tanh_net_gradient():
    rng = np.random.default_rng(0)
    arrays = [rng.standard_normal((6, 5))]
    weights = [rng.standard_normal(s) * 0.5 for s in [(8, 5), (8,), (8, 8), (8,), (3, 8), (3,)]]

    def net(x, *params):
        h = x
        for i in range(3):
            h = nn.tanh(nn.linear(h, params[2 * i], params[2 * i + 1]))
        return h

    assert grad_error(net, arrays + weights) < 1e-4


def test_lstm_cell_gradient():
    H, D, B = 3, 2, 2
    arrays = [_r(B, D), _r(B, H, seed=1), _r(B, H, seed=2), _r(4 * H, D, seed=3), _r(4 * H, H, seed=4), _r(4 * H, seed=5)]
    assert grad_error(lambda *a: nn.concat(list(nn.lstm_cell(*a)), axis=-1), arrays) < 1e-3


def test_bilstm_group_gradient():
    G, B, T, D, H = 2, 2, 5, 3, 4
    arrays = [_r(G, B, T, D, scale=0.5), _r(G, 2, 4 * H, D, scale=0.5), _r(G, 2, 4 * H, H, scale=0.5), _r(G, 2, 4 * H, scale=0.5)]
    assert grad_error(nn.bilstm_group, arrays) < 1e-3


def test_bilstm_layer_gradient_5x4():
    H = 3
    arrays = [_r(1, 5, 4), _r(2, 4 * H, 4, scale=0.5), _r(2, 4 * H, H, scale=0.5), _r(2, 4 * H, scale=0.5)]
    assert grad_error(nn.bilstm_layer, arrays) < 1e-3


def test_masked_istft_gradient():
    cfg = StftConfig(16, 4, 8000)
    length = 40
    n = cfg.n_frames(length)
    rng = np.random.default_rng(3)
    spec = rng.standard_normal((2, n, 9)) + 1j * rng.standard_normal((2, n, 9))
    assert grad_error(lambda m: nn.masked_istft(m, spec, cfg, length), [rng.random((2, n, 9))]) < 1e-4


# --------------------------------------------------------------------------
# forward semantics
# --------------------------------------------------------------------------


def test_square_sum_gradient_exact():
    x = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
    nn.sum(nn.square(x)).backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_relu_values():
    assert nn.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_mean_over_identical():
    t = Tensor(_r(2, 3))
    assert np.allclose(nn.mean_over([t, t, t]).data, t.data, rtol=1e-15, atol=0)
    assert np.array_equal(nn.mean_over([t]).data, t.data)


def test_bilstm_length_one_is_one_cell_step_each_way():
    H, D = 3, 2
    x = _r(2, 1, D)
    w_ih, w_hh, b = _r(2, 4 * H, D, seed=1), _r(2, 4 * H, H, seed=2), _r(2, 4 * H, seed=3)
    out = nn.bilstm_layer(x, w_ih, w_hh, b).data
    zeros = np.zeros((2, H))
    fwd, _ = nn.lstm_cell(x[:, 0], zeros, zeros, w_ih[0], w_hh[0], b[0])
    bwd, _ = nn.lstm_cell(x[:, 0], zeros, zeros, w_ih[1], w_hh[1], b[1])
    assert np.allclose(out[:, 0], np.concatenate([fwd.data, bwd.data], axis=-1), atol=1e-12)


def test_bilstm_matches_cell_unrolling():
    H, D, T = 3, 2, 4
    x = _r(1, T, D)
    w_ih, w_hh, b = _r(2, 4 * H, D, seed=1), _r(2, 4 * H, H, seed=2), _r(2, 4 * H, seed=3)
    out = nn.bilstm_layer(x, w_ih, w_hh, b).data
    for d, steps in ((0, range(T)), (1, reversed(range(T)))):
        h = c = np.zeros((1, H))
        for t in steps:
            h, c = (v.data for v in nn.lstm_cell(x[:, t], h, c, w_ih[d], w_hh[d], b[d]))
            assert np.allclose(out[:, t, d * H : (d + 1) * H], h, atol=1e-12)


def test_batchnorm_modes():
    bn = BatchNorm(4)
    x = _r(8, 6, 4) * 3 + 1
    y = bn(Tensor(x)).data.reshape(-1, 4)
    assert np.allclose(y.mean(axis=0), 0, atol=1e-10)
    assert np.allclose(y.var(axis=0), 1, atol=1e-3)
    assert np.allclose(bn.running_mean, 0.1 * x.reshape(-1, 4).mean(axis=0))
    bn.eval()
    x2 = _r(2, 3, 4, seed=9)
    expected = (x2 - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    assert np.allclose(bn(Tensor(x2)).data, expected)


def test_linear_layer_init_bounds():
    layer = Linear(16, 8, np.random.default_rng(0))
    assert np.abs(layer.weight.data).max() <= 0.25
    assert layer.weight.shape == (8, 16)


def test_bilstm_stacks_forget_bias_and_shape():
    stacks = BiLSTMStacks(3, 2, 5, 4, np.random.default_rng(0))
    assert np.all(stacks.b[0].data[..., 4:8] == 1.0)
    out = stacks(Tensor(_r(2, 7, 5)))
    assert out.shape == (3, 2, 7, 8)


def test_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))
    with pytest.raises(ShapeError):
        nn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="scalar"):
        (Tensor(np.ones(3), requires_grad=True) * 2).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with nn.no_grad():
        y = nn.tanh(x * 2)
    assert not y.requires_grad


def test_float32_stays_float32():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    y = nn.sum(nn.tanh(x * 2.0 + 1.0) / 3.0)
    assert y.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32


def test_masked_istft_forward_matches_dsp():
    cfg = StftConfig(32, 8, 8000)
    rng = np.random.default_rng(0)
    n = cfg.n_frames(100)
    spec = rng.standard_normal((n, 17)) + 1j * rng.standard_normal((n, 17))
    mask = rng.random((n, 17))
    assert np.array_equal(nn.masked_istft(mask, spec, cfg, 100).data, istft_array(mask * spec, cfg, 100))


# --------------------------------------------------------------------------
# optimizer and schedule
# --------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    nn.adam_step([p], [np.zeros(2)], {}, lr=0.1)
    assert p.tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr_sign():
    p = np.zeros(3)
    g = np.array([0.3, -5.0, 1e-3])
    nn.adam_step([p], [g], {}, lr=0.01)
    assert np.allclose(p, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_constant_gradient_asymptote():
    p = np.zeros(2)
    state = {}
    g = np.array([2.0, -0.5])
    for _ in range(200):
        before = p.copy()
        nn.adam_step([p], [g], state, lr=0.001)
    assert np.allclose(p - before, -0.001 * np.sign(g), rtol=1e-4)


def test_plateau_schedule():
    s = nn.PlateauHalver(lr=1e-3, patience=3)
    assert [s.step(v) for v in [5, 4, 3, 2, 1]] == [1e-3] * 5
    s = nn.PlateauHalver(lr=1e-3, patience=3)
    lrs = [s.step(1.0) for _ in range(4)]
    assert lrs == [1e-3, 1e-3, 1e-3, 5e-4]
    assert s.bad_epochs == 0
    # patience restarts: three more flat epochs halve again
    assert [s.step(1.0) for _ in range(3)] == [5e-4, 5e-4, 2.5e-4]


def test_plateau_json_round_trip():
    s = nn.PlateauHalver(lr=1e-3)
    for v in [3, 2, 2.5]:
        s.step(v)
    t = nn.PlateauHalver.from_json(s.to_json())
    assert (t.lr, t.best, t.bad_epochs) == (s.lr, s.best, s.bad_epochs)


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    arrays = [("a", np.arange(6, dtype=np.float32).reshape(2, 3)), ("b", np.array([0.1], np.float32))]
    save_arrays(tmp_path / "c.ckpt", arrays, {"note": "x"})
    header, back = load_arrays(tmp_path / "c.ckpt")
    assert header["note"] == "x" and header["version"] == 1
    assert [t["name"] for t in header["tensors"]] == ["a", "b"]
    for name, a in arrays:
        assert np.array_equal(back[name], a)
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:8] == b"MRXCKPT1"


def test_checkpoint_corruption(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nope" * 8)
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "bad.ckpt")
    save_arrays(tmp_path / "c.ckpt", [("a", np.ones(10, np.float32))])
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_arrays(tmp_path / "t.ckpt")
