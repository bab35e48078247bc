import numpy as np
import pytest

from garmgen import diffcore as dc
from garmgen.diffcore import Tensor


def _seeded_cbn_net(seed=3, dims=(3, 12, 12, 1), cond=6):
    return dc.make_mlp(list(dims), cond_dim=cond, conditional_norm=True, seed=seed)


# ---------------------------------------------------------------------------
# forward

def test_identity_linear_net():
    net = dc.make_mlp([4, 4], seed=0)
    net.layers[0].weights.data[:] = np.eye(4)
    net.layers[0].biases.data[:] = 0
    x = np.random.default_rng(0).normal(size=(5, 4))
    y = dc.forward(net, Tensor(x), mode="eval")
    assert np.allclose(y.data, x)


def test_cond_batchnorm_zero_variance_finite():
    net = _seeded_cbn_net()
    x = Tensor(np.ones((6, 3)))          # zero variance in every feature
    c = Tensor(np.random.default_rng(1).normal(size=(6, 6)))
    y = dc.forward(net, x, condition=c, mode="train")
    assert np.isfinite(y.data).all()


def test_eval_forward_batch_order_invariant():
    net = _seeded_cbn_net(seed=8)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 3))
    c = rng.normal(size=(10, 6))
    y = dc.forward(net, Tensor(x), Tensor(c), mode="eval").data
    perm = rng.permutation(10)
    y2 = dc.forward(net, Tensor(x[perm]), Tensor(c[perm]), mode="eval").data
    assert np.abs(y2 - y[perm]).max() < 1e-12


def test_forward_shape_mismatch_names_layer():
    net = dc.make_mlp([3, 8, 1], seed=0)
    with pytest.raises(ValueError, match="layer 0"):
        dc.forward(net, Tensor(np.zeros((4, 5))))


def test_train_mode_updates_running_stats():
    net = _seeded_cbn_net()
    rng = np.random.default_rng(0)
    layer = [l for l in net.layers if l.kind == "cond_batchnorm"][0]
    before = layer.running_mean.copy()
    dc.forward(net, Tensor(rng.normal(2.0, 1.0, (16, 3))),
               Tensor(rng.normal(size=(16, 6))), mode="train")
    assert not np.array_equal(layer.running_mean, before)


# ---------------------------------------------------------------------------
# backward

def test_linear_gradient_is_outer_product():
    w = Tensor(np.zeros((3, 2)), requires_grad=True)
    x = np.array([[1.0, 2.0, -1.0]])
    loss = (Tensor(x) @ w).sum()
    loss.backward()
    assert np.allclose(w.grad, np.outer(x[0], np.ones(2)))


def test_constant_loss_zero_gradients():
    net = dc.make_mlp([2, 4, 1], seed=1)
    x = Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    y = dc.forward(net, x) * 0.0
    y.sum().backward()
    for _, p in net.parameters():
        assert p.grad is None or np.abs(p.grad).max() == 0


def test_finite_difference_audit_three_layer_cbn():
    net = _seeded_cbn_net(seed=3)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(12, 3)))
    c = Tensor(rng.normal(size=(12, 6)))
    t = rng.normal(size=(12, 1))

    def loss_fn():
        y = dc.forward(net, x, condition=c, mode="train", update_stats=False)
        d = y - Tensor(t)
        return (d * d).mean()

    assert dc.finite_difference_audit(loss_fn, net.parameters()) < 1e-4


def test_backward_without_graph_raises():
    with pytest.raises(ValueError, match="no recorded graph"):
        Tensor(np.ones(3)).backward(np.ones(3))


def test_take_and_concat_gradients():
    base = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    idx = np.array([[0, 2], [1, 1]])
    g = base.take(idx)            # (2, 2, 2)
    h = dc.concat([g, g * 2.0], axis=-1)
    h.sum().backward()
    expected = np.zeros((3, 2))
    for row in idx.ravel():
        expected[row] += 3.0      # 1 + 2 per occurrence, both columns
    assert np.allclose(base.grad, expected)


def test_max_routes_gradient_to_argmax():
    x = Tensor(np.array([[1.0, 5.0, 3.0], [4.0, 2.0, 9.0]]), requires_grad=True)
    x.max(axis=1).sum().backward()
    assert np.array_equal(x.grad, [[0, 1, 0], [0, 0, 1]])


# ---------------------------------------------------------------------------
# optimizer

def test_adamw_zero_gradients_no_decay_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    st = dc.AdamWState(lr=0.1, weight_decay=0.0)
    dc.adamw_step(st, [("p", p)])
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_quadratic_convergence():
    p = Tensor(np.array([0.0]), requires_grad=True)
    st = dc.AdamWState(lr=0.1, weight_decay=0.0)
    for _ in range(500):
        p.zero_grad()
        loss = (p - 3.0) * (p - 3.0)
        loss.backward(np.ones(1))
        dc.adamw_step(st, [("p", p)])
    assert abs(p.data[0] - 3.0) < 1e-3


def test_adamw_decoupled_decay_shrinks_params():
    p = Tensor(np.array([5.0]), requires_grad=True)
    st = dc.AdamWState(lr=0.01, weight_decay=0.1)
    prev = 5.0
    for _ in range(5):
        p.grad = np.zeros(1)
        dc.adamw_step(st, [("p", p)])
        assert abs(p.data[0]) < prev
        prev = abs(p.data[0])


def test_adamw_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.zeros(4)
    with pytest.raises(ValueError, match="shape"):
        dc.adamw_step(dc.AdamWState(), [("p", p)])


# ---------------------------------------------------------------------------
# serialization

def test_mlpw_round_trip_bit_exact(tmp_path):
    net = _seeded_cbn_net(seed=9)
    rng = np.random.default_rng(1)
    x, c = Tensor(rng.normal(size=(7, 3))), Tensor(rng.normal(size=(7, 6)))
    # push the running stats away from their init first
    dc.forward(net, x, c, mode="train")
    y1 = dc.forward(net, x, c, mode="eval").data
    path = tmp_path / "net.mlpw"
    dc.save_mlp(net, path, manifest={"seed": 9})
    net2 = dc.load_mlp(path)
    y2 = dc.forward(net2, x, c, mode="eval").data
    assert np.array_equal(y1, y2)
    assert net2.input_latent == net.input_latent


def test_mlpw_bad_magic(tmp_path):
    path = tmp_path / "garbage.mlpw"
    path.write_bytes(b"XXXX" + b"\0" * 32)
    with pytest.raises(ValueError, match="MLPW"):
        dc.load_mlp(path)


def test_training_determinism():
    def run():
        net = dc.make_mlp([2, 8, 1], seed=4)
        st = dc.AdamWState(lr=1e-2)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = Tensor(rng.normal(size=(6, 2)))
            t = Tensor(rng.normal(size=(6, 1)))
            d = dc.forward(net, x) - t
            loss = (d * d).mean()
            for _, p in net.parameters():
                p.zero_grad()
            loss.backward()
            dc.adamw_step(st, net.parameters())
        return net.layers[0].weights.data.copy()

    assert np.array_equal(run(), run())
