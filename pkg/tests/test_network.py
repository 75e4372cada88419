import numpy as np
import pytest

from passorder.network import Adam, QNetwork


def test_zero_head_gives_zero_q():
    net = QNetwork(5, 3, 2, 8, seed=0)
    net.params["out.W"][:] = 0
    assert not net.q_values(np.ones(5)).any()


def test_deterministic_output():
    net = QNetwork(5, 3, 2, 8, seed=0)
    x = np.random.default_rng(0).random(5)
    assert np.array_equal(net(x), net(x.copy()))
    assert np.allclose(net.q_values(np.stack([x, x]))[1], net(x), rtol=1e-12)


def test_input_sensitivity_matches_finite_difference():
    net = QNetwork(6, 2, 2, 16, seed=3)
    x = np.random.default_rng(1).random(6)
    h = 1e-6
    fd = np.array([(net(x + h * e)[0] - net(x - h * e)[0]) / (2 * h) for e in np.eye(6)])
    assert np.abs(fd).max() > 0
    x2 = x.copy()
    x2[int(np.argmax(np.abs(fd)))] += 0.1
    assert not np.allclose(net(x2), net(x))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        QNetwork(5, 3)(np.zeros(4))


def test_flat_round_trip():
    net = QNetwork(4, 2, 1, 8, seed=0)
    other = QNetwork(4, 2, 1, 8, seed=1)
    other.set_flat(net.flat())
    assert np.array_equal(other.flat(), net.flat())


def test_checkpoint_round_trip(tmp_path):
    net = QNetwork(4, 3, 2, 8, seed=2)
    net.save(tmp_path / "c.npz", {"level": "H", "step": 7})
    loaded, meta = QNetwork.load(tmp_path / "c.npz")
    assert meta == {"level": "H", "step": 7}
    x = np.arange(4.0)
    assert np.array_equal(loaded(x), net(x))
    assert loaded.architecture() == net.architecture()


def test_float32_network():
    net = QNetwork(4, 3, 2, 8, seed=2, dtype="float32")
    assert net(np.ones(4)).dtype == np.float32
    assert net.copy().dtype == np.float32


def test_adam_zero_lr_keeps_weights():
    net = QNetwork(4, 2, 1, 8, seed=0)
    before = net.flat()
    opt = Adam(net.params, lr=0.0)
    opt.step(net.params, {k: np.ones_like(v) for k, v in net.params.items()})
    assert np.array_equal(net.flat(), before)
