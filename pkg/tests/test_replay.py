import threading

import numpy as np
import pytest

from passorder.exceptions import NotReady
from passorder.replay import ReplayMemory


def test_ring_eviction():
    m = ReplayMemory(3, min_fill=1)
    for i in range(4):
        m.insert(i)
    assert 0 not in m.snapshot() and m.snapshot() == [1, 2, 3]


def test_sample_single():
    m = ReplayMemory(10, min_fill=1)
    m.insert("x")
    assert m.sample(1, np.random.default_rng(0)) == ["x"]


def test_duplicates_kept():
    m = ReplayMemory(10, min_fill=1)
    m.extend(["x", "x"])
    assert len(m) == 2


def test_sample_without_replacement():
    m = ReplayMemory(1000, min_fill=1)
    m.extend(range(100))
    batch = m.sample(32, np.random.default_rng(1))
    assert len(set(batch)) == 32


def test_sample_deterministic():
    a, b = ReplayMemory(100, 1), ReplayMemory(100, 1)
    a.extend(range(50))
    b.extend(range(50))
    assert a.sample(8, np.random.default_rng(7)) == b.sample(8, np.random.default_rng(7))


def test_not_ready():
    m = ReplayMemory(100, min_fill=10)
    m.extend(range(9))
    assert not m.ready()
    with pytest.raises(NotReady):
        m.sample(1, np.random.default_rng(0))


def test_concurrent_insert_and_sample():
    m = ReplayMemory(500, min_fill=1)
    m.insert(-1)
    stop = threading.Event()
    errors = []

    def reader():
        rng = np.random.default_rng(0)
        while not stop.is_set():
            try:
                n = min(len(m), 8)
                assert len(set(m.sample(n, rng))) == n
            except Exception as e:  # pragma: no cover
                errors.append(e)

    t = threading.Thread(target=reader)
    t.start()
    for i in range(5000):
        m.insert(i)
    stop.set()
    t.join()
    assert not errors and len(m) == 500
