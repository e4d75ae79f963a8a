import numpy as np
import pytest
from hypothesis import given, strategies as st

from diva.queue import MemoryQueue


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_init_contract(rng):
    q = MemoryQueue.init(32, 5, rng)
    assert q.fill == 32 and q.capacity == 32 and q.cursor == 0
    assert np.all(np.abs(np.linalg.norm(q.snapshot(), axis=1) - 1) <= 1e-6)
    a = MemoryQueue.init(8, 3, np.random.default_rng(7)).snapshot()
    b = MemoryQueue.init(8, 3, np.random.default_rng(7)).snapshot()
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        MemoryQueue.init(0, 3, rng)


def test_init_isotropy():
    v = MemoryQueue.init(1000, 128, np.random.default_rng(0)).snapshot()
    G = v @ v.T
    off = G[~np.eye(1000, dtype=bool)]
    assert abs(off.mean()) < 0.01


def test_fifo_example(rng):
    q = MemoryQueue(np.zeros((4, 2)) + [1.0, 0.0])
    vs = unit_rows(rng, 6, 2)
    for i in range(0, 6, 2):
        q.push(vs[i : i + 2])
    assert q.cursor == 2
    np.testing.assert_array_equal(q.ordered(), vs[2:])
    assert {tuple(r) for r in q.snapshot()} == {tuple(r) for r in vs[2:]}


def test_push_exactly_capacity_replaces_all(rng):
    q = MemoryQueue.init(5, 3, rng)
    new = unit_rows(rng, 5, 3)
    q.push(new)
    assert {tuple(r) for r in q.snapshot()} == {tuple(r) for r in new}


def test_snapshot_is_a_readonly_copy(rng):
    q = MemoryQueue.init(4, 3, rng)
    snap = q.snapshot()
    q.push(unit_rows(rng, 2, 3))
    assert not np.array_equal(snap, q.snapshot())
    with pytest.raises(ValueError):
        snap[0, 0] = 1.0


def test_push_validation(rng):
    q = MemoryQueue.init(4, 3, rng)
    with pytest.raises(ValueError):
        q.push(unit_rows(rng, 1, 4))
    with pytest.raises(ValueError):
        q.push(np.ones((1, 3)))


@given(st.integers(1, 7), st.lists(st.integers(1, 10), max_size=12), st.integers(0, 2**31))
def test_fifo_matches_list_oracle(C, sizes, seed):
    rng = np.random.default_rng(seed)
    q = MemoryQueue.init(C, 3, rng)
    oracle = [tuple(r) for r in q.ordered()]
    pushed = 0
    for n in sizes:
        batch = unit_rows(rng, n, 3)
        q.push(batch)
        pushed += n
        oracle = (oracle + [tuple(r) for r in batch])[-C:]
        assert [tuple(r) for r in q.ordered()] == oracle
        assert q.cursor == pushed % C
        assert q.fill == C


def test_partial_fill_grows_to_capacity(rng):
    q = MemoryQueue(unit_rows(rng, 6, 2), fill=0)
    for expect in (2, 4, 6, 6):
        q.push(unit_rows(rng, 2, 2))
        assert q.fill == expect
