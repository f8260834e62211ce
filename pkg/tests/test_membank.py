import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from knowledge.tissue_knowledge import CSF, GM, WM
from utils.exceptions import ShapeError
from utils.membank import MemoryBank

vectors = st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=40)


@given(capacity=st.integers(1, 12), pushed=vectors)
def test_buffer_keeps_the_newest_entries_in_order(capacity, pushed):
    bank = MemoryBank(capacity)
    for v in pushed:
        bank.push(GM, 0, v)
    kept = pushed[-capacity:]
    assert bank.size(GM, 0) == len(kept)
    assert [list(v) for v in bank.buffer(GM, 0)] == kept
    assert bank.pushes(GM, 0) == len(pushed)
    np.testing.assert_allclose(bank.prototype(GM, 0), np.mean(kept, axis=0), rtol=1e-9, atol=1e-9)


@given(v=st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4), n=st.integers(1, 30))
def test_identical_pushes_give_an_exact_prototype(v, n):
    bank = MemoryBank(capacity=10)
    for _ in range(n):
        bank.push(WM, 2, v)
    assert np.array_equal(bank.prototype(WM, 2), np.array(v))


def test_empty_buffers_have_no_prototype():
    bank = MemoryBank()
    assert bank.is_empty()
    assert bank.prototype(CSF, 0) is None
    bank.push(CSF, 1, [1.0, 2.0])
    assert not bank.is_empty()
    assert bank.prototype(CSF, 0) is None


def test_pushed_vectors_are_snapshots():
    bank = MemoryBank()
    source = np.array([1.0, 2.0])
    bank.push(GM, 0, source)
    source[0] = 99.0
    assert bank.buffer(GM, 0)[0][0] == 1.0


def test_width_is_fixed_per_scale_and_classes_are_checked():
    bank = MemoryBank()
    bank.push(GM, 0, np.zeros(3))
    with pytest.raises(ShapeError):
        bank.push(WM, 0, np.zeros(4))
    bank.push(WM, 1, np.zeros(4))
    with pytest.raises(KeyError):
        bank.push(0, 0, np.zeros(3))
    with pytest.raises(ValueError):
        MemoryBank(capacity=0)


def test_push_pooled_respects_presence():
    bank = MemoryBank()
    pushed = bank.push_pooled(0, {CSF: np.ones(2), GM: np.ones(2), WM: np.ones(2)},
                              {CSF: True, GM: False, WM: True})
    assert pushed == 2
    assert bank.size(GM, 0) == 0


def test_state_dict_roundtrip_and_truncation():
    bank = MemoryBank(capacity=3)
    for i in range(5):
        bank.push(GM, 0, [float(i), 1.0])
    bank.push(CSF, 2, [0.0, 0.0, 1.0])
    state = bank.state_dict()
    assert sorted(state) == ["c1_s2", "c2_s0"]
    assert state["c2_s0"][:, 0].tolist() == [2.0, 3.0, 4.0]

    restored = MemoryBank(capacity=3)
    restored.load_state_dict(state)
    np.testing.assert_array_equal(restored.prototype(GM, 0), bank.prototype(GM, 0))

    smaller = MemoryBank(capacity=2)
    smaller.load_state_dict(state)
    assert [v[0] for v in smaller.buffer(GM, 0)] == [3.0, 4.0]


def test_concurrent_pushes_are_all_counted():
    bank = MemoryBank(capacity=1000)

    def worker(offset):
        for i in range(100):
            bank.push(GM, 0, [float(offset + i)])

    threads = [threading.Thread(target=worker, args=(k * 100,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert bank.size(GM, 0) == 400


def test_randomized_operations_match_a_list_oracle():
    rng = np.random.default_rng(2024)
    capacity = 7
    bank = MemoryBank(capacity)
    oracle = {}
    for _ in range(10_000):
        cls, scale = int(rng.choice([CSF, GM, WM])), int(rng.integers(0, 3))
        if rng.random() < 0.7:
            v = rng.normal(size=scale + 2)
            bank.push(cls, scale, v)
            oracle.setdefault((cls, scale), []).append(v)
            oracle[(cls, scale)] = oracle[(cls, scale)][-capacity:]
        else:
            kept = oracle.get((cls, scale), [])
            proto = bank.prototype(cls, scale)
            if not kept:
                assert proto is None
            else:
                np.testing.assert_allclose(proto, np.mean(kept, axis=0), rtol=1e-12, atol=1e-12)
                assert bank.size(cls, scale) == len(kept)
