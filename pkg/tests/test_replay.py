import threading

import numpy as np
import pytest
from scipy import stats

from seedling.replay import NotReady, PrioritizedBuffer, QueueClosed, SumTree, TrajectoryQueue


# -- queue --------------------------------------------------------------------


def test_queue_fifo_and_batch_pop():
    q = TrajectoryQueue(4)
    for i in range(3):
        q.push(i)
    assert q.pop_batch(2) == [0, 1]
    assert q.pop() == 2
    assert q.pop(timeout=0.01) is None


def test_queue_blocks_when_full_and_drop_oldest_variant():
    q = TrajectoryQueue(2)
    q.push("a")
    q.push("b")
    assert q.push("c", timeout=0.01) is False
    d = TrajectoryQueue(2, drop_oldest=True)
    for x in "abc":
        d.push(x)
    assert d.pop_batch(2) == ["b", "c"] and d.dropped == 1


def test_queue_close_wakes_producers():
    q = TrajectoryQueue(1)
    q.push(0)
    errors = []

    def producer():
        try:
            q.push(1)
        except QueueClosed:
            errors.append("closed")

    th = threading.Thread(target=producer)
    th.start()
    q.close()
    th.join(2)
    assert errors == ["closed"]


def test_queue_preserves_per_producer_order():
    q = TrajectoryQueue(8)
    n = 500

    def producer(k):
        for i in range(n):
            q.push((k, i))

    threads = [threading.Thread(target=producer, args=(k,)) for k in range(4)]
    for th in threads:
        th.start()
    got = []
    while len(got) < 4 * n:
        got.extend(q.pop_batch(1, timeout=2))
    for th in threads:
        th.join()
    for k in range(4):
        assert [i for kk, i in got if kk == k] == list(range(n))


# -- sum tree ---------------------------------------------------------------------


def test_sum_tree_pads_to_power_of_two_and_finds_prefix_intervals():
    t = SumTree(5)
    assert t.size == 8
    for i, v in enumerate([1.0, 0.0, 2.0, 3.0, 4.0]):
        t.set(i, v)
    assert t.total == 10.0
    np.testing.assert_array_equal(t.find([0.0, 0.99, 1.0, 2.99, 3.0, 5.99, 6.0, 9.99]),
                                  [0, 0, 2, 2, 3, 3, 4, 4])


def test_sum_tree_root_after_many_mixed_operations(rng):
    t = SumTree(64)
    vals = np.zeros(64)
    for _ in range(100_000 // 10):
        i = int(rng.integers(64))
        v = float(rng.exponential())
        t.set(i, v)
        vals[i] = v
    assert t.total == pytest.approx(vals.sum(), rel=1e-3)


# -- prioritized buffer -----------------------------------------------------------


def test_insert_into_empty_buffer():
    b = PrioritizedBuffer(8, priority_exponent=0.9)
    b.insert("x", priority=2.0)
    assert len(b) == 1 and b.tree.total == pytest.approx(2.0 ** 0.9)


def test_fifo_eviction_and_stale_ids():
    b = PrioritizedBuffer(3)
    ids = [b.insert(i, priority=1.0) for i in range(4)]
    assert len(b) == 3
    assert not b.is_live(ids[0]) and all(b.is_live(i) for i in ids[1:])
    items, _, _ = b.sample(200, np.random.default_rng(0))
    assert 0 not in items
    total = b.tree.total
    b.update_priorities([ids[0]], [100.0])  # stale id: ignored
    assert b.tree.total == total


def test_zero_priority_item_is_never_sampled():
    b = PrioritizedBuffer(4)
    b.insert("old", priority=1.0)
    b.insert("new", priority=0.0)
    items, _, _ = b.sample(5000, np.random.default_rng(1))
    assert set(items) == {"old"}


def test_new_items_get_max_priority_seen():
    b = PrioritizedBuffer(4, priority_exponent=1.0)
    b.insert("a")
    assert b.tree.get(0) == 1.0
    i = b.insert("b", priority=5.0)
    b.update_priorities([i], [7.0])
    b.insert("c")
    assert b.tree.get(2) == 7.0


def test_sampling_below_min_size_is_not_ready():
    b = PrioritizedBuffer(10, min_size=3)
    b.insert(0)
    with pytest.raises(NotReady):
        b.sample(1)


def test_uniform_priorities_give_uniform_frequencies_and_unit_weights():
    b = PrioritizedBuffer(16)
    for i in range(16):
        b.insert(i, priority=0.5)
    items, _, w = b.sample(100_000, np.random.default_rng(2))
    freq = np.bincount(items, minlength=16) / 100_000
    assert np.max(np.abs(freq - 1 / 16)) <= 0.02
    np.testing.assert_allclose(w, 1.0)


def test_two_item_probabilities():
    b = PrioritizedBuffer(2, priority_exponent=0.9)
    b.insert("a", priority=1.0)
    b.insert("b", priority=16.0)
    p = b.probabilities()
    np.testing.assert_allclose(p, [1 / (1 + 16 ** 0.9), 16 ** 0.9 / (1 + 16 ** 0.9)])
    assert p[0] == pytest.approx(0.0762, abs=1e-4)
    b2 = PrioritizedBuffer(2)
    b2.insert("a", priority=0.0)
    b2.insert("b", priority=1.0)
    np.testing.assert_allclose(b2.probabilities(), [0.0, 1.0])


def test_importance_weights_formula():
    b = PrioritizedBuffer(2, priority_exponent=1.0, importance_exponent=0.6)
    b.insert("a", priority=1.0)
    b.insert("b", priority=3.0)
    items, _, w = b.sample(200, np.random.default_rng(3))
    raw = {"a": (2 * 0.25) ** -0.6, "b": (2 * 0.75) ** -0.6}
    expect = np.array([raw[x] for x in items])
    np.testing.assert_allclose(w, expect / expect.max())


def test_update_to_zero_makes_other_item_certain():
    b = PrioritizedBuffer(2)
    ia = b.insert("a", priority=1.0)
    b.insert("b", priority=1.0)
    b.update_priorities([ia], [0.0])
    items, _, _ = b.sample(1000, np.random.default_rng(4))
    assert set(items) == {"b"}
    with pytest.raises(ValueError):
        b.update_priorities([ia], [-1.0])


@pytest.mark.parametrize("seed", range(5))
def test_sampling_chi_square(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 65))
    b = PrioritizedBuffer(n, priority_exponent=0.9)
    prios = rng.uniform(0.05, 5.0, n)
    for i, p in enumerate(prios):
        b.insert(i, priority=p)
    draws = 100_000
    items, _, _ = b.sample(draws, rng)
    counts = np.bincount(items, minlength=n)
    expect = prios ** 0.9 / np.sum(prios ** 0.9)
    assert np.max(np.abs(counts / draws - expect)) <= 0.02
    assert stats.chisquare(counts, expect * draws).pvalue > 0.001


def test_root_matches_exact_sum_after_interleaved_operations(rng):
    b = PrioritizedBuffer(50)
    ids = []
    for _ in range(1000):
        if ids and rng.random() < 0.5:
            b.update_priorities([ids[int(rng.integers(len(ids)))]], [rng.exponential()])
        else:
            ids.append(b.insert(None if rng.random() < 0.1 else "s",
                                priority=float(rng.exponential())))
    assert b.tree.total == pytest.approx(b.exact_total(), rel=1e-3)


def test_configured_sequence_length_is_enforced():
    b = PrioritizedBuffer(4, sequence_length=3)
    b.insert([1, 2, 3])
    with pytest.raises(ValueError):
        b.insert([1, 2])
