import numpy as np
import pytest

from ssta.errors import ConfigError, ReplayError
from ssta.lifelong import ReplayBuffer, draw_batch, id_offer, sw_offer


def test_sliding_window_keeps_last_d():
    buffer = ReplayBuffer(2)
    for s in "abc":
        sw_offer(buffer, s)
    assert buffer.samples() == ["b", "c"]

    empty = ReplayBuffer(0)
    for s in "abc":
        sw_offer(empty, s)
    assert len(empty) == 0


@pytest.mark.parametrize("seed", range(5))
def test_sliding_window_matches_list_slice(seed):
    rng = np.random.default_rng(seed)
    capacity = int(rng.integers(0, 6))
    stream = [int(x) for x in rng.integers(0, 100, size=int(rng.integers(0, 20)))]
    buffer = ReplayBuffer(capacity)
    for s in stream:
        sw_offer(buffer, s)
    assert buffer.samples() == (stream[len(stream) - capacity:] if capacity else [])


def test_interesting_data_hand_simulation():
    buffer = ReplayBuffer(10)
    assert id_offer(buffer, "a", 3.0)[1] is True
    assert id_offer(buffer, "b", 1.0)[1] is False
    assert buffer.mean_norm == 2.0
    assert id_offer(buffer, "c", 5.0)[1] is True
    assert buffer.samples() == ["a", "c"]
    assert buffer.seen == 3


def test_interesting_data_zero_first_norm_is_not_stored():
    buffer = ReplayBuffer(3)
    assert id_offer(buffer, "a", 0.0)[1] is False
    assert len(buffer) == 0


def test_interesting_data_rejects_bad_norms():
    with pytest.raises(ReplayError):
        id_offer(ReplayBuffer(3), "a", -1.0)
    with pytest.raises(ReplayError):
        id_offer(ReplayBuffer(3), "a", float("nan"))


def test_interesting_data_evicts_smallest_norm():
    buffer = ReplayBuffer(2)
    for sample, norm in [("a", 1.0), ("b", 4.0), ("c", 3.0)]:
        id_offer(buffer, sample, norm)
    assert buffer.samples() == ["b", "c"]

    fifo = ReplayBuffer(2, eviction="fifo")
    for sample, norm in [("a", 1.0), ("b", 4.0), ("c", 3.0)]:
        id_offer(fifo, sample, norm)
    assert fifo.samples() == ["b", "c"]


def test_interesting_data_newest_can_be_the_victim():
    buffer = ReplayBuffer(1)
    id_offer(buffer, "a", 10.0)
    id_offer(buffer, "x", 0.0)
    _, stored = id_offer(buffer, "b", 6.0)
    assert stored is False
    assert buffer.samples() == ["a"]


@pytest.mark.parametrize("seed", range(5))
def test_interesting_data_random_stream(seed):
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(int(rng.integers(1, 5)))
    history = []
    for i, norm in enumerate(rng.exponential(size=50)):
        mean_before = float(np.mean(history)) if history else 0.0
        _, stored = id_offer(buffer, i, float(norm))
        history.append(float(norm))
        if norm <= mean_before:
            assert not stored
        assert abs(buffer.mean_norm - float(np.mean(history))) < 1e-12
        assert len(buffer) <= buffer.capacity


def test_buffer_config_errors():
    with pytest.raises(ConfigError):
        ReplayBuffer(-1)
    with pytest.raises(ConfigError):
        ReplayBuffer(3, eviction="random")


def test_draw_batch_cases():
    single = ReplayBuffer(3)
    sw_offer(single, "only")
    assert draw_batch(single, 3, np.random.default_rng(0)) == ["only"] * 3

    full = ReplayBuffer(4)
    for s in "wxyz":
        sw_offer(full, s)
    assert sorted(draw_batch(full, 4, np.random.default_rng(0))) == ["w", "x", "y", "z"]

    for seed in range(5):
        batch = draw_batch(full, 2, np.random.default_rng(seed))
        assert "z" in batch and len(set(batch)) == 2
    assert draw_batch(full, 3, np.random.default_rng(9)) == draw_batch(full, 3, np.random.default_rng(9))


def test_draw_batch_rejections():
    with pytest.raises(ReplayError):
        draw_batch(ReplayBuffer(3), 1, np.random.default_rng(0))
    buffer = ReplayBuffer(3)
    sw_offer(buffer, "a")
    with pytest.raises(ReplayError):
        draw_batch(buffer, 0, np.random.default_rng(0))
