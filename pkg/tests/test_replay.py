import numpy as np
import pytest

from director.replay import NotReady, ReplayBuffer


def fill(buf, stream, n, start=0, episode=None):
    for i in range(start, start + n):
        img = np.full((2, 2, 3), i % 256, np.uint8)
        first = episode is not None and i % episode == 0
        buf.add(stream, img, np.eye(3, dtype=np.float32)[i % 3], float(i), first)


def test_default_sample_shapes():
    buf = ReplayBuffer(10_000, (64, 64, 3), 5, streams=4)
    for s in range(4):
        for i in range(70):
            buf.add(s, np.zeros((64, 64, 3), np.float32), np.eye(5, dtype=np.float32)[0], 0.0, i == 0)
    batch = buf.sample(16, 64)
    assert batch.image.shape == (16, 64, 64, 64, 3) and batch.image.dtype == np.uint8
    assert batch.action.shape == (16, 64, 5)
    assert batch.reward.shape == batch.is_first.shape == (16, 64)


def test_not_ready_until_one_chunk():
    buf = ReplayBuffer(100, (2, 2, 3), 3)
    fill(buf, 0, 7)
    assert not buf.ready(8)
    with pytest.raises(NotReady):
        buf.sample(2, 8)
    fill(buf, 0, 1, start=7)
    assert buf.ready(8) and buf.sample(2, 8).shape == (2, 8)


def test_chunks_are_contiguous_and_within_one_stream():
    buf = ReplayBuffer(200, (2, 2, 3), 3, streams=2)
    fill(buf, 0, 50)
    fill(buf, 1, 30, start=1000)
    batch = buf.sample(64, 10)
    diffs = np.diff(batch.reward, axis=1)
    assert np.all(diffs == 1.0)


def test_episode_boundaries_are_marked():
    buf = ReplayBuffer(200, (2, 2, 3), 3)
    fill(buf, 0, 100, episode=25)
    batch = buf.sample(200, 30)
    # Any chunk holding a step with index multiple of 25 flags exactly there.
    idx = batch.reward.astype(int)
    assert np.array_equal(batch.is_first, idx % 25 == 0)


def test_fifo_eviction():
    buf = ReplayBuffer(20, (2, 2, 3), 3)
    fill(buf, 0, 35)
    assert len(buf) == 20
    batch = buf.sample(100, 5)
    assert batch.reward.min() >= 15 and batch.reward.max() == 34
    assert np.all(np.diff(batch.reward, axis=1) == 1.0)


def test_float_images_are_quantized():
    buf = ReplayBuffer(10, (1, 1, 3), 2)
    buf.add(0, np.array([[[0.0, 0.5, 1.0]]], np.float32), np.zeros(2, np.float32), 0.0, True)
    assert buf.image[0, 0, 0, 0].tolist() == [0, 128, 255]


def test_sampling_is_seeded():
    a, b = ReplayBuffer(100, (2, 2, 3), 3, seed=4), ReplayBuffer(100, (2, 2, 3), 3, seed=4)
    fill(a, 0, 60)
    fill(b, 0, 60)
    assert np.array_equal(a.sample(8, 5).reward, b.sample(8, 5).reward)
    assert a.cursor() == {"written": [60], "per_stream": 100}
