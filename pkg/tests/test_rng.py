import numpy as np
import pytest

from fluctlab.rng import StreamKey, experiment_id, normal_stream, replicate_keys


def test_stream_is_pure_function_of_key():
    k = StreamKey(12345, 7, 3, 2)
    assert np.array_equal(normal_stream(k, 100), normal_stream(StreamKey(12345, 7, 3, 2), 100))


def test_prefix_property():
    k = StreamKey(1, 2, 3, 4)
    assert np.array_equal(normal_stream(k, 10), normal_stream(k, 50)[:10])


@pytest.mark.parametrize("field", ["seed", "experiment", "replicate", "mode"])
def test_distinct_keys_give_distinct_streams(field):
    base = dict(seed=5, experiment=1, replicate=1, mode=1)
    other = dict(base, **{field: base[field] + 1})
    a = normal_stream(StreamKey(**base), 64)
    b = normal_stream(StreamKey(**other), 64)
    assert not np.allclose(a, b)


def test_streams_look_independent_and_standard():
    draws = np.stack([normal_stream(StreamKey(9, 0, r), 4000) for r in range(8)])
    assert abs(draws.mean()) < 4 / np.sqrt(draws.size)
    assert abs(draws.var() - 1) < 0.05
    corr = np.corrcoef(draws)
    off = corr[~np.eye(8, dtype=bool)]
    assert np.max(np.abs(off)) < 5 / np.sqrt(4000)


def test_seed_range_is_enforced():
    StreamKey(2 ** 64 - 1)
    with pytest.raises(ValueError):
        StreamKey(2 ** 64)
    with pytest.raises(ValueError):
        StreamKey(-1)


def test_experiment_ids_and_replicate_keys():
    assert experiment_id("clt") == experiment_id("clt")
    assert experiment_id("clt") != experiment_id("scaling")
    keys = replicate_keys(3, "clt", [0, 5])
    assert [k.replicate for k in keys] == [0, 5]
    assert keys[0].experiment == experiment_id("clt")
    assert keys[1].for_mode(4).mode == 4
