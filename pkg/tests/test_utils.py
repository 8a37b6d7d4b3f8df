import threading

from app.utils import config_hash, debug_info, parallel_map, random_string


def test_random_string():
    s = random_string()
    assert len(s) == 10

    s = random_string(8, include_digits=True)
    assert len(s) == 8


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 64


def test_parallel_map_keeps_order():
    items = list(range(20))
    assert parallel_map(lambda x: x * x, items, jobs=1) == [x * x for x in items]
    assert parallel_map(lambda x: x * x, items, jobs=4) == [x * x for x in items]


def test_parallel_map_inline_for_one_job():
    threads = parallel_map(lambda _: threading.get_ident(), range(3), jobs=1)
    assert set(threads) == {threading.get_ident()}


def test_debug_info():
    @debug_info
    def f(x):
        return x + 1

    assert f(1) == 2
    assert f.__name__ == "f"
