import pytest

from app import config
from app.config import get_abs_path, tf_getenv


def test_tf_getenv(monkeypatch):
    monkeypatch.setenv("TF_KEY_1", "[1, 3, 6]")
    assert tf_getenv("TF_KEY_1") == [1, 3, 6]

    monkeypatch.setenv("TF_KEY_2", "(2, 4)")
    assert tf_getenv("TF_KEY_2") == (2, 4)

    assert tf_getenv("TF_KEY_3", default_factory=list) == []

    with pytest.raises(TypeError):
        tf_getenv("TF_KEY_4")


def test_get_abs_path():
    assert get_abs_path("/tmp/a") == "/tmp/a"
    assert get_abs_path("tests/test.env").startswith(config.ROOT_DIR)


def test_test_env_loaded():
    assert config.ASPP_RATES == (1, 3, 6)
    assert config.JOBS == 1
    assert config.IOU_THRESHOLD == 0.5
    assert config.FOCAL_ALPHA == 0.25
    assert config.FOCAL_GAMMA == 2.0
