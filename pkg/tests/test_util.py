import threading

import numpy as np
import pytest

from chromaphase import util
from chromaphase.util import ConfigError, TrainingError


def test_error_formats_message():
    err = util.SolverError("need {} planes, got {}", 2, 3)
    assert str(err) == "need 2 planes, got 3"
    assert isinstance(err, util.ChromaphaseError)


def test_training_error_carries_step():
    err = TrainingError("loss is {}", float("nan"), step=5, checkpoint="ckpt")
    assert err.step == 5
    assert err.checkpoint == "ckpt"


def test_dataset_error_hierarchy():
    for cls in (
        util.NotADatasetError,
        util.VersionMismatchError,
        util.TruncatedFileError,
        util.ShapeMismatchError,
    ):
        assert issubclass(cls, util.DatasetError)


@pytest.mark.parametrize(
    "text, meters",
    [
        ("550nm", 550e-9),
        ("2 um", 2e-6),
        ("0.5e-6m", 0.5e-6),
        ("1.5mm", 1.5e-3),
        ("-3um", -3e-6),
    ],
)
def test_parse_length(text, meters):
    assert util.parse_length(text) == pytest.approx(meters, rel=1e-12)


@pytest.mark.parametrize("value", ["550", "2 furlongs", 550e-9, "", "nm"])
def test_parse_length_rejects_missing_units(value):
    with pytest.raises(ConfigError):
        util.parse_length(value)


def test_env_boolean(monkeypatch):
    monkeypatch.setenv("CHROMAPHASE_VERBOSE", "yes")
    assert util.get_env_boolean("verbose")
    monkeypatch.setenv("CHROMAPHASE_VERBOSE", "off")
    assert not util.get_env_boolean("verbose")
    monkeypatch.setenv("CHROMAPHASE_VERBOSE", "maybe")
    with pytest.raises(ConfigError):
        util.get_env_boolean("verbose")


def test_thread_count(monkeypatch):
    monkeypatch.setenv("CHROMAPHASE_THREADS", "3")
    assert util.get_thread_count() == 3
    monkeypatch.setenv("CHROMAPHASE_THREADS", "auto")
    assert util.get_thread_count() >= 1
    monkeypatch.setenv("CHROMAPHASE_THREADS", "0")
    with pytest.raises(ConfigError):
        util.get_thread_count()
    monkeypatch.setenv("CHROMAPHASE_THREADS", "many")
    with pytest.raises(ConfigError):
        util.get_thread_count()


def test_parallel_map_keeps_order():
    items = list(range(50))
    assert util.parallel_map(lambda x: x * x, items, threads=4) == [x * x for x in items]
    assert util.parallel_map(lambda x: x, [], threads=4) == []


def test_parallel_map_uses_threads():
    seen = set()
    lock = threading.Lock()
    barrier = threading.Barrier(2, timeout=5)

    def work(item):
        with lock:
            seen.add(threading.get_ident())
        if item < 2:
            barrier.wait()
        return item

    util.parallel_map(work, range(4), threads=2)
    assert len(seen) == 2


def test_parallel_map_reraises_first_error():
    def work(item):
        if item in (3, 7):
            raise ValueError(item)
        return item

    with pytest.raises(ValueError, match="3"):
        util.parallel_map(work, range(10), threads=1)


def test_rng_stream_is_deterministic_and_keyed():
    a = util.rng_stream(5, 1).standard_normal(8)
    b = util.rng_stream(5, 1).standard_normal(8)
    c = util.rng_stream(5, 2).standard_normal(8)
    d = util.rng_stream(6, 1).standard_normal(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_rng_state_json_round_trip():
    rng = util.rng_stream(3, 0)
    rng.standard_normal(17)
    state = util.rng_state_to_json(rng)
    restored = util.rng_from_json(state)
    assert np.array_equal(rng.standard_normal(20), restored.standard_normal(20))


def test_rng_from_json_rejects_other_generators():
    state = util.rng_state_to_json(np.random.Generator(np.random.PCG64(0)))
    with pytest.raises(ConfigError):
        util.rng_from_json(state)


def test_sha256_file(tmp_path):
    path = tmp_path / "blob"
    path.write_bytes(b"abc")
    assert (
        util.sha256_file(str(path))
        == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    )


def test_require_finite():
    util.require_finite(np.ones(3), "ok")
    with pytest.raises(util.FieldError, match="2 non-finite values"):
        util.require_finite(np.array([1.0, np.nan, np.inf]), "bad")
