import json

import pytest

from fishmerge.config import THREADS_ENV, thread_count
from fishmerge.errors import (
    EXIT_DATA,
    EXIT_NUMERICAL,
    EXIT_USAGE,
    CheckpointFormatError,
    CompatibilityError,
    ConfigError,
    DataFormatError,
    NumericalError,
    SweepError,
)
from fishmerge.timing import PhaseTimer


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert thread_count() == 3
    monkeypatch.delenv(THREADS_ENV)
    assert 1 <= thread_count() <= 4


@pytest.mark.parametrize("raw", ["0", "-2", "many"])
def test_invalid_thread_count(monkeypatch, raw):
    monkeypatch.setenv(THREADS_ENV, raw)
    with pytest.raises(ConfigError, match=THREADS_ENV):
        thread_count()


@pytest.mark.parametrize(
    "error, code",
    [
        (ConfigError("x"), EXIT_USAGE),
        (DataFormatError("x"), EXIT_DATA),
        (CheckpointFormatError("x"), EXIT_DATA),
        (CompatibilityError("x"), EXIT_DATA),
        (NumericalError("x"), EXIT_NUMERICAL),
    ],
)
def test_exit_codes(error, code):
    assert error.exit_code == code
    data = error.to_json()
    assert data == {"error": type(error).__name__, "message": "x", "exit_code": code}
    json.dumps(data)


def test_sweep_error_takes_the_cause_exit_code():
    err = SweepError((0.25, 0.75), NumericalError("overflow"))
    assert err.exit_code == EXIT_NUMERICAL
    assert err.lambdas == [0.25, 0.75]
    assert "0.25" in str(err) and "overflow" in str(err)


def test_phase_timer_counts_calls():
    timer = PhaseTimer()
    for _ in range(3):
        with timer.phase("merge"):
            pass
    with pytest.raises(RuntimeError):
        with timer.phase("load"):
            raise RuntimeError("boom")
    assert timer.counts == {"merge": 3, "load": 1}
    table = timer.summary()
    assert "Phase" in table and "merge" in table and "load" in table
