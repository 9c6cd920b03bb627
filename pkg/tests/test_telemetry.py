import pytest

from safn import telemetry, training


def test_instrument_without_opentelemetry(monkeypatch, caplog):
    monkeypatch.setattr(telemetry, "_HAS_OTEL", False)
    original = training.run_cv
    assert telemetry.instrument() is False
    assert training.run_cv is original
    assert "OpenTelemetry not installed" in caplog.text


def test_instrument_wraps_training_once(monkeypatch):
    trace = pytest.importorskip("opentelemetry.trace")
    monkeypatch.setattr(training, "train_one_fold", training.train_one_fold)
    monkeypatch.setattr(training, "run_cv", training.run_cv)

    assert telemetry.instrument(trace.NoOpTracerProvider()) is True
    wrapped = training.train_one_fold
    assert getattr(wrapped, "_is_otel_instrumented", False)
    assert telemetry.instrument(trace.NoOpTracerProvider()) is True
    assert training.train_one_fold is wrapped
