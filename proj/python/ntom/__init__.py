"""Neural temporal opinion model: point-process math, simulation and training."""

from ._ntom import (
    CheckpointError,
    ConfigError,
    DataError,
    EmptyResultError,
    cumulative_intensity,
    density,
    evaluate,
    expected_time,
    intensity,
    load_jsonl,
    simulate,
    softmax,
    survival,
    topic_words,
    train,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "EmptyResultError",
    "cumulative_intensity",
    "density",
    "evaluate",
    "expected_time",
    "intensity",
    "load_jsonl",
    "simulate",
    "softmax",
    "survival",
    "topic_words",
    "train",
]
