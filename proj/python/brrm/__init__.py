"""Two-turn branch-and-rethink reward-model engine.

Thin wrappers over the native core. Configs are dicts of overrides on top of
the engine defaults (same schema as the CLI's --config file).
"""

import json as _json

from . import _core
from ._core import (
    BackendError,
    BrrmError,
    ConfigError,
    EmptyDatasetError,
    InputError,
    IoError,
)

__version__ = _core.__version__

__all__ = [
    "BackendError",
    "BrrmError",
    "ConfigError",
    "EmptyDatasetError",
    "InputError",
    "IoError",
    "analyze",
    "clipped_surrogate",
    "composite_reward",
    "default_config",
    "evaluate",
    "group_advantages",
    "parse_trace",
    "train_toy",
]


def _cfg(config):
    return "" if not config else _json.dumps(config)


def default_config():
    return _json.loads(_core.default_config())


def parse_trace(text, config=None):
    return _json.loads(_core.parse_trace(text, _cfg(config)))


def composite_reward(text, label, truth_score=None, config=None):
    return _json.loads(_core.composite_reward(text, label, truth_score, _cfg(config)))


def group_advantages(rewards, std_epsilon=1e-8):
    return _core.group_advantages(list(rewards), std_epsilon)


def clipped_surrogate(ratio, advantage, config=None):
    return _core.clipped_surrogate(ratio, advantage, _cfg(config))


def train_toy(config=None):
    """Runs the toy training loop; returns {"initial": ..., "steps": [...]}."""
    return _json.loads(_core.train_toy(_cfg(config)))


def evaluate(dataset, bon=False, config=None):
    """Evaluates a JSONL dataset with the configured backend; returns the report."""
    return _json.loads(_core.evaluate(str(dataset), bon, _cfg(config)))


def analyze(traces, config=None):
    """Allocation summary for a list of (turn1, turn2) text pairs."""
    return _json.loads(_core.analyze([tuple(t) for t in traces], _cfg(config)))
