"""Python front end to the cyclefed federated averaging simulator."""

import json

from ._cyclefed import (
    CheckpointError,
    ManifestError,
    config_keys,
    fairness,
    load_checkpoint,
    load_mnist,
    param_count,
    partition,
    synth_dataset,
)
from . import _cyclefed

__all__ = [
    "CheckpointError",
    "ManifestError",
    "config",
    "config_keys",
    "expand_grid",
    "fairness",
    "load_checkpoint",
    "load_mnist",
    "param_count",
    "partition",
    "run",
    "synth_dataset",
]


def _text(value):
    if isinstance(value, (list, tuple)):
        return ",".join(_text(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _values(overrides):
    return {k: _text(v) for k, v in overrides.items()}


def config(preset=None, **overrides):
    """Resolved config as a dict of key -> text value."""
    return _cyclefed.resolve_config(_values(overrides), preset or "")


def expand_grid(preset=None, **overrides):
    """Run ids of the grid, in execution order."""
    return _cyclefed.expand_grid(_values(overrides), preset or "")


def run(preset=None, write_outputs=True, **overrides):
    """Runs the grid and returns the summary document as a dict."""
    text = _cyclefed.run_experiment_json(_values(overrides), preset or "", write_outputs)
    return json.loads(text)
