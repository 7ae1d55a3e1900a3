"""Neural backward-Euler solvers for parabolic PDEs."""

import json

from ._dgflow import (
    Activation,
    Network,
    __version__,
    bs_exact,
    bump_value,
    heat_exact,
    load_config_json,
    run_json,
)

__all__ = [
    "Activation",
    "Network",
    "__version__",
    "bs_exact",
    "bump_value",
    "heat_exact",
    "load_config",
    "run",
]


def load_config(path):
    """Validated run config with defaults filled in."""
    return json.loads(load_config_json(str(path)))


def run(subcommand, config, out, seed=None):
    """Run a subcommand and return its manifest as a dict."""
    return json.loads(run_json(subcommand, str(config), str(out), seed))
